//! Graphons, step projections, cut norms and Bernoulli graph sampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng;

/// Largest block count handled by exact cut-norm enumeration.
pub const EXACT_CUT_LIMIT: usize = 24;

/// Named analytic kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    Constant { p: f64 },
    Product,
    Min,
    /// a·(u+v)/2 + b
    AffineMean { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Graphon {
    Analytic(Kernel),
    Step(StepGraphon),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStep")]
pub struct StepGraphon {
    n_blocks: usize,
    weights: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    n_blocks: usize,
    weights: Vec<Vec<f64>>,
}

impl TryFrom<RawStep> for StepGraphon {
    type Error = Error;
    fn try_from(r: RawStep) -> Result<Self> {
        if r.weights.len() != r.n_blocks {
            return param(format!(
                "step graphon declares {} blocks but has {} rows",
                r.n_blocks,
                r.weights.len()
            ));
        }
        StepGraphon::new(r.weights)
    }
}

impl StepGraphon {
    pub fn new(weights: Vec<Vec<f64>>) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return param("step graphon needs at least one block");
        }
        for (i, row) in weights.iter().enumerate() {
            if row.len() != n {
                return param(format!("step graphon row {} has length {}, expected {n}", i + 1, row.len()));
            }
            for (j, &w) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&w) {
                    return param(format!("block value {w} at ({}, {}) outside [0,1]", i + 1, j + 1));
                }
                if weights[j][i] != w {
                    return param(format!("step graphon not symmetric at ({}, {})", i + 1, j + 1));
                }
            }
        }
        Ok(StepGraphon { n_blocks: n, weights })
    }

    pub fn constant(n: usize, p: f64) -> Result<Self> {
        Self::new(vec![vec![p; n]; n])
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn block(&self, i: usize, j: usize) -> f64 {
        self.weights[i][j]
    }

    /// Block index of a label under right-closed blocks; label 0 goes to the first block.
    pub fn block_of(&self, u: f64) -> usize {
        block_index(self.n_blocks, u)
    }

    /// Split every block into `factor`×`factor` equal sub-blocks.
    pub fn refine(&self, factor: usize) -> StepGraphon {
        let n = self.n_blocks * factor;
        let weights = (0..n)
            .map(|i| (0..n).map(|j| self.weights[i / factor][j / factor]).collect())
            .collect();
        StepGraphon { n_blocks: n, weights }
    }

    pub fn max_value(&self) -> f64 {
        self.weights.iter().flatten().copied().fold(0.0, f64::max)
    }
}

fn block_index(n: usize, u: f64) -> usize {
    let k = (n as f64 * u).ceil() as usize;
    k.clamp(1, n) - 1
}

fn check_label(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::Domain(format!("label {u} outside [0,1]")))
    }
}

impl Kernel {
    fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Constant { p } if !(0.0..=1.0).contains(&p) => param(format!("constant kernel value {p} outside [0,1]")),
            Kernel::AffineMean { a, b } => {
                // affine in t = (u+v)/2, so checking the endpoints suffices
                if !(0.0..=1.0).contains(&b) || !(0.0..=1.0).contains(&(a + b)) {
                    param(format!("affine-mean kernel a={a}, b={b} leaves [0,1]"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn value(&self, u: f64, v: f64) -> f64 {
        match *self {
            Kernel::Constant { p } => p,
            Kernel::Product => u * v,
            Kernel::Min => u.min(v),
            Kernel::AffineMean { a, b } => a * (u + v) / 2.0 + b,
        }
    }
}

impl Graphon {
    pub fn constant(p: f64) -> Graphon {
        Graphon::Analytic(Kernel::Constant { p })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Graphon::Analytic(k) => k.validate(),
            Graphon::Step(_) => Ok(()),
        }
    }

    /// G(u, v) with labels checked against [0,1].
    pub fn eval(&self, u: f64, v: f64) -> Result<f64> {
        check_label(u)?;
        check_label(v)?;
        Ok(self.eval_unchecked(u, v))
    }

    pub(crate) fn eval_unchecked(&self, u: f64, v: f64) -> f64 {
        match self {
            Graphon::Analytic(k) => k.value(u, v),
            Graphon::Step(s) => s.weights[s.block_of(u)][s.block_of(v)],
        }
    }

    /// ∫ G(u, v) dv by midpoint quadrature (exact for constants and step graphons aligned to `nodes`).
    pub fn degree(&self, u: f64, nodes: usize) -> f64 {
        let h = 1.0 / nodes as f64;
        (0..nodes).map(|m| self.eval_unchecked(u, (m as f64 + 0.5) * h)).sum::<f64>() * h
    }
}

/// Sample G at the upper grid corners (i/n, j/n).
pub fn project_step(g: &Graphon, n: usize) -> Result<StepGraphon> {
    if n == 0 {
        return param("projection needs n >= 1");
    }
    g.validate()?;
    let weights = (1..=n)
        .map(|i| (1..=n).map(|j| g.eval_unchecked(i as f64 / n as f64, j as f64 / n as f64)).collect())
        .collect();
    Ok(StepGraphon { n_blocks: n, weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutNorm {
    pub value: f64,
    /// false when the greedy-alternation heuristic produced the value (a lower bound)
    pub exact: bool,
    pub blocks: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Signed block-mass matrix of A − B on the common refinement.
fn mass_matrix(a: &StepGraphon, b: &StepGraphon) -> (usize, Vec<f64>) {
    let l = a.n_blocks / gcd(a.n_blocks, b.n_blocks) * b.n_blocks;
    let (fa, fb) = (l / a.n_blocks, l / b.n_blocks);
    let scale = 1.0 / (l * l) as f64;
    let mut m = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            m[i * l + j] = (a.weights[i / fa][j / fa] - b.weights[i / fb][j / fb]) * scale;
        }
    }
    (l, m)
}

/// Exact cut distance of two step graphons; refuses above 24 blocks.
pub fn cut_norm(a: &StepGraphon, b: &StepGraphon) -> Result<CutNorm> {
    let (n, m) = mass_matrix(a, b);
    if n > EXACT_CUT_LIMIT {
        return Err(Error::ExactInfeasible { blocks: n });
    }
    Ok(CutNorm { value: exact_cut(n, &m), exact: true, blocks: n })
}

/// Exact below the limit, greedy alternation (flagged non-exact) above it.
pub fn cut_norm_or_heuristic(a: &StepGraphon, b: &StepGraphon) -> CutNorm {
    let (n, m) = mass_matrix(a, b);
    if n <= EXACT_CUT_LIMIT {
        CutNorm { value: exact_cut(n, &m), exact: true, blocks: n }
    } else {
        CutNorm { value: heuristic_cut(n, &m), exact: false, blocks: n }
    }
}

// For a fixed row set the best column set takes the positive (or negative)
// column sums, so sweeping all row sets in Gray-code order is exact.
fn exact_cut(n: usize, m: &[f64]) -> f64 {
    let chunk_bits = n.min(10);
    let chunks = 1u64 << (n - chunk_bits);
    (0..chunks)
        .into_par_iter()
        .map(|hi| {
            let mut col = vec![0.0; n];
            let base = hi << chunk_bits;
            for i in (0..n).filter(|&i| base >> i & 1 == 1) {
                for j in 0..n {
                    col[j] += m[i * n + j];
                }
            }
            let mut best = score(&col);
            let mut gray = 0u64;
            for step in 1..(1u64 << chunk_bits) {
                let bit = step.trailing_zeros() as usize;
                gray ^= 1 << bit;
                let sign = if gray >> bit & 1 == 1 { 1.0 } else { -1.0 };
                for j in 0..n {
                    col[j] += sign * m[bit * n + j];
                }
                best = best.max(score(&col));
            }
            best
        })
        .reduce(|| 0.0, f64::max)
        + 0.0
}

fn score(col: &[f64]) -> f64 {
    let (mut pos, mut neg) = (0.0, 0.0);
    for &c in col {
        if c > 0.0 {
            pos += c;
        } else {
            neg -= c;
        }
    }
    pos.max(neg)
}

fn heuristic_cut(n: usize, m: &[f64]) -> f64 {
    let mut best: f64 = 0.0;
    for sign in [1.0, -1.0] {
        let starts: Vec<Vec<bool>> = (0..n)
            .map(|i| (0..n).map(|k| k == i).collect())
            .chain(std::iter::once(vec![true; n]))
            .chain((0..32u64).map(|r| (0..n).map(|k| rng::uniform(r, &[k as u64]) < 0.5).collect()))
            .collect();
        for mut x in starts {
            let mut last = f64::NEG_INFINITY;
            for _ in 0..100 {
                let col: Vec<f64> = (0..n)
                    .map(|j| (0..n).filter(|&i| x[i]).map(|i| sign * m[i * n + j]).sum())
                    .collect();
                let y: Vec<bool> = col.iter().map(|&c| c > 0.0).collect();
                let row: Vec<f64> = (0..n)
                    .map(|i| (0..n).filter(|&j| y[j]).map(|j| sign * m[i * n + j]).sum())
                    .collect();
                let val: f64 = row.iter().filter(|&&r| r > 0.0).sum();
                x = row.iter().map(|&r| r > 0.0).collect();
                if val <= last + 1e-15 {
                    break;
                }
                last = val;
            }
            best = best.max(last);
        }
    }
    // avoid reporting −0
    best + 0.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "GraphJson", try_from = "GraphJson")]
pub struct InteractionGraph {
    n: usize,
    beta_n: f64,
    adjacency: Vec<bool>,
    source_step: Option<StepGraphon>,
}

impl PartialEq for InteractionGraph {
    fn eq(&self, o: &Self) -> bool {
        self.n == o.n && self.beta_n == o.beta_n && self.adjacency == o.adjacency
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphJson {
    n: usize,
    beta_n: f64,
    edges: Vec<[usize; 2]>,
}

impl From<InteractionGraph> for GraphJson {
    fn from(g: InteractionGraph) -> Self {
        GraphJson { n: g.n, beta_n: g.beta_n, edges: g.edges() }
    }
}

impl TryFrom<GraphJson> for InteractionGraph {
    type Error = Error;
    fn try_from(j: GraphJson) -> Result<Self> {
        InteractionGraph::from_edges(j.n, j.beta_n, &j.edges)
    }
}

impl InteractionGraph {
    /// Build from 1-based undirected edges.
    pub fn from_edges(n: usize, beta_n: f64, edges: &[[usize; 2]]) -> Result<Self> {
        if !(beta_n > 0.0 && beta_n <= 1.0) {
            return param(format!("beta_n = {beta_n} outside (0,1]"));
        }
        let mut adjacency = vec![false; n * n];
        for &[i, j] in edges {
            if i == 0 || j == 0 || i > n || j > n || i == j {
                return param(format!("invalid edge [{i}, {j}] for n = {n}"));
            }
            adjacency[(i - 1) * n + (j - 1)] = true;
            adjacency[(j - 1) * n + (i - 1)] = true;
        }
        Ok(InteractionGraph { n, beta_n, adjacency, source_step: None })
    }

    pub fn complete(n: usize) -> Self {
        let adjacency = (0..n * n).map(|k| k / n != k % n).collect();
        InteractionGraph { n, beta_n: 1.0, adjacency, source_step: None }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn beta_n(&self) -> f64 {
        self.beta_n
    }

    pub fn source_step(&self) -> Option<&StepGraphon> {
        self.source_step.as_ref()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i * self.n..(i + 1) * self.n].iter().filter(|&&b| b).count()
    }

    /// 1-based edge list with i < j.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.has_edge(i, j) {
                    out.push([i + 1, j + 1]);
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&b| b).count() / 2
    }
}

/// Bernoulli(β_n·G_n(i/n, j/n)) per unordered pair, keyed on (seed, i, j).
pub fn sample_interaction_graph(gn: &StepGraphon, n: usize, beta_n: f64, seed: u64) -> Result<InteractionGraph> {
    if n < 3 {
        return param(format!("graph sampling needs n >= 3, got {n}"));
    }
    if !(beta_n > 0.0 && beta_n <= 1.0) {
        return param(format!("beta_n = {beta_n} outside (0,1]"));
    }
    if beta_n * gn.max_value() > 1.0 {
        return param(format!("beta_n * max block value = {} exceeds 1", beta_n * gn.max_value()));
    }
    let prob = |i: usize, j: usize| -> f64 {
        if gn.n_blocks == n {
            gn.weights[i][j]
        } else {
            gn.weights[gn.block_of((i + 1) as f64 / n as f64)][gn.block_of((j + 1) as f64 / n as f64)]
        }
    };
    let upper: Vec<Vec<bool>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| rng::uniform(seed, &[rng::TAG_EDGE, i as u64, j as u64]) < beta_n * prob(i, j))
                .collect()
        })
        .collect();
    let mut adjacency = vec![false; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (k, &e) in row.iter().enumerate() {
            let j = i + 1 + k;
            adjacency[i * n + j] = e;
            adjacency[j * n + i] = e;
        }
    }
    Ok(InteractionGraph { n, beta_n, adjacency, source_step: Some(gn.clone()) })
}

/// Row-major n×n interaction weights λ^n with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Weights {
    n: usize,
    data: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Weights {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Weights::from_rows(rows)
    }
}

impl From<Weights> for Vec<Vec<f64>> {
    fn from(w: Weights) -> Self {
        w.data.chunks(w.n).map(|r| r.to_vec()).collect()
    }
}

impl Weights {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for (i, r) in rows.into_iter().enumerate() {
            if r.len() != n {
                return param(format!("weight row {} has length {}, expected {n}", i + 1, r.len()));
            }
            if r[i] != 0.0 {
                return param(format!("weight diagonal entry {} is nonzero", i + 1));
            }
            if r.iter().any(|&x| !(x >= 0.0)) {
                return param(format!("weight row {} has a negative entry", i + 1));
            }
            data.extend(r);
        }
        let w = Weights { n, data };
        w.check_rows()?;
        Ok(w)
    }

    pub fn zeros(n: usize) -> Self {
        Weights { n, data: vec![0.0; n * n] }
    }

    fn check_rows(&self) -> Result<()> {
        for i in 0..self.n {
            let s = self.row_sum(i);
            if s > 1.0 + 1e-12 {
                return Err(Error::RowSum { row: i + 1, sum: s });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }
}

/// λ^n_ij = adjacency / ((n−1)·β_n); rejects rows summing above 1.
pub fn normalized_weights(g: &InteractionGraph) -> Result<Weights> {
    let n = g.n;
    let scale = 1.0 / ((n as f64 - 1.0) * g.beta_n);
    let data = g.adjacency.iter().map(|&e| if e { scale } else { 0.0 }).collect();
    let w = Weights { n, data };
    w.check_rows()?;
    Ok(w)
}
