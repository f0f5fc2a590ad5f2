use std::fmt::Write as _;

use relperf_core::bsde::LsmcParams;
use relperf_core::chaos_lab::{run_experiment, ChaosConfig};
use relperf_core::fixed_point_finite::{best_response_oracle, solve_equilibrium_weights, FiniteEquilibrium, OracleResult, SolveOptions};
use relperf_core::graphon::{cut_norm, cut_norm_or_heuristic, normalized_weights, project_step, sample_interaction_graph, CutNorm, Graphon, InteractionGraph, StepGraphon, Weights};
use relperf_core::graphon_game::{picard_graphon_bsde, solve_graphon_from, GraphonBsdeParams, GraphonBsdeResult, GraphonEquilibrium, LabelGrid};
use relperf_core::indifference::{indifference_bisection, indifference_capital_finite, indifference_capital_graphon, IndifferenceResult};
use relperf_core::market::{AgentCoeffs, TimeGrid};
use relperf_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// How the interaction graph of a finite game is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Complete { n: usize },
    /// 1-based undirected edges
    Edges { n: usize, beta_n: f64, edges: Vec<[usize; 2]> },
    Sample { graphon: Graphon, n: usize, beta_n: f64 },
    Weights { rows: Vec<Vec<f64>> },
    /// no competition at all
    Empty { n: usize },
}

impl GraphSpec {
    fn n(&self) -> usize {
        match self {
            GraphSpec::Complete { n } | GraphSpec::Edges { n, .. } | GraphSpec::Sample { n, .. } | GraphSpec::Empty { n } => *n,
            GraphSpec::Weights { rows } => rows.len(),
        }
    }

    fn weights(&self, seed: u64) -> Result<(Weights, Option<InteractionGraph>)> {
        let from_graph = |g: InteractionGraph| -> Result<(Weights, Option<InteractionGraph>)> { Ok((normalized_weights(&g)?, Some(g))) };
        match self {
            GraphSpec::Complete { n } => from_graph(InteractionGraph::complete(*n)),
            GraphSpec::Edges { n, beta_n, edges } => from_graph(InteractionGraph::from_edges(*n, *beta_n, edges)?),
            GraphSpec::Sample { graphon, n, beta_n } => from_graph(sample_interaction_graph(&project_step(graphon, *n)?, *n, *beta_n, seed)?),
            GraphSpec::Weights { rows } => Ok((Weights::from_rows(rows.clone())?, None)),
            GraphSpec::Empty { n } => Ok((Weights::zeros(*n), None)),
        }
    }
}

fn default_tol() -> f64 {
    1e-10
}
fn default_paths() -> usize {
    100_000
}
fn default_k() -> f64 {
    3.0
}
fn default_labels() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default = "default_paths")]
    pub mc_paths: usize,
    /// allowed gain in utility standard errors
    #[serde(default = "default_k")]
    pub threshold_se: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        VerifySpec { mc_paths: default_paths(), threshold_se: default_k() }
    }
}

fn expand(agents: &[AgentCoeffs], n: usize) -> Result<Vec<AgentCoeffs>> {
    match agents.len() {
        1 => Ok(vec![agents[0].clone(); n]),
        m if m == n => Ok(agents.to_vec()),
        m => Err(Error::Parameter(format!("{m} agent coefficient sets for {n} agents"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteConfig {
    pub graph: GraphSpec,
    /// one entry shared by all agents, or one per agent
    pub agents: Vec<AgentCoeffs>,
    pub tgrid: TimeGrid,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub verify: VerifySpec,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FiniteOutput {
    pub equilibrium: FiniteEquilibrium,
    pub weights: Weights,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<InteractionGraph>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<Vec<OracleResult>>,
}

pub fn solve_finite(cfg: &FiniteConfig, seed: u64, verify: bool) -> Result<(FiniteOutput, bool)> {
    let n = cfg.graph.n();
    let coeffs = expand(&cfg.agents, n)?;
    for c in &coeffs {
        c.validate(&cfg.tgrid)?;
    }
    let (weights, graph) = cfg.graph.weights(seed)?;
    let eq = solve_equilibrium_weights(&weights, &coeffs, &cfg.tgrid, &SolveOptions { tol: cfg.tol, ..Default::default() })?;
    let mut ok = true;
    let verification = if verify {
        let r: Vec<OracleResult> = (0..n)
            .map(|i| best_response_oracle(i, &eq, &coeffs, &weights, &cfg.tgrid, cfg.verify.mc_paths, seed))
            .collect::<Result<_>>()?;
        ok = r.iter().all(|o| o.passes(cfg.verify.threshold_se));
        Some(r)
    } else {
        None
    };
    Ok((FiniteOutput { equilibrium: eq, weights, graph, verification }, ok))
}

pub fn finite_csv(out: &FiniteOutput) -> String {
    let eq = &out.equilibrium;
    let mut s = String::from("agent,step,component,pi,zeta_star\n");
    for i in 0..eq.n {
        for (k, pi) in eq.pi[i].iter().enumerate() {
            for (l, p) in pi.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{:e},{:e}", i + 1, k, l, p, eq.zeta_star[i][k]);
            }
        }
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeSpec {
    #[serde(default)]
    pub kappa: f64,
    pub paths: usize,
    pub picard_iters: usize,
    #[serde(default)]
    pub lsmc: Option<LsmcParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphonConfig {
    pub graphon: Graphon,
    #[serde(default = "default_labels")]
    pub labels: usize,
    /// one entry for every label, or one per label
    pub agents: Vec<AgentCoeffs>,
    pub tgrid: TimeGrid,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// regression Monte Carlo solve of the graphon BSDE (no common noise)
    #[serde(default)]
    pub bsde: Option<BsdeSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GraphonOutput {
    pub equilibrium: GraphonEquilibrium,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bsde: Option<GraphonBsdeResult>,
}

pub fn solve_graphon(cfg: &GraphonConfig, seed: u64) -> Result<GraphonOutput> {
    let grid = LabelGrid::new(cfg.labels)?;
    for c in &cfg.agents {
        c.validate(&cfg.tgrid)?;
    }
    let eq = solve_graphon_from(&cfg.graphon, &grid, &cfg.tgrid, &cfg.agents, &SolveOptions { tol: cfg.tol, ..Default::default() }, None)?;
    let bsde = match &cfg.bsde {
        Some(b) => Some(picard_graphon_bsde(
            &cfg.graphon,
            &grid,
            &cfg.tgrid,
            &cfg.agents,
            &GraphonBsdeParams { kappa: b.kappa, paths: b.paths, picard_iters: b.picard_iters, lsmc: b.lsmc.unwrap_or_default(), seed },
        )?),
        None => None,
    };
    Ok(GraphonOutput { equilibrium: eq, bsde })
}

pub fn graphon_csv(out: &GraphonOutput) -> String {
    let eq = &out.equilibrium;
    let mut s = String::from("label,u,step,component,pi,z_star\n");
    for (m, u) in eq.labels.iter().enumerate() {
        for (k, pi) in eq.pi[m].iter().enumerate() {
            for (l, p) in pi.iter().enumerate() {
                let _ = writeln!(s, "{},{:e},{},{},{:e},{:e}", m + 1, u, k, l, p, eq.z_star[m][k]);
            }
        }
    }
    s
}

pub fn chaos(cfg: &ChaosConfig, seed: u64) -> Result<relperf_core::chaos_lab::ChaosReport> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    run_experiment(&cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BisectionSpec {
    /// 1-based agent
    pub agent: usize,
    #[serde(default = "default_paths")]
    pub mc_paths: usize,
    #[serde(default = "default_bisect_tol")]
    pub tol: f64,
}

fn default_bisect_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphonPart {
    pub graphon: Graphon,
    #[serde(default = "default_labels")]
    pub labels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndifferenceConfig {
    pub graph: GraphSpec,
    pub agents: Vec<AgentCoeffs>,
    pub tgrid: TimeGrid,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Monte Carlo bisection run under --verify
    #[serde(default)]
    pub bisection: Option<BisectionSpec>,
    /// also compute the graphon capital per label (homogeneous agents)
    #[serde(default)]
    pub graphon: Option<GraphonPart>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndifferenceOutput {
    pub finite: IndifferenceResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graphon: Option<IndifferenceResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bisection: Option<IndifferenceResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<bool>,
}

pub fn indifference(cfg: &IndifferenceConfig, seed: u64, verify: bool) -> Result<(IndifferenceOutput, bool)> {
    let n = cfg.graph.n();
    let coeffs = expand(&cfg.agents, n)?;
    for c in &coeffs {
        c.validate(&cfg.tgrid)?;
    }
    let (weights, _) = cfg.graph.weights(seed)?;
    let eq = solve_equilibrium_weights(&weights, &coeffs, &cfg.tgrid, &SolveOptions { tol: cfg.tol, ..Default::default() })?;
    let finite = indifference_capital_finite(&eq, &coeffs, &weights, &cfg.tgrid)?;
    let graphon = match &cfg.graphon {
        Some(g) => {
            if cfg.agents.len() != 1 {
                return Err(Error::Parameter("graphon capital needs one shared agent coefficient set".into()));
            }
            let grid = LabelGrid::new(g.labels)?;
            let geq = solve_graphon_from(&g.graphon, &grid, &cfg.tgrid, &cfg.agents, &SolveOptions { tol: cfg.tol, ..Default::default() }, None)?;
            Some(indifference_capital_graphon(&geq, &g.graphon, &grid, &cfg.tgrid, &cfg.agents)?)
        }
        None => None,
    };
    let (bisection, agreement) = match (&cfg.bisection, verify) {
        (Some(b), true) => {
            if b.agent == 0 || b.agent > n {
                return Err(Error::Parameter(format!("bisection agent {} outside 1..={n}", b.agent)));
            }
            let r = indifference_bisection(b.agent - 1, &eq, &coeffs, &weights, &cfg.tgrid, b.mc_paths, seed, b.tol)?;
            let closed = finite.p[b.agent - 1];
            let se = r.diagnostics.std_error.unwrap_or(0.0);
            let ok = (r.p[0] - closed).abs() <= (0.02 * closed.abs()).max(3.0 * se);
            (Some(r), Some(ok))
        }
        (None, true) => return Err(Error::Parameter("--verify needs a `bisection` section".into())),
        _ => (None, None),
    };
    let ok = agreement.unwrap_or(true);
    Ok((IndifferenceOutput { finite, graphon, bisection, agreement }, ok))
}

pub fn indifference_csv(out: &IndifferenceOutput) -> String {
    let mut s = String::from("kind,index,p,y_base_0\n");
    let mut rows = |kind: &str, r: &IndifferenceResult| {
        for (i, (p, y)) in r.p.iter().zip(&r.y_base_0).enumerate() {
            let _ = writeln!(s, "{kind},{},{:e},{:e}", i + 1, p, y);
        }
    };
    rows("finite", &out.finite);
    if let Some(g) = &out.graphon {
        rows("graphon", g);
    }
    if let Some(b) = &out.bisection {
        rows("bisection", b);
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub graphon: Graphon,
    pub n: usize,
    pub beta_n: f64,
    #[serde(default)]
    pub seed: u64,
}

pub fn sample_graph(cfg: &SampleConfig, seed: u64) -> Result<InteractionGraph> {
    sample_interaction_graph(&project_step(&cfg.graphon, cfg.n)?, cfg.n, cfg.beta_n, seed)
}

pub fn graph_csv(g: &InteractionGraph) -> String {
    let mut s = String::from("i,j\n");
    for [i, j] in g.edges() {
        let _ = writeln!(s, "{i},{j}");
    }
    s
}

fn default_blocks() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutConfig {
    pub a: Graphon,
    pub b: Graphon,
    /// block count used for analytic kernels
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// fall back to the heuristic above the exact limit instead of failing
    #[serde(default)]
    pub allow_heuristic: bool,
    #[serde(default)]
    pub seed: u64,
}

fn as_step(g: &Graphon, blocks: usize) -> Result<StepGraphon> {
    match g {
        Graphon::Step(s) => {
            g.validate()?;
            Ok(s.clone())
        }
        Graphon::Analytic(_) => project_step(g, blocks),
    }
}

pub fn cut(cfg: &CutConfig) -> Result<CutNorm> {
    let a = as_step(&cfg.a, cfg.blocks)?;
    let b = as_step(&cfg.b, cfg.blocks)?;
    if cfg.allow_heuristic {
        Ok(cut_norm_or_heuristic(&a, &b))
    } else {
        cut_norm(&a, &b)
    }
}
