//! Propagation-of-chaos experiments: matched finite and graphon games on
//! sampled graphs, the error functionals between them and fitted decay rates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::fixed_point_finite::{solve_equilibrium_weights, FiniteEquilibrium, SolveOptions};
use crate::graphon::{cut_norm_or_heuristic, normalized_weights, project_step, sample_interaction_graph, Graphon, Weights};
use crate::graphon_game::{solve_graphon_from, GraphonEquilibrium, LabelGrid};
use crate::indifference::{indifference_capital_finite, indifference_capital_graphon};
use crate::market::{AgentCoeffs, TimeGrid};
use crate::rng;

pub const METRICS: [&str; 6] = ["strategy_error", "value_error", "gamma_error", "gamma_star_error", "xi_error", "indifference_gap"];
const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaRule {
    Constant { beta: f64 },
    /// β_n = n^{−γ}
    Power { gamma: f64 },
}

impl BetaRule {
    pub fn beta(&self, n: usize) -> f64 {
        match *self {
            BetaRule::Constant { beta } => beta,
            BetaRule::Power { gamma } => (n as f64).powf(-gamma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BetaRule::Constant { beta } if !(beta > 0.0 && beta <= 1.0) => param(format!("beta = {beta} outside (0,1]")),
            BetaRule::Power { gamma } if !(gamma >= 0.0 && gamma < 0.5) => param(format!("power gamma = {gamma} outside [0, 1/2)")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiLaw {
    pub mean: f64,
    pub sd: f64,
}

fn default_labels() -> usize {
    256
}
fn default_refinement() -> usize {
    8
}
fn default_retries() -> usize {
    100
}
fn default_xi_draws() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosConfig {
    pub graphon: Graphon,
    pub n_schedule: Vec<usize>,
    pub beta_rule: BetaRule,
    pub reps: usize,
    pub seed: u64,
    /// shared by every agent and label
    pub coeffs: AgentCoeffs,
    pub tgrid: TimeGrid,
    #[serde(default = "default_labels")]
    pub labels: usize,
    /// G is projected to refinement·n blocks as its surrogate in the cut norm
    #[serde(default = "default_refinement")]
    pub refinement: usize,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// law of the initial wealths in the ξ functional; defaults to N(E[ξ], 1)
    #[serde(default)]
    pub xi_law: Option<XiLaw>,
    #[serde(default = "default_xi_draws")]
    pub xi_draws: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl ChaosConfig {
    pub fn validate(&self) -> Result<()> {
        self.graphon.validate()?;
        self.beta_rule.validate()?;
        self.coeffs.validate(&self.tgrid)?;
        if self.n_schedule.is_empty() {
            return param("empty n schedule");
        }
        if self.n_schedule.iter().any(|&n| n < 3) {
            return param("every n in the schedule must be at least 3");
        }
        if self.n_schedule.windows(2).any(|w| w[0] >= w[1]) {
            return param("n schedule must be strictly increasing");
        }
        if self.reps == 0 {
            return param("reps must be at least 1");
        }
        if self.labels == 0 || self.refinement == 0 || self.xi_draws == 0 {
            return param("labels, refinement and xi_draws must be positive");
        }
        if let Some(l) = self.xi_law {
            if !(l.sd >= 0.0 && l.sd.is_finite() && l.mean.is_finite()) {
                return param("xi_law needs a finite mean and sd >= 0");
            }
        }
        Ok(())
    }

    fn xi_law(&self) -> XiLaw {
        self.xi_law.unwrap_or(XiLaw { mean: self.coeffs.xi.mean(), sd: 1.0 })
    }
}

/// Nearest label of agent i (0-based) at position (i+1)/n.
fn agent_label(grid: &LabelGrid, i: usize, n: usize) -> usize {
    grid.nearest((i + 1) as f64 / n as f64)
}

fn check_grids(fin: &FiniteEquilibrium, gr: &GraphonEquilibrium, tgrid: &TimeGrid) -> Result<()> {
    let steps_ok = fin.pi.iter().chain(&gr.pi).all(|p| p.len() == tgrid.steps);
    if !steps_ok || fin.d != gr.pi.first().and_then(|p| p.first()).map_or(0, |v| v.len()) {
        return param("finite and graphon solutions live on different grids");
    }
    Ok(())
}

/// (mean_i ∫‖π^{i,n} − π^{i/n}‖² dt, mean_i |V^{i,n}_0 − V^{i/n}_0|)
pub fn strategy_and_value_error(fin: &FiniteEquilibrium, gr: &GraphonEquilibrium, tgrid: &TimeGrid) -> Result<(f64, f64)> {
    check_grids(fin, gr, tgrid)?;
    let grid = LabelGrid::new(gr.labels.len())?;
    let dt = tgrid.dt();
    let mut se = 0.0;
    let mut ve = 0.0;
    for i in 0..fin.n {
        let m = agent_label(&grid, i, fin.n);
        for k in 0..tgrid.steps {
            se += dt * fin.pi[i][k].iter().zip(&gr.pi[m][k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        ve += (fin.value0[i] - gr.value0[m]).abs();
    }
    Ok((se / fin.n as f64, ve / fin.n as f64))
}

/// Time-integrated squared Γ^{i,n} and Γ^{*i,n}, averaged over agents, with
/// graphon controls evaluated at the agents' labels.
pub fn gamma_error(gr: &GraphonEquilibrium, g: &Graphon, coeffs: &AgentCoeffs, weights: &Weights, tgrid: &TimeGrid) -> Result<(f64, f64)> {
    g.validate()?;
    let n = weights.n();
    let grid = LabelGrid::new(gr.labels.len())?;
    let steps = coeffs.steps(tgrid)?;
    let dt = tgrid.dt();
    let labels = grid.labels();
    let mut ge = 0.0;
    let mut gs = 0.0;
    for (k, sd) in steps.iter().enumerate() {
        // h^v·θ and h^v·σ* at every label
        let drift: Vec<f64> = (0..grid.m).map(|m| gr.pi[m][k].iter().enumerate().map(|(l, p)| p * sd.sigma[l] * sd.theta[l]).sum()).collect();
        let vol: Vec<f64> = (0..grid.m).map(|m| gr.pi[m][k].iter().enumerate().map(|(l, p)| p * sd.sigma_star[l]).sum()).collect();
        for i in 0..n {
            let u = (i + 1) as f64 / n as f64;
            let (mut a, mut b) = (0.0, 0.0);
            for (j, &w) in weights.row(i).iter().enumerate() {
                if w != 0.0 {
                    let m = agent_label(&grid, j, n);
                    a += w * drift[m];
                    b += w * vol[m];
                }
            }
            for (m, &v) in labels.iter().enumerate() {
                let gw = g.eval_unchecked(u, v) * grid.weight();
                a -= gw * drift[m];
                b -= gw * vol[m];
            }
            ge += dt * a * a;
            gs += dt * b * b;
        }
    }
    Ok((ge / n as f64, gs / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// E[(Σ_j λ_ij ξ^j − ∫E[ξ^v]G(i/n,v)dv)²] averaged over agents, ξ^j i.i.d. from `law`.
pub fn xi_error(weights: &Weights, g: &Graphon, law: XiLaw, draws: usize, seed: u64) -> Result<XiEstimate> {
    g.validate()?;
    if draws == 0 {
        return param("xi_error needs at least one draw");
    }
    let n = weights.n();
    let degree: Vec<f64> = (0..n).map(|i| g.degree((i + 1) as f64 / n as f64, 1024)).collect();
    let per_draw: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut z = vec![0.0; n];
            rng::normals(seed, &[rng::TAG_XI, d as u64], &mut z);
            let xi: Vec<f64> = z.iter().map(|z| law.mean + law.sd * z).collect();
            (0..n)
                .map(|i| {
                    let s: f64 = weights.row(i).iter().zip(&xi).map(|(w, x)| w * x).sum();
                    (s - law.mean * degree[i]).powi(2)
                })
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let m = draws as f64;
    let value = per_draw.iter().sum::<f64>() / m;
    let std_error = if draws > 1 { (per_draw.iter().map(|x| (x - value).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt() } else { f64::NAN };
    Ok(XiEstimate { value, std_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub n: usize,
    pub rep: usize,
    pub rejections: usize,
    /// in METRICS order; absent when the cell failed
    pub metrics: Option<[f64; 6]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerN {
    pub n: usize,
    pub beta_n: f64,
    pub strategy_error: f64,
    pub value_error: f64,
    pub gamma_error: f64,
    pub gamma_star_error: f64,
    pub xi_error: f64,
    pub indifference_gap: f64,
    pub cut_norm: f64,
    pub cut_norm_exact: bool,
    pub bound_value: f64,
    pub dominated: bool,
    pub rejections: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slopes {
    pub strategy_error: Option<f64>,
    pub value_error: Option<f64>,
    pub gamma_error: Option<f64>,
    pub gamma_star_error: Option<f64>,
    pub xi_error: Option<f64>,
    pub indifference_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosReport {
    pub per_n: Vec<PerN>,
    pub slopes: Slopes,
    /// Spearman correlation of (log n, log strategy_error)
    pub spearman_strategy: Option<f64>,
    pub bound_constant: f64,
    pub labels: usize,
    pub refinement: usize,
    pub graphon_residual: f64,
    pub cells: Vec<CellRecord>,
}

impl ChaosReport {
    /// Flat rows (n, rep, metric, value); failed cells report NaN.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,rep,metric,value\n");
        for c in &self.cells {
            for (k, name) in METRICS.iter().enumerate() {
                let v = c.metrics.map_or(f64::NAN, |m| m[k]);
                out.push_str(&format!("{},{},{},{:e}\n", c.n, c.rep, name, v));
            }
        }
        out
    }

    /// Whitespace-separated per-n means for plotting.
    pub fn to_dat(&self) -> String {
        let mut out = String::from("# n beta_n");
        for m in METRICS {
            out.push(' ');
            out.push_str(m);
        }
        out.push_str(" bound\n");
        for p in &self.per_n {
            out.push_str(&format!(
                "{} {:e} {:e} {:e} {:e} {:e} {:e} {:e} {:e}\n",
                p.n, p.beta_n, p.strategy_error, p.value_error, p.gamma_error, p.gamma_star_error, p.xi_error, p.indifference_gap, p.bound_value
            ));
        }
        out
    }
}

/// Least-squares slope of log y against log x over positive finite values.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || y.iter().chain(x).any(|v| !(v.is_finite() && *v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let s = sxy / sxx;
    s.is_finite().then_some(s)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; None for constant inputs.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let m = rx.len() as f64;
    let mean = (m + 1.0) / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mean).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - mean).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    r.is_finite().then_some(r)
}

struct CellOutcome {
    rejections: usize,
    result: Result<[f64; 6]>,
}

fn run_cell(cfg: &ChaosConfig, gr: &GraphonEquilibrium, p_graphon: &[f64], n: usize, rep: usize) -> CellOutcome {
    let beta = cfg.beta_rule.beta(n);
    let cell_seed = rng::derive(cfg.seed, &[rng::TAG_CELL, n as u64, rep as u64]);
    let gn = match project_step(&cfg.graphon, n) {
        Ok(g) => g,
        Err(e) => return CellOutcome { rejections: 0, result: Err(e) },
    };
    let mut rejections = 0;
    let weights = loop {
        let graph = match sample_interaction_graph(&gn, n, beta, rng::derive(cell_seed, &[rejections as u64])) {
            Ok(g) => g,
            Err(e) => return CellOutcome { rejections, result: Err(e) },
        };
        match normalized_weights(&graph) {
            Ok(w) => break w,
            Err(Error::RowSum { .. }) if rejections < cfg.max_retries => rejections += 1,
            Err(e) => return CellOutcome { rejections, result: Err(e) },
        }
    };
    let result = (|| {
        let coeffs = vec![cfg.coeffs.clone(); n];
        let fin = solve_equilibrium_weights(&weights, &coeffs, &cfg.tgrid, &SolveOptions { tol: cfg.tol, ..Default::default() })?;
        let (se, ve) = strategy_and_value_error(&fin, gr, &cfg.tgrid)?;
        let (ge, gs) = gamma_error(gr, &cfg.graphon, &cfg.coeffs, &weights, &cfg.tgrid)?;
        let xi = xi_error(&weights, &cfg.graphon, cfg.xi_law(), cfg.xi_draws, rng::derive(cell_seed, &[rng::TAG_XI]))?;
        let p = indifference_capital_finite(&fin, &coeffs, &weights, &cfg.tgrid)?;
        let grid = LabelGrid::new(gr.labels.len())?;
        let gap = (0..n).map(|i| (p.p[i] - p_graphon[agent_label(&grid, i, n)]).abs()).sum::<f64>() / n as f64;
        Ok([se, ve, ge, gs, xi.value, gap])
    })();
    CellOutcome { rejections, result }
}

pub fn run_experiment(cfg: &ChaosConfig) -> Result<ChaosReport> {
    cfg.validate()?;
    let grid = LabelGrid::new(cfg.labels)?;
    let template = std::slice::from_ref(&cfg.coeffs);
    let gr = solve_graphon_from(&cfg.graphon, &grid, &cfg.tgrid, template, &SolveOptions { tol: cfg.tol, ..Default::default() }, None)?;
    let p_graphon = indifference_capital_graphon(&gr, &cfg.graphon, &grid, &cfg.tgrid, template)?.p;

    let jobs: Vec<(usize, usize)> = cfg.n_schedule.iter().flat_map(|&n| (0..cfg.reps).map(move |r| (n, r))).collect();
    let outcomes: Vec<CellOutcome> = jobs.par_iter().map(|&(n, r)| run_cell(cfg, &gr, &p_graphon, n, r)).collect();
    let cells: Vec<CellRecord> = jobs
        .iter()
        .zip(outcomes)
        .map(|(&(n, rep), o)| CellRecord {
            n,
            rep,
            rejections: o.rejections,
            metrics: o.result.as_ref().ok().copied(),
            error: o.result.err().map(|e| e.to_string()),
        })
        .collect();
    let failed = cells.iter().filter(|c| c.metrics.is_none()).count();
    if failed as f64 > MAX_FAILURE_SHARE * cells.len() as f64 {
        return Err(Error::Experiment(format!("{failed} of {} cells failed", cells.len())));
    }

    let mut per_n = Vec::with_capacity(cfg.n_schedule.len());
    for &n in &cfg.n_schedule {
        let mine: Vec<&CellRecord> = cells.iter().filter(|c| c.n == n).collect();
        let ok: Vec<[f64; 6]> = mine.iter().filter_map(|c| c.metrics).collect();
        if ok.is_empty() {
            return Err(Error::Experiment(format!("every replication failed at n = {n}")));
        }
        let mean = |k: usize| ok.iter().map(|m| m[k]).sum::<f64>() / ok.len() as f64;
        let gn = project_step(&cfg.graphon, n)?;
        let fine = project_step(&cfg.graphon, cfg.refinement * n)?;
        let cut = cut_norm_or_heuristic(&gn, &fine);
        per_n.push(PerN {
            n,
            beta_n: cfg.beta_rule.beta(n),
            strategy_error: mean(0),
            value_error: mean(1),
            gamma_error: mean(2),
            gamma_star_error: mean(3),
            xi_error: mean(4),
            indifference_gap: mean(5),
            cut_norm: cut.value,
            cut_norm_exact: cut.exact,
            bound_value: 0.0,
            dominated: false,
            rejections: mine.iter().map(|c| c.rejections).sum(),
            failures: mine.len() - ok.len(),
        });
    }
    let rate = |p: &PerN| 1.0 / (p.n as f64 * p.beta_n) + 1.0 / p.n as f64 + (p.n as f64 * p.cut_norm).powi(2);
    let bound_constant = per_n[0].gamma_error / rate(&per_n[0]);
    for p in per_n.iter_mut() {
        p.bound_value = bound_constant * rate(p);
        p.dominated = p.gamma_error <= p.bound_value;
    }
    let ns: Vec<f64> = per_n.iter().map(|p| p.n as f64).collect();
    let series = |f: fn(&PerN) -> f64| -> Vec<f64> { per_n.iter().map(f).collect() };
    let strat = series(|p| p.strategy_error);
    let slopes = Slopes {
        strategy_error: log_log_slope(&ns, &strat),
        value_error: log_log_slope(&ns, &series(|p| p.value_error)),
        gamma_error: log_log_slope(&ns, &series(|p| p.gamma_error)),
        gamma_star_error: log_log_slope(&ns, &series(|p| p.gamma_star_error)),
        xi_error: log_log_slope(&ns, &series(|p| p.xi_error)),
        indifference_gap: log_log_slope(&ns, &series(|p| p.indifference_gap)),
    };
    let spearman_strategy = if strat.iter().all(|&s| s > 0.0) {
        spearman(&ns.iter().map(|n| n.ln()).collect::<Vec<_>>(), &strat.iter().map(|s| s.ln()).collect::<Vec<_>>())
    } else {
        None
    };
    Ok(ChaosReport { per_n, slopes, spearman_strategy, bound_constant, labels: cfg.labels, refinement: cfg.refinement, graphon_residual: gr.residual, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphon::{normalized_weights, InteractionGraph};
    use crate::graphon_game::solve_graphon_equilibrium_det;
    use crate::market::ConvexSet;

    fn template(sigma_star: f64) -> AgentCoeffs {
        AgentCoeffs::scalar(1.0, sigma_star, 0.2, 0.5, 1.0, ConvexSet::FullSpace)
    }

    #[test]
    fn complete_graph_matches_constant_one() {
        let tg = TimeGrid::new(1.0, 2).unwrap();
        let n = 6;
        let w = normalized_weights(&InteractionGraph::complete(n)).unwrap();
        let fin = solve_equilibrium_weights(&w, &vec![template(1.0); n], &tg, &SolveOptions::default()).unwrap();
        let gr = solve_graphon_equilibrium_det(&Graphon::constant(1.0), &LabelGrid::new(8).unwrap(), &tg, &[template(1.0)], 1e-13).unwrap();
        let (se, _) = strategy_and_value_error(&fin, &gr, &tg).unwrap();
        assert!(se < 1e-20);
        let (ge, gs) = gamma_error(&gr, &Graphon::constant(1.0), &template(1.0), &w, &tg).unwrap();
        assert!(ge < 1e-28 && gs < 1e-28);
        let x = xi_error(&w, &Graphon::constant(1.0), XiLaw { mean: 2.0, sd: 0.0 }, 3, 1).unwrap();
        assert!(x.value < 1e-28);
    }

    #[test]
    fn rank_statistics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
        let s = log_log_slope(&[1.0, 2.0, 4.0], &[1.0, 0.5, 0.25]).unwrap();
        assert!((s + 1.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&[1.0, 2.0], &[0.0, 1.0]), None);
    }

    #[test]
    fn beta_rules() {
        assert_eq!(BetaRule::Power { gamma: 0.25 }.beta(16), 0.5);
        assert!(BetaRule::Power { gamma: 0.5 }.validate().is_err());
        assert!(BetaRule::Constant { beta: 0.0 }.validate().is_err());
    }
}
