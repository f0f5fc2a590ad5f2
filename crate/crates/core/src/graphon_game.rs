//! Graphon equilibrium on a midpoint label grid: the deterministic fixed
//! point, value functions and the Picard schemes for the graphon BSDE and the
//! small-time forward-backward system.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_bsde_lsmc, BsdeProblem, ForwardPaths, LsmcParams, Terminal, UtilityDriver};
use crate::error::{param, Error, Result};
use crate::fixed_point_finite::{pi_dot_sigma_theta, SolveOptions};
use crate::graphon::Graphon;
use crate::market::{utility, AgentCoeffs, StepData, TimeGrid};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelGrid {
    pub m: usize,
}

impl LabelGrid {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return param("label grid needs at least one label");
        }
        Ok(LabelGrid { m })
    }

    /// u_m = (m − 1/2)/M
    pub fn label(&self, m: usize) -> f64 {
        (m as f64 + 0.5) / self.m as f64
    }

    pub fn labels(&self) -> Vec<f64> {
        (0..self.m).map(|m| self.label(m)).collect()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.m as f64
    }

    /// Index of the label midpoint nearest to u (ties to the lower label).
    pub fn nearest(&self, u: f64) -> usize {
        let x = u * self.m as f64 - 0.5;
        let lo = x.floor().clamp(0.0, (self.m - 1) as f64) as usize;
        if lo + 1 < self.m && (self.label(lo + 1) - u).abs() < (self.label(lo) - u).abs() {
            lo + 1
        } else {
            lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphonEquilibrium {
    pub labels: Vec<f64>,
    /// [label][step][component]
    pub pi: Vec<Vec<Vec<f64>>>,
    /// [label][step]
    pub z_star: Vec<Vec<f64>>,
    pub y0: Vec<f64>,
    pub value0: Vec<f64>,
    pub residual: f64,
    pub iterations: Vec<usize>,
}

/// Coefficients per label: one shared set or one per label.
fn label_coeffs<'a>(coeffs: &'a [AgentCoeffs], grid: &LabelGrid) -> Result<Vec<&'a AgentCoeffs>> {
    match coeffs.len() {
        1 => Ok(vec![&coeffs[0]; grid.m]),
        m if m == grid.m => Ok(coeffs.iter().collect()),
        m => param(format!("{m} coefficient sets for {} labels", grid.m)),
    }
}

/// K[a][b] = G(u_a, u_b)/M
fn kernel(g: &Graphon, grid: &LabelGrid) -> Result<Vec<Vec<f64>>> {
    g.validate()?;
    let labels = grid.labels();
    Ok(labels.iter().map(|&u| labels.iter().map(|&v| g.eval_unchecked(u, v) * grid.weight()).collect()).collect())
}

fn tables(coeffs: &[&AgentCoeffs], tgrid: &TimeGrid) -> Result<Vec<Vec<StepData>>> {
    let d = coeffs[0].dim();
    if coeffs.iter().any(|c| c.dim() != d) {
        return param("all labels must trade the same number of assets");
    }
    coeffs.iter().map(|c| c.steps(tgrid)).collect()
}

fn z_star_of(k: &[Vec<f64>], data: &[&StepData], profile: &[DVector<f64>]) -> Vec<f64> {
    k.iter()
        .map(|row| row.iter().enumerate().filter(|(_, &w)| w != 0.0).map(|(m, w)| w * data[m].sigma_star.dot(&profile[m])).sum())
        .collect()
}

fn profile_map(k: &[Vec<f64>], data: &[&StepData], profile: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<f64>) {
    let z = z_star_of(k, data, profile);
    let next = data.iter().zip(&z).map(|(sd, &zs)| sd.respond(&sd.theta.scale(sd.eta), zs).pi).collect();
    (next, z)
}

/// Label-profile Picard iteration per time step, optionally from a given start.
pub fn solve_graphon_from(
    g: &Graphon,
    grid: &LabelGrid,
    tgrid: &TimeGrid,
    coeffs: &[AgentCoeffs],
    opts: &SolveOptions,
    init: Option<&[Vec<f64>]>,
) -> Result<GraphonEquilibrium> {
    let lc = label_coeffs(coeffs, grid)?;
    let table = tables(&lc, tgrid)?;
    let kmat = kernel(g, grid)?;
    let d = lc[0].dim();
    if let Some(init) = init {
        if init.len() != grid.m || init.iter().any(|p| p.len() != d) {
            return param("initial profile must have one d-vector per label");
        }
    }
    let per_step: Vec<(Vec<DVector<f64>>, Vec<f64>, f64, usize)> = (0..tgrid.steps)
        .into_par_iter()
        .map(|t| {
            let data: Vec<&StepData> = table.iter().map(|a| &a[t]).collect();
            let mut profile: Vec<DVector<f64>> = match init {
                Some(p) => p.iter().map(|v| DVector::from_column_slice(v)).collect(),
                None => vec![DVector::zeros(d); grid.m],
            };
            let mut damping = 1.0;
            let mut last = f64::INFINITY;
            for it in 1..=opts.max_iter {
                let (next, _) = profile_map(&kmat, &data, &profile);
                let diff = profile.iter().zip(&next).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
                if diff > last && damping == 1.0 {
                    damping = 0.5;
                }
                profile = profile.iter().zip(next).map(|(a, b)| a.scale(1.0 - damping) + b.scale(damping)).collect();
                last = diff;
                if diff <= opts.tol {
                    let z = z_star_of(&kmat, &data, &profile);
                    return Ok((profile, z, diff, it));
                }
            }
            Err(Error::Convergence { what: "graphon equilibrium profile".into(), iterations: opts.max_iter, residual: last })
        })
        .collect::<Result<_>>()?;
    let mut eq = GraphonEquilibrium {
        labels: grid.labels(),
        pi: (0..grid.m).map(|m| per_step.iter().map(|s| s.0[m].as_slice().to_vec()).collect()).collect(),
        z_star: (0..grid.m).map(|m| per_step.iter().map(|s| s.1[m]).collect()).collect(),
        y0: vec![],
        value0: vec![],
        residual: per_step.iter().map(|s| s.2).fold(0.0, f64::max),
        iterations: per_step.iter().map(|s| s.3).collect(),
    };
    let (y0, v0) = graphon_value(&eq, g, grid, tgrid, coeffs)?;
    eq.y0 = y0;
    eq.value0 = v0;
    Ok(eq)
}

/// Graphon equilibrium for deterministic coefficients.
pub fn solve_graphon_equilibrium_det(g: &Graphon, grid: &LabelGrid, tgrid: &TimeGrid, coeffs: &[AgentCoeffs], tol: f64) -> Result<GraphonEquilibrium> {
    solve_graphon_from(g, grid, tgrid, coeffs, &SolveOptions { tol, ..Default::default() }, None)
}

/// Y^u_0 = ∫ (∫π^v·σ^vθ^v G(u,v)dv − (η/2)|θ|² + (1/2η)(dist² + R)) dt and
/// V^{u,G}_0 = −exp(−(ξ^u − ∫E[ξ^v]G(u,v)dv − Y^u_0)/η).
pub fn graphon_value(eq: &GraphonEquilibrium, g: &Graphon, grid: &LabelGrid, tgrid: &TimeGrid, coeffs: &[AgentCoeffs]) -> Result<(Vec<f64>, Vec<f64>)> {
    let lc = label_coeffs(coeffs, grid)?;
    let table = tables(&lc, tgrid)?;
    let kmat = kernel(g, grid)?;
    if eq.pi.len() != grid.m || eq.pi.iter().any(|p| p.len() != tgrid.steps) {
        return param("equilibrium does not match the label and time grids");
    }
    let dt = tgrid.dt();
    let mut y0 = vec![0.0; grid.m];
    let mut v0 = vec![0.0; grid.m];
    for u in 0..grid.m {
        for t in 0..tgrid.steps {
            let e: f64 = (0..grid.m).filter(|&m| kmat[u][m] != 0.0).map(|m| kmat[u][m] * pi_dot_sigma_theta(&table[m][t], &eq.pi[m][t])).sum();
            let sd = &table[u][t];
            let r = sd.respond(&sd.theta.scale(sd.eta), eq.z_star[u][t]);
            y0[u] += dt * (e - 0.5 * sd.eta * sd.theta.norm_squared() + (r.dist_sq + r.residual) / (2.0 * sd.eta));
        }
        let bench: f64 = (0..grid.m).map(|m| kmat[u][m] * lc[m].xi.mean()).sum();
        v0[u] = utility(lc[u].xi.fixed()?, bench + y0[u], lc[u].eta).value;
    }
    Ok((y0, v0))
}

/// ∫E[ξ^v]G(u_a, v)dv per label.
pub fn benchmark_mean(g: &Graphon, grid: &LabelGrid, coeffs: &[AgentCoeffs]) -> Result<Vec<f64>> {
    let lc = label_coeffs(coeffs, grid)?;
    let kmat = kernel(g, grid)?;
    Ok(kmat.iter().map(|row| row.iter().zip(&lc).map(|(w, c)| w * c.xi.mean()).sum()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphonBsdeResult {
    pub y0: Vec<f64>,
    pub y0_se: Vec<f64>,
    /// max over labels of |Y^u_0| change between successive outer iterations
    pub gaps: Vec<f64>,
    /// final mean-field term [label][step]
    pub mean_field: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphonBsdeParams {
    /// θ^u_t = θ̄ + κ W^u_t
    pub kappa: f64,
    pub paths: usize,
    pub picard_iters: usize,
    pub lsmc: LsmcParams,
    pub seed: u64,
}

/// Outer Picard iteration on the mean-field term ∫E[π^v·σ^vθ^v]G(u,v)dv with
/// per-label regression Monte Carlo solves; no common noise.
pub fn picard_graphon_bsde(g: &Graphon, grid: &LabelGrid, tgrid: &TimeGrid, coeffs: &[AgentCoeffs], params: &GraphonBsdeParams) -> Result<GraphonBsdeResult> {
    let lc = label_coeffs(coeffs, grid)?;
    let table = tables(&lc, tgrid)?;
    if table.iter().flatten().any(|s| s.sigma_star.amax() != 0.0) {
        return Err(Error::Capability("the graphon BSDE scheme supports sigma_star = 0 only".into()));
    }
    let kmat = kernel(g, grid)?;
    let d = lc[0].dim();
    let forwards: Vec<ForwardPaths> = (0..grid.m)
        .map(|m| ForwardPaths::brownian(tgrid, d, params.paths, rng::derive(params.seed, &[m as u64])))
        .collect();
    let mut mean_field = vec![vec![0.0; tgrid.steps]; grid.m];
    let mut prev: Option<Vec<f64>> = None;
    let mut gaps = Vec::new();
    let mut warnings = Vec::new();
    let mut growth = 0;
    let mut y0 = vec![0.0; grid.m];
    let mut y0_se = vec![0.0; grid.m];
    for it in 0..params.picard_iters.max(1) {
        // E[π^v_t·σ^vθ^v_t] per label and step under the current iterate
        let mut drift_means = vec![vec![0.0; tgrid.steps]; grid.m];
        for m in 0..grid.m {
            let driver = UtilityDriver::new(lc[m], tgrid, params.kappa, Some(mean_field[m].clone()))?;
            let prob = BsdeProblem { grid: *tgrid, driver, terminal: Terminal::Constant(0.0), z_dim: d, z_star_dim: 0 };
            let res = solve_bsde_lsmc(&prob, &forwards[m], &params.lsmc)?;
            y0[m] = res.y0;
            y0_se[m] = res.y0_se;
            warnings.extend(res.warnings.iter().map(|w| format!("label {m}: {w}")));
            for k in 0..tgrid.steps {
                let sd = prob.driver.step_data(k);
                let sum: f64 = (0..params.paths)
                    .into_par_iter()
                    .with_min_len(1024)
                    .map(|p| {
                        let x = forwards[m].state(p, k);
                        let theta = prob.driver.theta(k, x);
                        let z = DVector::from_column_slice(&res.z[k][p * d..(p + 1) * d]);
                        let pi = sd.respond(&(z + theta.scale(sd.eta)), 0.0).pi;
                        (0..d).map(|l| pi[l] * sd.sigma[l] * theta[l]).sum::<f64>()
                    })
                    .collect::<Vec<f64>>()
                    .chunks(4096)
                    .map(|c| c.iter().sum::<f64>())
                    .sum();
                drift_means[m][k] = sum / params.paths as f64;
            }
        }
        for u in 0..grid.m {
            for k in 0..tgrid.steps {
                mean_field[u][k] = (0..grid.m).map(|m| kmat[u][m] * drift_means[m][k]).sum();
            }
        }
        if let Some(p) = &prev {
            let gap = y0.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if let Some(&last) = gaps.last() {
                growth = if gap > last && gap > 1e-12 { growth + 1 } else { 0 };
            }
            gaps.push(gap);
            if growth >= 3 {
                return Err(Error::Divergence { what: "graphon BSDE Picard iteration".into(), iteration: it });
            }
        }
        prev = Some(y0.clone());
    }
    Ok(GraphonBsdeResult { y0, y0_se, gaps, mean_field, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallTimeResult {
    /// ratio of successive sup-norm gaps
    pub factors: Vec<f64>,
    pub gaps: Vec<f64>,
    /// map applications until the iterate stopped moving
    pub iterations: usize,
    /// [label][step][component]
    pub pi: Vec<Vec<Vec<f64>>>,
}

/// The fixed-point map of the small-time argument in its deterministic
/// reduction: freeze the whole forward profile on [0,T], read off the common
/// noise integrand of the graphon-averaged terminal wealth, recompute the
/// controls from the backward equation, and repeat.
pub fn picard_graphon_fbsde_small_time(g: &Graphon, grid: &LabelGrid, tgrid: &TimeGrid, coeffs: &[AgentCoeffs], iters: usize, tol: f64) -> Result<SmallTimeResult> {
    let lc = label_coeffs(coeffs, grid)?;
    let table = tables(&lc, tgrid)?;
    let kmat = kernel(g, grid)?;
    let d = lc[0].dim();
    let mut profile: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(d); grid.m]; tgrid.steps];
    let mut gaps: Vec<f64> = Vec::new();
    let mut factors = Vec::new();
    let mut iterations = iters;
    for it in 1..=iters.max(1) {
        let next: Vec<Vec<DVector<f64>>> = (0..tgrid.steps)
            .map(|t| {
                let data: Vec<&StepData> = table.iter().map(|a| &a[t]).collect();
                profile_map(&kmat, &data, &profile[t]).0
            })
            .collect();
        let gap = profile.iter().flatten().zip(next.iter().flatten()).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        profile = next;
        if let Some(&last) = gaps.last() {
            if last > 0.0 && gap > 1e-14 {
                let f = gap / last;
                factors.push(f);
                if f >= 1.0 {
                    return Err(Error::HorizonTooLarge { horizon: tgrid.horizon, factor: f });
                }
            }
        }
        gaps.push(gap);
        if gap <= tol {
            iterations = it - 1;
            break;
        }
    }
    let pi = (0..grid.m).map(|m| profile.iter().map(|s| s[m].as_slice().to_vec()).collect()).collect();
    Ok(SmallTimeResult { factors, gaps, iterations, pi })
}
