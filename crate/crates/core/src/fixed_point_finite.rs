//! n-agent equilibrium: the decoupling maps H_α, φ, ψ, the deterministic
//! equilibrium fixed point, value functions and a Monte Carlo best-response
//! oracle.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::graphon::{normalized_weights, InteractionGraph, Weights};
use crate::market::{utility, AgentCoeffs, PathNoise, ScaledSet, StepData, TimeGrid};
use crate::optim;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HSolve {
    pub x: f64,
    pub iterations: usize,
}

/// Solve x + w·σ̃*·P(α + σ̃*x) = y by iterating x ← y − w·σ̃*·P(α + σ̃*x).
fn h_inverse(alpha: &DVector<f64>, sst: &DVector<f64>, w: f64, y: f64, set: &ScaledSet, tol: f64) -> Result<HSolve> {
    let g = |x: f64| sst.dot(&set.project(&(alpha + sst.scale(x))));
    let mut x = y;
    for it in 1..=MAX_ITER {
        let next = y - w * g(x);
        // |x − M(x)| is exactly the residual |H(x) − y| at the previous iterate
        let resid = (next - x).abs();
        x = next;
        if resid <= tol {
            return Ok(HSolve { x, iterations: it });
        }
    }
    let resid = (x + w * g(x) - y).abs();
    Err(Error::Convergence { what: "H_alpha inverse".into(), iterations: MAX_ITER, residual: resid })
}

/// Invert H_α(x) = x + (1/(n−1))·σ̃*·P(α + σ̃*x).
pub fn h_alpha_solve(alpha: &DVector<f64>, sigma_star_tilde: &DVector<f64>, n: usize, y: f64, set: &ScaledSet, tol: f64) -> Result<HSolve> {
    if n < 2 {
        return param("H_alpha needs n >= 2");
    }
    if sigma_star_tilde.norm() >= 1.0 {
        return param("|sigma_star_tilde| must be below 1");
    }
    h_inverse(alpha, sigma_star_tilde, 1.0 / (n as f64 - 1.0), y, set, tol)
}

fn alpha(sd: &StepData, z_diag: &DVector<f64>) -> DVector<f64> {
    &sd.tr.sigma_tilde * (z_diag + sd.theta.scale(sd.eta))
}

/// g_j(x) = σ̃^{j*}·P^j(α^j + σ̃^{j*}x)
fn g_map(sd: &StepData, alpha: &DVector<f64>, x: f64) -> f64 {
    let sst = &sd.tr.sigma_star_tilde;
    sst.dot(&sd.set.project(&(alpha + sst.scale(x))))
}

fn check_inputs(zeta: &[f64], z_diag: &[DVector<f64>], data: &[StepData], weights: &Weights) -> Result<()> {
    let n = weights.n();
    if zeta.len() != n || z_diag.len() != n || data.len() != n {
        return param(format!("phi/psi inputs must all have length n = {n}"));
    }
    Ok(())
}

/// φ^i(ζ*) = ζ^{i*} − Σ_{j≠i} λ_ij σ̃^{j*}·P^j(σ̃^j(Z^{jj}+η_jθ^j) + σ̃^{j*}ζ^{j*}).
pub fn phi_map(zeta_star: &[f64], z_diag: &[DVector<f64>], data: &[StepData], weights: &Weights) -> Result<Vec<f64>> {
    check_inputs(zeta_star, z_diag, data, weights)?;
    let n = weights.n();
    let g: Vec<f64> = (0..n).map(|j| g_map(&data[j], &alpha(&data[j], &z_diag[j]), zeta_star[j])).collect();
    Ok((0..n)
        .map(|i| zeta_star[i] - (0..n).filter(|&j| j != i).map(|j| weights.get(i, j) * g[j]).sum::<f64>())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiSolve {
    pub zeta_star: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// ψ = φ⁻¹ by Jacobi iteration of
/// N^i(ζ) = H⁻¹_{α^i}(Z^{*i} + Σ_{j≠i} λ_ij g_j(ζ^j) + g_i(ζ^i)/(n−1)).
pub fn psi_map(z_star: &[f64], z_diag: &[DVector<f64>], data: &[StepData], weights: &Weights, tol: f64) -> Result<PsiSolve> {
    check_inputs(z_star, z_diag, data, weights)?;
    let n = weights.n();
    if n < 3 {
        return Err(Error::Capability(format!("psi needs n >= 3, got {n}")));
    }
    let w_self = 1.0 / (n as f64 - 1.0);
    let alphas: Vec<DVector<f64>> = (0..n).map(|j| alpha(&data[j], &z_diag[j])).collect();
    let mut zeta = z_star.to_vec();
    let mut residual = f64::INFINITY;
    for it in 1..=MAX_ITER * 10 {
        let g: Vec<f64> = (0..n).map(|j| g_map(&data[j], &alphas[j], zeta[j])).collect();
        residual = (0..n)
            .map(|i| (zeta[i] - (0..n).filter(|&j| j != i).map(|j| weights.get(i, j) * g[j]).sum::<f64>() - z_star[i]).abs())
            .fold(0.0, f64::max);
        if residual <= tol {
            return Ok(PsiSolve { zeta_star: zeta, iterations: it - 1, residual });
        }
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let y = z_star[i] + (0..n).filter(|&j| j != i).map(|j| weights.get(i, j) * g[j]).sum::<f64>() + w_self * g[i];
                h_inverse(&alphas[i], &data[i].tr.sigma_star_tilde, w_self, y, &data[i].set, (tol * 1e-2).max(8.0 * f64::EPSILON * (1.0 + y.abs()))).map(|h| h.x)
            })
            .collect::<Result<_>>()?;
        zeta = next;
    }
    Err(Error::Convergence { what: "psi".into(), iterations: MAX_ITER * 10, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteEquilibrium {
    pub n: usize,
    pub d: usize,
    /// [agent][step][component]
    pub pi: Vec<Vec<Vec<f64>>>,
    /// [agent][step]
    pub zeta_star: Vec<Vec<f64>>,
    pub gamma0: Vec<f64>,
    pub value0: Vec<f64>,
    /// largest final Picard step over all time steps
    pub residual: f64,
    /// Picard iterations per time step
    pub iterations: Vec<usize>,
}

impl FiniteEquilibrium {
    /// ζ^{ij} = λ_ij σ^j π̃^j at step k (zero on the diagonal).
    pub fn zeta_offdiag(&self, weights: &Weights, coeffs: &[AgentCoeffs], i: usize, j: usize, k: usize) -> Vec<f64> {
        let s = coeffs[j].sigma.at(k);
        self.pi[j][k].iter().zip(s).map(|(p, s)| weights.get(i, j) * s * p).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: DEFAULT_TOL, max_iter: MAX_ITER }
    }
}

pub(crate) fn step_table(coeffs: &[AgentCoeffs], grid: &TimeGrid) -> Result<Vec<Vec<StepData>>> {
    coeffs.iter().map(|c| c.steps(grid)).collect()
}

struct Picard {
    profile: Vec<DVector<f64>>,
    zeta_star: Vec<f64>,
    residual: f64,
    iterations: usize,
}

/// Profile iteration π^i ← ς⁻¹P(σ̃ηθ + σ̃*ζ^{i*}) with ζ^{i*} = Σ_j λ_ij σ^{*j}·π^j.
///
/// ζ^{ii} vanishes here: with deterministic strategies the terminal condition
/// of agent i is X^i_T − Σ_{j≠i} λ_ij X^j_T, whose W^i integrand is
/// λ_ii σ^i π^i = 0.
fn picard_step(data: &[&StepData], weights: &Weights, opts: &SolveOptions) -> Result<Picard> {
    let n = data.len();
    let zero = DVector::zeros(data[0].dim());
    let zstar = |p: &[DVector<f64>]| -> Vec<f64> {
        (0..n)
            .map(|i| (0..n).filter(|&j| j != i && weights.get(i, j) != 0.0).map(|j| weights.get(i, j) * data[j].sigma_star.dot(&p[j])).sum())
            .collect()
    };
    let map = |p: &[DVector<f64>]| -> Vec<DVector<f64>> {
        let z = zstar(p);
        (0..n).map(|i| data[i].respond(&(&zero + data[i].theta.scale(data[i].eta)), z[i]).pi).collect()
    };
    let mut profile: Vec<DVector<f64>> = vec![zero.clone(); n];
    let mut damping = 1.0;
    let mut last = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = map(&profile);
        let diff = profile.iter().zip(&next).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        if diff > last && damping == 1.0 {
            damping = 0.5;
        }
        profile = profile.iter().zip(next).map(|(a, b)| a.scale(1.0 - damping) + b.scale(damping)).collect();
        last = diff;
        if diff <= opts.tol {
            let zeta_star = zstar(&profile);
            return Ok(Picard { profile, zeta_star, residual: diff, iterations: it });
        }
    }
    Err(Error::Convergence { what: "equilibrium profile".into(), iterations: opts.max_iter, residual: last })
}

/// Equilibrium for explicit interaction weights.
pub fn solve_equilibrium_weights(weights: &Weights, coeffs: &[AgentCoeffs], grid: &TimeGrid, opts: &SolveOptions) -> Result<FiniteEquilibrium> {
    let n = weights.n();
    if coeffs.len() != n {
        return param(format!("{} coefficient sets for {n} agents", coeffs.len()));
    }
    if n == 0 {
        return param("empty game");
    }
    let table = step_table(coeffs, grid)?;
    let d = coeffs[0].dim();
    if coeffs.iter().any(|c| c.dim() != d) {
        return param("all agents must trade the same number of assets");
    }
    let per_step: Vec<Picard> = (0..grid.steps)
        .into_par_iter()
        .map(|k| {
            let data: Vec<&StepData> = table.iter().map(|a| &a[k]).collect();
            picard_step(&data, weights, opts)
        })
        .collect::<Result<_>>()?;
    let mut eq = FiniteEquilibrium {
        n,
        d,
        pi: (0..n).map(|i| per_step.iter().map(|p| p.profile[i].as_slice().to_vec()).collect()).collect(),
        zeta_star: (0..n).map(|i| per_step.iter().map(|p| p.zeta_star[i]).collect()).collect(),
        gamma0: vec![],
        value0: vec![],
        residual: per_step.iter().map(|p| p.residual).fold(0.0, f64::max),
        iterations: per_step.iter().map(|p| p.iterations).collect(),
    };
    let (g, v) = gamma0_and_value(&eq, coeffs, weights, grid)?;
    eq.gamma0 = g;
    eq.value0 = v;
    Ok(eq)
}

/// Equilibrium on a sampled graph.
pub fn solve_equilibrium_det(graph: &InteractionGraph, coeffs: &[AgentCoeffs], grid: &TimeGrid, tol: f64) -> Result<FiniteEquilibrium> {
    let w = normalized_weights(graph)?;
    solve_equilibrium_weights(&w, coeffs, grid, &SolveOptions { tol, ..Default::default() })
}

/// Per-step drift pieces of an agent's value equation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DriftTerms {
    /// Σ_j λ_ij π^j·σ^jθ^j
    pub benchmark: f64,
    /// b^i
    pub b: f64,
}

/// b = (η/2)|θ|² − (1/2η)Σ_{j≠i}|ζ^{ij}|² − (1/2η)(dist² + R), with ζ^{ii} = 0.
///
/// R is the unconstrained least-squares residual of the loss minimized by the
/// projection; it vanishes when σ* = 0 or ηθσ* is aligned with ζ*σ, and is
/// needed for b to equal the optimal drift in general.
pub(crate) fn drift_terms(sd: &StepData, zeta_star: f64, offdiag_sq: f64, benchmark: f64) -> DriftTerms {
    let a = sd.theta.scale(sd.eta);
    let r = sd.respond(&a, zeta_star);
    let b = 0.5 * sd.eta * sd.theta.norm_squared() - offdiag_sq / (2.0 * sd.eta) - (r.dist_sq + r.residual) / (2.0 * sd.eta);
    DriftTerms { benchmark, b }
}

pub(crate) fn pi_dot_sigma_theta(sd: &StepData, pi: &[f64]) -> f64 {
    pi.iter().enumerate().map(|(l, p)| p * sd.sigma[l] * sd.theta[l]).sum()
}

/// γ^i_0 = ∫ (Σ_j λ_ij π̃^j·σ^jθ^j − b^i) dt and V^i_0 = −exp(−(ξ^i − ξ̄^i − γ^i_0)/η_i).
pub fn gamma0_and_value(eq: &FiniteEquilibrium, coeffs: &[AgentCoeffs], weights: &Weights, grid: &TimeGrid) -> Result<(Vec<f64>, Vec<f64>)> {
    let table = step_table(coeffs, grid)?;
    let n = eq.n;
    let xi: Vec<f64> = coeffs.iter().map(|c| c.xi.fixed()).collect::<Result<_>>()?;
    let dt = grid.dt();
    let mut gamma = vec![0.0; n];
    let mut value = vec![0.0; n];
    for i in 0..n {
        for k in 0..grid.steps {
            let mut bench = 0.0;
            let mut off = 0.0;
            for j in (0..n).filter(|&j| j != i && weights.get(i, j) != 0.0) {
                let w = weights.get(i, j);
                bench += w * pi_dot_sigma_theta(&table[j][k], &eq.pi[j][k]);
                off += eq.pi[j][k].iter().zip(&table[j][k].sigma).map(|(p, s)| (w * s * p).powi(2)).sum::<f64>();
            }
            let t = drift_terms(&table[i][k], eq.zeta_star[i][k], off, bench);
            gamma[i] += dt * (t.benchmark - t.b);
        }
        let xibar: f64 = (0..n).filter(|&j| j != i).map(|j| weights.get(i, j) * xi[j]).sum();
        value[i] = utility(xi[i], xibar + gamma[i], coeffs[i].eta).value;
    }
    Ok((gamma, value))
}

/// Outcome of the best-response search for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub agent: usize,
    pub strategy: Vec<f64>,
    pub utility: f64,
    pub std_error: f64,
    pub equilibrium_utility: f64,
    pub equilibrium_std_error: f64,
    /// utility(oracle) − utility(equilibrium) on common random numbers
    pub gain: f64,
    pub gain_std_error: f64,
    /// the candidate utilities could not be separated at this budget
    pub inconclusive: bool,
    pub confidence_interval: (f64, f64),
}

impl OracleResult {
    /// No profitable deviation beyond `k` utility standard errors.
    pub fn passes(&self, k: f64) -> bool {
        self.gain <= k * self.std_error
    }
}

/// Per-path sufficient statistics: own wealth is ξ + π·S for constant π.
struct OracleSample {
    d: usize,
    /// [path][component]
    s: Vec<f64>,
    benchmark: Vec<f64>,
    own_eq: Vec<f64>,
}

const CHUNK: usize = 4096;

impl OracleSample {
    fn paths(&self) -> usize {
        self.benchmark.len()
    }

    fn utilities(&self, pi: &[f64], xi: f64, eta: f64) -> Vec<f64> {
        (0..self.paths())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|p| {
                let x = xi + (0..self.d).map(|l| pi[l] * self.s[p * self.d + l]).sum::<f64>();
                utility(x, self.benchmark[p], eta).value
            })
            .collect()
    }
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    // fixed-size chunk sums keep the result independent of thread count
    let sums: Vec<f64> = v.par_chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    let n = v.len() as f64;
    let m = sums.iter().sum::<f64>() / n;
    let ss: Vec<f64> = v.par_chunks(CHUNK).map(|c| c.iter().map(|x| (x - m).powi(2)).sum::<f64>()).collect();
    let var = ss.iter().sum::<f64>() / (n - 1.0).max(1.0);
    (m, (var / n).sqrt())
}

/// Maximize the MC utility of agent i over constant strategies in A^i.
pub fn best_response_oracle(
    i: usize,
    eq: &FiniteEquilibrium,
    coeffs: &[AgentCoeffs],
    weights: &Weights,
    grid: &TimeGrid,
    mc_paths: usize,
    seed: u64,
) -> Result<OracleResult> {
    let n = eq.n;
    if i >= n {
        return param(format!("agent {i} out of range"));
    }
    if mc_paths < 2 {
        return param("oracle needs at least 2 paths");
    }
    let table = step_table(coeffs, grid)?;
    let xi: Vec<f64> = coeffs.iter().map(|c| c.xi.fixed()).collect::<Result<_>>()?;
    let d = eq.d;
    let active: Vec<usize> = (0..n).filter(|&j| j == i || weights.get(i, j) != 0.0).collect();
    let slots: Vec<u64> = active.iter().map(|&j| j as u64).collect();
    let dt = grid.dt();
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..mc_paths)
        .into_par_iter()
        .map(|p| {
            let noise = PathNoise::new(seed, p, &slots, d, grid, true);
            let mut s = vec![0.0; d];
            let mut bench = 0.0;
            let mut own = xi[i];
            for (slot, &j) in active.iter().enumerate() {
                let mut x = xi[j];
                for k in 0..grid.steps {
                    let sd = &table[j][k];
                    let dw = noise.idio(slot, k);
                    for l in 0..d {
                        let unit = sd.sigma[l] * (sd.theta[l] * dt + dw[l]) + sd.sigma_star[l] * noise.star(k);
                        x += eq.pi[j][k][l] * unit;
                        if j == i {
                            s[l] += unit;
                        }
                    }
                }
                if j == i {
                    own = x;
                } else {
                    bench += weights.get(i, j) * x;
                }
            }
            (s, bench, own)
        })
        .collect();
    let sample = OracleSample {
        d,
        s: rows.iter().flat_map(|r| r.0.iter().copied()).collect(),
        benchmark: rows.iter().map(|r| r.1).collect(),
        own_eq: rows.iter().map(|r| r.2).collect(),
    };
    let eta = coeffs[i].eta;
    let eq_u: Vec<f64> = (0..mc_paths).map(|p| utility(sample.own_eq[p], sample.benchmark[p], eta).value).collect();
    let (eq_mean, eq_se) = mean_se(&eq_u);

    let unit_set = ScaledSet::identity(coeffs[i].constraint.clone(), d)?;
    let project = |x: &[f64]| -> Vec<f64> { unit_set.project(&DVector::from_column_slice(x)).as_slice().to_vec() };
    let objective = |x: &[f64]| -> f64 { mean_se(&sample.utilities(&project(x), xi[i], eta)).0 };

    // search box: the constraint's bounding box when finite, else around the equilibrium
    let center: Vec<f64> = (0..d).map(|l| eq.pi[i].iter().map(|p| p[l]).sum::<f64>() / grid.steps as f64).collect();
    let (lo, hi) = search_box(&coeffs[i].constraint, &center);
    let mut evaluated: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut best = project(&center);
    let mut best_val = objective(&best);
    evaluated.push((best.clone(), best_val));
    let mut width: Vec<f64> = (0..d).map(|l| hi[l] - lo[l]).collect();
    let mut spread: f64 = 0.0;
    for round in 0..5 {
        for l in 0..d {
            let points = if round == 0 { 81 } else { 21 };
            let (a, b) = if round == 0 { (lo[l], hi[l]) } else { (best[l] - width[l] / 2.0, best[l] + width[l] / 2.0) };
            let mut line_vals = Vec::new();
            for q in 0..points {
                let mut cand = best.clone();
                cand[l] = a + (b - a) * q as f64 / (points - 1) as f64;
                let cand = project(&cand);
                let val = objective(&cand);
                line_vals.push(val);
                evaluated.push((cand.clone(), val));
            }
            if round == 0 {
                let mx = line_vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mn = line_vals.iter().copied().fold(f64::INFINITY, f64::min);
                spread = spread.max(mx - mn);
            }
            for (cand, val) in evaluated.iter().rev().take(points) {
                if *val > best_val {
                    best_val = *val;
                    best = cand.clone();
                }
            }
        }
        for w in width.iter_mut() {
            *w = if round == 0 { *w * 4.0 / 80.0 } else { *w / 5.0 };
        }
    }
    let polished = optim::nelder_mead(|x| -objective(x), &best, &width.iter().map(|w| w.max(1e-6)).collect::<Vec<_>>(), 1e-12, 400);
    let polished = project(&polished.0);
    let val = objective(&polished);
    evaluated.push((polished.clone(), val));
    if val > best_val {
        best_val = val;
        best = polished;
    }

    // smallest norm among candidates indistinguishable from the best
    let best_u = sample.utilities(&best, xi[i], eta);
    let mut chosen = (best.clone(), best_val);
    let mut near: Vec<&(Vec<f64>, f64)> = evaluated.iter().filter(|(_, v)| best_val - v <= 3.0 * eq_se).collect();
    near.sort_by(|a, b| norm(&a.0).total_cmp(&norm(&b.0)));
    for (cand, v) in near {
        if norm(cand) >= norm(&chosen.0) {
            break;
        }
        let cu = sample.utilities(cand, xi[i], eta);
        let diff: Vec<f64> = best_u.iter().zip(&cu).map(|(a, b)| a - b).collect();
        let (dm, dse) = mean_se(&diff);
        if dm <= dse {
            chosen = (cand.clone(), *v);
            break;
        }
    }
    let cu = sample.utilities(&chosen.0, xi[i], eta);
    let (u, se) = mean_se(&cu);
    let diff: Vec<f64> = cu.iter().zip(&eq_u).map(|(a, b)| a - b).collect();
    let (gain, gain_se) = mean_se(&diff);
    Ok(OracleResult {
        agent: i,
        strategy: chosen.0,
        utility: u,
        std_error: se,
        equilibrium_utility: eq_mean,
        equilibrium_std_error: eq_se,
        gain,
        gain_std_error: gain_se,
        inconclusive: spread < 3.0 * se,
        confidence_interval: (u - 3.0 * se, u + 3.0 * se),
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn search_box(set: &crate::market::ConvexSet, center: &[f64]) -> (Vec<f64>, Vec<f64>) {
    use crate::market::ConvexSet;
    let d = center.len();
    let half = center.iter().map(|c| c.abs()).fold(0.0, f64::max).mul_add(4.0, 0.5);
    let mut lo: Vec<f64> = center.iter().map(|c| c - half).collect();
    let mut hi: Vec<f64> = center.iter().map(|c| c + half).collect();
    match set {
        ConvexSet::Box { lower, upper } => {
            for l in 0..d {
                if lower[l].is_finite() {
                    lo[l] = lower[l];
                }
                if upper[l].is_finite() {
                    hi[l] = upper[l];
                }
            }
        }
        ConvexSet::Ball { center: c, radius } => {
            for l in 0..d {
                lo[l] = c[l] - radius;
                hi[l] = c[l] + radius;
            }
        }
        ConvexSet::Orthant => lo.iter_mut().for_each(|x| *x = 0.0),
        _ => {}
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphon::InteractionGraph;
    use crate::market::ConvexSet;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn standing(n: usize, set: ConvexSet) -> Vec<AgentCoeffs> {
        vec![AgentCoeffs::scalar(1.0, 1.0, 0.2, 0.5, 1.0, set); n]
    }

    #[test]
    fn h_alpha_examples() {
        let set = ScaledSet::identity(ConvexSet::FullSpace, 1).unwrap();
        let h = h_alpha_solve(&v(&[0.0]), &v(&[0.5]), 3, 1.0, &set, 1e-13).unwrap();
        assert!((h.x - 1.0 / 1.125).abs() < 1e-12);
        let h = h_alpha_solve(&v(&[0.3]), &v(&[0.0]), 3, 0.7, &set, 1e-13).unwrap();
        assert_eq!(h.x, 0.7);
        // saturated box: P ≡ 0.05, so H(x) = x + 0.5·0.05/(n−1)
        let boxed = ScaledSet::identity(ConvexSet::Box { lower: vec![-0.05], upper: vec![0.05] }, 1).unwrap();
        let h = h_alpha_solve(&v(&[10.0]), &v(&[0.5]), 5, 1.0, &boxed, 1e-13).unwrap();
        assert!((h.x - (1.0 - 0.5 * 0.05 / 4.0)).abs() < 1e-12);
        assert!(h_alpha_solve(&v(&[0.0]), &v(&[1.0]), 3, 1.0, &set, 1e-13).is_err());
    }

    #[test]
    fn phi_identity_cases() {
        let grid = TimeGrid::new(1.0, 1).unwrap();
        let data: Vec<StepData> = standing(3, ConvexSet::FullSpace).iter().map(|c| c.steps(&grid).unwrap().remove(0)).collect();
        let z = vec![DVector::zeros(1); 3];
        let x = [0.3, -0.2, 1.0];
        assert_eq!(phi_map(&x, &z, &data, &Weights::zeros(3)).unwrap(), x.to_vec());
        let nocommon: Vec<StepData> = vec![AgentCoeffs::scalar(1.0, 0.0, 0.2, 0.5, 1.0, ConvexSet::FullSpace); 3]
            .iter()
            .map(|c| c.steps(&grid).unwrap().remove(0))
            .collect();
        let w = normalized_weights(&InteractionGraph::complete(3)).unwrap();
        assert_eq!(phi_map(&x, &z, &nocommon, &w).unwrap(), x.to_vec());
        // complete graph, FullSpace: φ_i = ζ_i − Σ_j ½·(1/√2)(0.1/√2 + ζ_j/√2)
        let phi = phi_map(&[1.0, 1.0, 1.0], &z, &data, &w).unwrap();
        for p in &phi {
            assert!((p - (1.0 - 0.5 * (0.1 + 1.0))).abs() < 1e-14);
        }
        let back = psi_map(&phi, &z, &data, &w, 1e-13).unwrap();
        for b in back.zeta_star {
            assert!((b - 1.0).abs() < 1e-10);
        }
        assert!(matches!(psi_map(&[0.0; 2], &z[..2], &data[..2], &Weights::zeros(2), 1e-12), Err(Error::Capability(_))));
    }

    #[test]
    fn complete_graph_example() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let g = InteractionGraph::complete(3);
        let eq = solve_equilibrium_det(&g, &standing(3, ConvexSet::FullSpace), &grid, 1e-13).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                assert!((eq.pi[i][k][0] - 0.1).abs() < 1e-12);
            }
            assert!((eq.gamma0[i] - 0.015).abs() < 1e-12);
            assert!((eq.value0[i] + 0.03f64.exp()).abs() < 1e-12);
        }
        let w = normalized_weights(&g).unwrap();
        let z = eq.zeta_offdiag(&w, &standing(3, ConvexSet::FullSpace), 0, 1, 0);
        assert!((z[0] - 0.05).abs() < 1e-12);
        let boxed = standing(3, ConvexSet::Box { lower: vec![0.0], upper: vec![0.05] });
        let eq = solve_equilibrium_det(&g, &boxed, &grid, 1e-13).unwrap();
        assert!((eq.pi[0][0][0] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn no_competition_value() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let c = vec![AgentCoeffs::scalar(1.0, 0.0, 0.2, 0.5, 0.7, ConvexSet::FullSpace); 3];
        let eq = solve_equilibrium_weights(&Weights::zeros(3), &c, &grid, &SolveOptions::default()).unwrap();
        assert!((eq.pi[1][0][0] - 0.1).abs() < 1e-15);
        assert!((eq.gamma0[0] + 0.01).abs() < 1e-14);
        assert!((eq.value0[0] + (-(0.7 + 0.01) / 0.5f64).exp()).abs() < 1e-14);
        // with common noise the isolated optimum is the Merton fraction ηθσ/(σ²+σ*²)
        let c = vec![AgentCoeffs::scalar(1.0, 1.0, 0.2, 0.5, 0.0, ConvexSet::FullSpace); 3];
        let eq = solve_equilibrium_weights(&Weights::zeros(3), &c, &grid, &SolveOptions::default()).unwrap();
        assert!((eq.pi[0][0][0] - 0.05).abs() < 1e-15);
        assert!((eq.gamma0[0] + 0.005).abs() < 1e-14);
    }
}
