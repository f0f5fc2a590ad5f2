//! Scalar BSDE numerics: a backward RK4 solver for deterministic reductions
//! and a least-squares Monte Carlo (regression) Euler scheme with outer
//! Picard freezing of the driver's z argument.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::market::{AgentCoeffs, StepData, TimeGrid};
use crate::rng;

/// Generator f(t, x, y, z, z*) of Y_t = ξ + ∫_t^T f ds − ∫_t^T Z dW − ∫_t^T Z* dW*.
pub trait Driver: Sync {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], z_star: &[f64]) -> f64;

    /// Scale used to cap regression estimates of Z.
    fn lipschitz_scale(&self) -> f64 {
        1.0
    }

    /// Coefficient of |z|² growth, for diagnostics.
    fn quadratic_growth(&self) -> f64 {
        0.0
    }
}

/// Wrap a closure as a driver.
pub struct FnDriver<F>(pub F);

impl<F: Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Sync> Driver for FnDriver<F> {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64], z_star: &[f64]) -> f64 {
        (self.0)(t, x, y, z, z_star)
    }
}

#[derive(Clone)]
pub enum Terminal {
    Constant(f64),
    /// function of the terminal forward state
    Function(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for Terminal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Terminal::Constant(c) => write!(f, "Constant({c})"),
            Terminal::Function(_) => write!(f, "Function(..)"),
        }
    }
}

pub struct BsdeProblem<D> {
    pub grid: TimeGrid,
    pub driver: D,
    pub terminal: Terminal,
    pub z_dim: usize,
    pub z_star_dim: usize,
}

/// Index of the coefficient interval containing t, with right endpoints
/// belonging to the interval on their left.
pub fn interval_of(grid: &TimeGrid, t: f64) -> usize {
    // knots computed as k·dt can land a hair above k, so shave round-off before ceil
    let x = t / grid.dt();
    let k = (x - 1e-9 * x.abs().max(1.0)).ceil() as isize - 1;
    k.clamp(0, grid.steps as isize - 1) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
}

impl OdeSolution {
    pub fn y0(&self) -> f64 {
        self.y[0]
    }
}

/// Classical RK4 for dY/dt = −f(t, Y, 0, 0) backward from T over `steps` steps.
///
/// Stage times are kept strictly inside each step so piecewise-constant
/// coefficients are read from the step being integrated.
pub fn rk4_backward<D: Driver>(p: &BsdeProblem<D>, steps: usize) -> Result<OdeSolution> {
    let y_t = match p.terminal {
        Terminal::Constant(c) => c,
        Terminal::Function(_) => return param("the ODE solver needs a deterministic terminal value"),
    };
    let h = p.grid.horizon / steps as f64;
    let x = vec![0.0; p.z_dim.max(1)];
    let z = vec![0.0; p.z_dim];
    let zs = vec![0.0; p.z_star_dim];
    let eps = 1e-12 * h;
    let mut y = vec![0.0; steps + 1];
    y[steps] = y_t;
    for k in (0..steps).rev() {
        let (lo, hi) = (k as f64 * h, (k + 1) as f64 * h);
        let f = |t: f64, v: f64| p.driver.eval(t.clamp(lo + eps, hi - eps), &x, v, &z, &zs);
        // integrate s = T − t forward: dY/ds = f
        let yk = y[k + 1];
        let k1 = f(hi, yk);
        let k2 = f(hi - h / 2.0, yk + h / 2.0 * k1);
        let k3 = f(hi - h / 2.0, yk + h / 2.0 * k2);
        let k4 = f(lo, yk + h * k3);
        y[k] = yk + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(OdeSolution { times: (0..=steps).map(|k| k as f64 * h).collect(), y })
}

pub const ODE_REFINEMENT_TOL: f64 = 1e-8;

/// RK4 on the problem grid, rejected when step halving moves Y(0) by more than 1e−8.
pub fn solve_bsde_ode<D: Driver>(p: &BsdeProblem<D>) -> Result<OdeSolution> {
    let coarse = rk4_backward(p, p.grid.steps)?;
    let fine = rk4_backward(p, 2 * p.grid.steps)?;
    let difference = (coarse.y0() - fine.y0()).abs();
    if !(difference <= ODE_REFINEMENT_TOL) {
        return Err(Error::Refinement { difference });
    }
    Ok(coarse)
}

/// Simulated forward states and the Brownian increments driving them.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPaths {
    pub grid: TimeGrid,
    pub paths: usize,
    pub state_dim: usize,
    /// noise dimension: z_dim + z_star_dim
    pub noise_dim: usize,
    /// [path][(steps+1)·state_dim]
    pub states: Vec<Vec<f64>>,
    /// [path][steps·noise_dim]
    pub dw: Vec<Vec<f64>>,
}

impl ForwardPaths {
    /// Brownian motion as its own state, keyed on (seed, path).
    pub fn brownian(grid: &TimeGrid, dim: usize, paths: usize, seed: u64) -> Self {
        let sq = grid.dt().sqrt();
        let (states, dw) = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut inc = vec![0.0; grid.steps * dim];
                rng::normals(seed, &[rng::TAG_FORWARD, p as u64], &mut inc);
                inc.iter_mut().for_each(|x| *x *= sq);
                let mut st = vec![0.0; (grid.steps + 1) * dim];
                for k in 0..grid.steps {
                    for l in 0..dim {
                        st[(k + 1) * dim + l] = st[k * dim + l] + inc[k * dim + l];
                    }
                }
                (st, inc)
            })
            .unzip();
        ForwardPaths { grid: *grid, paths, state_dim: dim, noise_dim: dim, states, dw }
    }

    pub fn state(&self, p: usize, k: usize) -> &[f64] {
        &self.states[p][k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn increment(&self, p: usize, k: usize) -> &[f64] {
        &self.dw[p][k * self.noise_dim..(k + 1) * self.noise_dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsmcParams {
    pub basis_degree: usize,
    pub picard_iters: usize,
    /// cap on |Z|; defaults to 10× the driver's Lipschitz scale
    pub z_bound: Option<f64>,
}

impl Default for LsmcParams {
    fn default() -> Self {
        LsmcParams { basis_degree: 3, picard_iters: 5, z_bound: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub y_mean: f64,
    pub z_mean: Vec<f64>,
    /// mean of Y_{k+1} − Y_k + fΔt − Z_k·ΔW_k
    pub residual: f64,
    pub residual_se: f64,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsmcResult {
    /// mean of Y_T + Σ fΔt − Σ Z·ΔW over paths, Z in the control cross-fitted
    pub y0: f64,
    /// pathwise standard error of `y0` given the fitted Z; regression error in
    /// the Z that enters the driver is not included
    pub y0_se: f64,
    /// per step, regression coefficients of Y_k on the standardized basis
    pub coefficients: Vec<Vec<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// RMS change of (Y, Z) between successive Picard passes
    pub picard_gaps: Vec<f64>,
    pub warnings: Vec<String>,
    /// Y_k per path of the final pass, [step][path]
    #[serde(skip)]
    pub y: Vec<Vec<f64>>,
    /// Z_k per path of the final pass, [step][path·noise_dim]
    #[serde(skip)]
    pub z: Vec<Vec<f64>>,
}

impl LsmcResult {
    /// Martingale residual within `k` standard errors at every step.
    pub fn martingale_ok(&self, k: f64) -> bool {
        self.diagnostics.iter().all(|d| d.residual.abs() <= k * d.residual_se + 1e-14)
    }

    /// Diagnostics CSV: step, Y_mean, Z_mean, residual.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("step,Y_mean,Z_mean,residual\n");
        for d in &self.diagnostics {
            let z = d.z_mean.first().copied().unwrap_or(0.0);
            out.push_str(&format!("{},{},{},{}\n", d.step, d.y_mean, z, d.residual));
        }
        out
    }
}

/// Monomial exponents of total degree ≤ deg in `dim` variables.
fn exponents(dim: usize, deg: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; dim]];
    for total in 1..=deg {
        let mut cur = vec![0; dim];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, left - e);
    }
}

struct Basis {
    mean: Vec<f64>,
    sd: Vec<f64>,
    exps: Vec<Vec<usize>>,
}

impl Basis {
    fn eval(&self, s: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = s.iter().enumerate().map(|(l, v)| if self.sd[l] < 1e-12 { 0.0 } else { (v - self.mean[l]) / self.sd[l] }).collect();
        self.exps.iter().map(|e| e.iter().zip(&x).map(|(&p, v)| v.powi(p as i32)).product()).collect()
    }

    fn gram(&self, states: &[&[f64]]) -> DMatrix<f64> {
        let m = self.exps.len();
        let parts: Vec<DMatrix<f64>> = states
            .par_chunks(CHUNK)
            .map(|c| {
                let mut g = DMatrix::zeros(m, m);
                for s in c {
                    let b = DVector::from_vec(self.eval(s));
                    g += &b * b.transpose();
                }
                g
            })
            .collect();
        parts.into_iter().fold(DMatrix::zeros(m, m), |a, b| a + b) / states.len() as f64
    }
}

struct Regression {
    degree: usize,
    basis: Basis,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

const CHUNK: usize = 2048;

impl Regression {
    /// Fit the basis to the states at one step, lowering the degree while the
    /// Gram matrix is ill-conditioned.
    fn new(states: &[&[f64]], degree: usize, warnings: &mut Vec<String>, step: usize) -> Self {
        let dim = states[0].len();
        let n = states.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|l| states.iter().map(|s| s[l]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..dim)
            .map(|l| (states.iter().map(|s| (s[l] - mean[l]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        // all paths share one state (e.g. t = 0): only the constant is identifiable
        let mut deg = if sd.iter().all(|&s| s < 1e-12) { 0 } else { degree };
        loop {
            let basis = Basis { mean: mean.clone(), sd: sd.clone(), exps: exponents(dim, deg) };
            let gram = basis.gram(states);
            let eig = SymmetricEigen::new(gram.clone());
            let well_posed = eig.eigenvalues.min() > 1e-10 * eig.eigenvalues.max();
            if well_posed || deg == 0 {
                if let Some(chol) = nalgebra::Cholesky::new(gram) {
                    return Regression { degree: deg, basis, chol };
                }
            }
            if deg == 0 {
                panic!("constant regression basis has a singular Gram matrix");
            }
            warnings.push(format!("step {step}: regression basis ill-conditioned at degree {deg}, reducing"));
            deg -= 1;
        }
    }

    fn fit(&self, states: &[&[f64]], target: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = self.basis.exps.len();
        let parts: Vec<DVector<f64>> = states
            .par_chunks(CHUNK)
            .zip(target.par_chunks(CHUNK))
            .map(|(c, t)| {
                let mut v = DVector::zeros(m);
                for (s, y) in c.iter().zip(t) {
                    v += DVector::from_vec(self.basis.eval(s)).scale(*y);
                }
                v
            })
            .collect();
        let rhs = parts.into_iter().fold(DVector::zeros(m), |a, b| a + b) / states.len() as f64;
        let beta = self.chol.solve(&rhs);
        let fitted = states.par_iter().map(|s| DVector::from_vec(self.basis.eval(s)).dot(&beta)).collect();
        (beta.as_slice().to_vec(), fitted)
    }
}

/// Z_k·ΔW_k per path with Z_k regressed on the opposite half of the paths.
fn cross_fitted_zdw(regs: &[Regression; 2], halves: &[std::ops::Range<usize>; 2], forward: &ForwardPaths, k: usize, next: &[f64], dt: f64, bound: f64) -> Vec<f64> {
    let nd = forward.noise_dim;
    let mut out = vec![0.0; next.len()];
    for (src, dst) in [(0, 1), (1, 0)] {
        let reg = &regs[src];
        let st: Vec<&[f64]> = halves[src].clone().map(|q| forward.state(q, k)).collect();
        let nx = &next[halves[src].clone()];
        let (_, cond) = reg.fit(&st, nx);
        for l in 0..nd {
            let target: Vec<f64> = halves[src].clone().zip(nx.iter().zip(&cond)).map(|(q, (y, c))| (y - c) * forward.increment(q, k)[l] / dt).collect();
            let (beta, _) = reg.fit(&st, &target);
            for q in halves[dst].clone() {
                let b = reg.basis.eval(forward.state(q, k));
                let zl = b.iter().zip(&beta).map(|(u, v)| u * v).sum::<f64>().clamp(-bound, bound);
                out[q] += zl * forward.increment(q, k)[l];
            }
        }
    }
    out
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let sums: Vec<f64> = v.par_chunks(CHUNK).map(|c| c.iter().sum::<f64>()).collect();
    let n = v.len() as f64;
    let m = sums.iter().sum::<f64>() / n;
    let ss: Vec<f64> = v.par_chunks(CHUNK).map(|c| c.iter().map(|x| (x - m).powi(2)).sum::<f64>()).collect();
    (m, (ss.iter().sum::<f64>() / (n - 1.0).max(1.0) / n).sqrt())
}

/// Regression Monte Carlo for the BSDE along the given forward paths.
pub fn solve_bsde_lsmc<D: Driver>(p: &BsdeProblem<D>, forward: &ForwardPaths, params: &LsmcParams) -> Result<LsmcResult> {
    if params.basis_degree < 1 {
        return param("basis_degree must be at least 1");
    }
    if forward.grid != p.grid {
        return param("forward paths were simulated on a different grid");
    }
    let nd = p.z_dim + p.z_star_dim;
    if forward.noise_dim != nd {
        return param(format!("forward noise dimension {} but the problem has {nd}", forward.noise_dim));
    }
    if forward.paths < 2 {
        return param("need at least 2 paths");
    }
    let grid = &p.grid;
    let (steps, dt, paths) = (grid.steps, grid.dt(), forward.paths);
    let bound = params.z_bound.unwrap_or(10.0 * p.driver.lipschitz_scale());
    let terminal: Vec<f64> = (0..paths)
        .into_par_iter()
        .map(|q| match &p.terminal {
            Terminal::Constant(c) => *c,
            Terminal::Function(f) => f(forward.state(q, steps)),
        })
        .collect();

    let mut warnings = Vec::new();
    let regs: Vec<Regression> = (0..steps)
        .map(|k| {
            let st: Vec<&[f64]> = (0..paths).map(|q| forward.state(q, k)).collect();
            Regression::new(&st, params.basis_degree, &mut warnings, k)
        })
        .collect();
    // the Y_0 control uses Z fitted on the other half of the paths, so that
    // E[Z·ΔW] = 0 holds exactly and the pathwise standard error stays honest
    let half = paths / 2;
    let halves = [0..half, half..paths];
    let half_regs: Vec<[Regression; 2]> = (0..steps)
        .map(|k| {
            halves.clone().map(|r| {
                let st: Vec<&[f64]> = r.map(|q| forward.state(q, k)).collect();
                Regression::new(&st, params.basis_degree, &mut Vec::new(), k)
            })
        })
        .collect();

    let mut frozen: Option<Vec<Vec<f64>>> = None;
    let mut prev_y: Option<Vec<Vec<f64>>> = None;
    let mut gaps = Vec::new();
    let mut growth = 0;
    let passes = params.picard_iters.max(1);
    let mut out = None;
    for pass in 0..passes {
        let mut y = vec![Vec::new(); steps + 1];
        let mut z = vec![Vec::new(); steps];
        let mut coefficients = vec![Vec::new(); steps];
        let mut diagnostics = Vec::with_capacity(steps);
        y[steps] = terminal.clone();
        // Y_T + Σ fΔt − Σ Z·ΔW per path; its mean is Y_0 with the martingale part removed
        let mut pathwise = terminal.clone();
        for k in (0..steps).rev() {
            let st: Vec<&[f64]> = (0..paths).map(|q| forward.state(q, k)).collect();
            let reg = &regs[k];
            let next = &y[k + 1];
            // E[Y_{k+1} | X_k] is a control variate for Z: E[c(X_k)ΔW | X_k] = 0
            let (_, cond) = reg.fit(&st, next);
            let mut zk = vec![0.0; paths * nd];
            for l in 0..nd {
                let target: Vec<f64> = (0..paths).map(|q| (next[q] - cond[q]) * forward.increment(q, k)[l] / dt).collect();
                let (_, fitted) = reg.fit(&st, &target);
                for q in 0..paths {
                    zk[q * nd + l] = fitted[q].clamp(-bound, bound);
                }
            }
            let zarg = frozen.as_ref().map_or(&zk, |f| &f[k]);
            // midpoint of the step: still inside it, and exact for drivers linear in t
            let t_in = grid.knot(k) + 0.5 * dt;
            let f: Vec<f64> = (0..paths)
                .into_par_iter()
                .map(|q| {
                    let zq = &zarg[q * nd..(q + 1) * nd];
                    p.driver.eval(t_in, forward.state(q, k), next[q], &zq[..p.z_dim], &zq[p.z_dim..])
                })
                .collect();
            let target: Vec<f64> = (0..paths).map(|q| next[q] + f[q] * dt).collect();
            let (beta, fitted) = reg.fit(&st, &target);
            let resid: Vec<f64> = (0..paths)
                .map(|q| {
                    let zw: f64 = (0..nd).map(|l| zk[q * nd + l] * forward.increment(q, k)[l]).sum();
                    next[q] - fitted[q] + f[q] * dt - zw
                })
                .collect();
            // in sample the intercept makes mean(Y_{k+1} + fΔt − Y_k) vanish, so the
            // residual mean fluctuates like mean(Z·ΔW) across samples
            let zdw: Vec<f64> = (0..paths).map(|q| (0..nd).map(|l| zk[q * nd + l] * forward.increment(q, k)[l]).sum()).collect();
            let zcv = cross_fitted_zdw(&half_regs[k], &halves, forward, k, next, dt, bound);
            for q in 0..paths {
                pathwise[q] += f[q] * dt - zcv[q];
            }
            let (rm, rse) = mean_se(&resid);
            let rse = rse.hypot(mean_se(&zdw).1);
            let z_mean = (0..nd).map(|l| (0..paths).map(|q| zk[q * nd + l]).sum::<f64>() / paths as f64).collect();
            diagnostics.push(StepDiagnostics { step: k, y_mean: mean_se(&fitted).0, z_mean, residual: rm, residual_se: rse, degree: reg.degree });
            coefficients[k] = beta;
            y[k] = fitted;
            z[k] = zk;
        }
        diagnostics.reverse();
        if let Some(py) = &prev_y {
            let gap = (0..steps)
                .map(|k| (y[k].iter().zip(&py[k]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / paths as f64).sqrt())
                .fold(0.0, f64::max);
            if let Some(&last) = gaps.last() {
                if gap > last && gap > 1e-12 {
                    growth += 1;
                } else {
                    growth = 0;
                }
            }
            gaps.push(gap);
            if growth >= 3 {
                return Err(Error::Divergence { what: "LSMC Picard iteration".into(), iteration: pass });
            }
        }
        let (y0, y0_se) = mean_se(&pathwise);
        prev_y = Some(y.clone());
        frozen = Some(z.clone());
        out = Some(LsmcResult { y0, y0_se, coefficients, diagnostics, picard_gaps: gaps.clone(), warnings: warnings.clone(), y, z });
    }
    Ok(out.expect("at least one pass"))
}

/// The exponential-utility driver
/// f = −z·θ − (η/2)|θ|² + (1/2η)(dist²(σ̃(z+ηθ) + σ̃*z*, ς·A) + R) + m(t),
/// with θ_t(x) = θ̄_t + κx and an additive deterministic term m.
pub struct UtilityDriver {
    grid: TimeGrid,
    steps: Vec<StepData>,
    kappa: f64,
    mean_field: Vec<f64>,
}

impl UtilityDriver {
    pub fn new(coeffs: &AgentCoeffs, grid: &TimeGrid, kappa: f64, mean_field: Option<Vec<f64>>) -> Result<Self> {
        let steps = coeffs.steps(grid)?;
        let mean_field = mean_field.unwrap_or_else(|| vec![0.0; grid.steps]);
        if mean_field.len() != grid.steps {
            return param("mean-field term needs one value per step");
        }
        Ok(UtilityDriver { grid: *grid, steps, kappa, mean_field })
    }

    pub fn step_data(&self, k: usize) -> &StepData {
        &self.steps[k]
    }

    pub fn theta(&self, k: usize, x: &[f64]) -> DVector<f64> {
        let th = &self.steps[k].theta;
        if self.kappa == 0.0 {
            th.clone()
        } else {
            DVector::from_iterator(th.len(), (0..th.len()).map(|l| th[l] + self.kappa * x.get(l).copied().unwrap_or(0.0)))
        }
    }
}

impl Driver for UtilityDriver {
    fn eval(&self, t: f64, x: &[f64], _y: f64, z: &[f64], z_star: &[f64]) -> f64 {
        let k = interval_of(&self.grid, t);
        let sd = &self.steps[k];
        let theta = self.theta(k, x);
        let zv = if z.is_empty() { DVector::zeros(theta.len()) } else { DVector::from_column_slice(z) };
        let b = z_star.first().copied().unwrap_or(0.0);
        let a = &zv + theta.scale(sd.eta);
        let r = sd.respond(&a, b);
        -zv.dot(&theta) - 0.5 * sd.eta * theta.norm_squared() + (r.dist_sq + r.residual) / (2.0 * sd.eta) + self.mean_field[k]
    }

    fn lipschitz_scale(&self) -> f64 {
        self.steps.iter().map(|s| s.theta.amax()).fold(self.kappa.abs(), f64::max).max(1.0)
    }

    fn quadratic_growth(&self) -> f64 {
        self.steps.iter().map(|s| 1.0 / (2.0 * s.eta)).fold(0.0, f64::max)
    }
}

/// Baseline value Y^base_0 of an isolated agent with deterministic coefficients.
pub fn baseline_y0(coeffs: &AgentCoeffs, grid: &TimeGrid) -> Result<f64> {
    let driver = UtilityDriver::new(coeffs, grid, 0.0, None)?;
    let p = BsdeProblem { grid: *grid, driver, terminal: Terminal::Constant(0.0), z_dim: coeffs.dim(), z_star_dim: 1 };
    Ok(solve_bsde_ode(&p)?.y0())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ConvexSet;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(1.0, steps).unwrap()
    }

    #[test]
    fn ode_examples() {
        let p = BsdeProblem { grid: grid(10), driver: FnDriver(|_, _: &[f64], _, _: &[f64], _: &[f64]| -0.5 / 2.0 * 0.04), terminal: Terminal::Constant(0.0), z_dim: 1, z_star_dim: 0 };
        assert!((solve_bsde_ode(&p).unwrap().y0() + 0.01).abs() < 1e-15);
        let base = AgentCoeffs::scalar(1.0, 0.0, 0.2, 0.5, 0.0, ConvexSet::FullSpace);
        assert!((baseline_y0(&base, &grid(10)).unwrap() + 0.01).abs() < 1e-15);
        let boxed = AgentCoeffs::scalar(1.0, 0.0, 0.2, 0.5, 0.0, ConvexSet::Box { lower: vec![0.0], upper: vec![0.05] });
        assert!((baseline_y0(&boxed, &grid(10)).unwrap() + 0.0075).abs() < 1e-15);
        let common = AgentCoeffs::scalar(1.0, 1.0, 0.2, 0.5, 0.0, ConvexSet::FullSpace);
        assert!((baseline_y0(&common, &grid(10)).unwrap() + 0.005).abs() < 1e-15);
    }

    #[test]
    fn ode_refinement_request() {
        let p = BsdeProblem { grid: grid(2), driver: FnDriver(|_, _: &[f64], y: f64, _: &[f64], _: &[f64]| 30.0 * y), terminal: Terminal::Constant(1.0), z_dim: 1, z_star_dim: 0 };
        assert!(matches!(solve_bsde_ode(&p), Err(Error::Refinement { .. })));
    }

    #[test]
    fn interval_lookup() {
        let g = grid(4);
        assert_eq!(interval_of(&g, 0.0), 0);
        assert_eq!(interval_of(&g, 0.25), 0);
        assert_eq!(interval_of(&g, 0.2500001), 1);
        assert_eq!(interval_of(&g, 1.0), 3);
    }

    #[test]
    fn basis_sizes() {
        assert_eq!(exponents(1, 3).len(), 4);
        assert_eq!(exponents(2, 3).len(), 10);
        assert_eq!(exponents(3, 2).len(), 10);
    }

    #[test]
    fn lsmc_martingale_representation() {
        let g = grid(20);
        let fwd = ForwardPaths::brownian(&g, 1, 5000, 11);
        let p = BsdeProblem { grid: g, driver: FnDriver(|_, _: &[f64], _, _: &[f64], _: &[f64]| 0.0), terminal: Terminal::Function(Arc::new(|x: &[f64]| x[0])), z_dim: 1, z_star_dim: 0 };
        let r = solve_bsde_lsmc(&p, &fwd, &LsmcParams::default()).unwrap();
        assert!(r.y0.abs() <= 3.0 * r.y0_se + 1e-12);
        let avg: f64 = (1..20).map(|k| r.diagnostics[k].z_mean[0]).sum::<f64>() / 19.0;
        assert!((avg - 1.0).abs() < 0.02);
        for k in 1..20 {
            assert!((r.diagnostics[k].z_mean[0] - 1.0).abs() < 0.1);
        }
        assert!(r.martingale_ok(3.0));
        assert!(r.diagnostics_csv().starts_with("step,Y_mean,Z_mean,residual\n0,"));
    }
}
