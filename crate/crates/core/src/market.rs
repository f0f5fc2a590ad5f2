//! Market coefficients, the ς/σ̃ transforms, constraint projections, wealth
//! simulation and exponential utility.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        let g = TimeGrid { horizon, steps };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return param(format!("horizon {} must be positive", self.horizon));
        }
        if self.steps == 0 {
            return param("time grid needs at least one step");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn knot(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn refined(&self) -> TimeGrid {
        TimeGrid { horizon: self.horizon, steps: 2 * self.steps }
    }
}

/// A value constant in time, or one value per grid step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeSeries<T> {
    Constant(T),
    Steps(Vec<T>),
}

impl<T> TimeSeries<T> {
    pub fn at(&self, k: usize) -> &T {
        match self {
            TimeSeries::Constant(v) => v,
            TimeSeries::Steps(v) => &v[k],
        }
    }

    fn values(&self) -> Vec<&T> {
        match self {
            TimeSeries::Constant(v) => vec![v],
            TimeSeries::Steps(v) => v.iter().collect(),
        }
    }

    fn check_len(&self, steps: usize, name: &str) -> Result<()> {
        match self {
            TimeSeries::Steps(v) if v.len() != steps => {
                param(format!("{name} has {} time values but the grid has {steps} steps", v.len()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialWealth {
    Fixed(f64),
    Normal { mean: f64, sd: f64 },
}

impl InitialWealth {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialWealth::Fixed(x) => x,
            InitialWealth::Normal { mean, .. } => mean,
        }
    }

    pub fn fixed(&self) -> Result<f64> {
        match *self {
            InitialWealth::Fixed(x) => Ok(x),
            InitialWealth::Normal { .. } => param("values are reported for deterministic initial wealth only"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvexSet {
    FullSpace,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    HalfSpace { normal: Vec<f64>, offset: f64 },
    /// nonnegative orthant
    Orthant,
}

impl ConvexSet {
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            ConvexSet::Box { lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return param(format!("box bounds must have dimension {d}"));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return param("box lower bound exceeds upper bound");
                }
            }
            ConvexSet::Ball { center, radius } => {
                if center.len() != d {
                    return param(format!("ball center must have dimension {d}"));
                }
                if !(*radius > 0.0) {
                    return param("ball radius must be positive");
                }
            }
            ConvexSet::HalfSpace { normal, .. } => {
                if normal.len() != d {
                    return param(format!("half-space normal must have dimension {d}"));
                }
                if normal.iter().all(|&a| a == 0.0) {
                    return param("half-space normal must be nonzero");
                }
            }
            ConvexSet::FullSpace | ConvexSet::Orthant => {}
        }
        Ok(())
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            ConvexSet::Box { lower, upper } => lower.iter().chain(upper).all(|x| x.is_finite()),
            ConvexSet::Ball { .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentCoeffs {
    /// diagonal of σ
    pub sigma: TimeSeries<Vec<f64>>,
    pub sigma_star: TimeSeries<Vec<f64>>,
    pub theta: TimeSeries<Vec<f64>>,
    pub eta: f64,
    pub xi: InitialWealth,
    pub constraint: ConvexSet,
}

impl AgentCoeffs {
    /// One-asset coefficients constant in time.
    pub fn scalar(sigma: f64, sigma_star: f64, theta: f64, eta: f64, xi: f64, constraint: ConvexSet) -> Self {
        AgentCoeffs {
            sigma: TimeSeries::Constant(vec![sigma]),
            sigma_star: TimeSeries::Constant(vec![sigma_star]),
            theta: TimeSeries::Constant(vec![theta]),
            eta,
            xi: InitialWealth::Fixed(xi),
            constraint,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.at(0).len()
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return param("asset dimension must be at least 1");
        }
        self.sigma.check_len(grid.steps, "sigma")?;
        self.sigma_star.check_len(grid.steps, "sigma_star")?;
        self.theta.check_len(grid.steps, "theta")?;
        for (name, s) in [("sigma", &self.sigma), ("sigma_star", &self.sigma_star), ("theta", &self.theta)] {
            for v in s.values() {
                if v.len() != d {
                    return param(format!("{name} has dimension {}, expected {d}", v.len()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return param(format!("{name} must be finite"));
                }
            }
        }
        if self.sigma.values().iter().flat_map(|v| v.iter()).any(|&s| !(s > 0.0)) {
            return param("sigma diagonal must be strictly positive");
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return param(format!("eta = {} outside (0,1)", self.eta));
        }
        if let InitialWealth::Normal { sd, .. } = self.xi {
            if !(sd >= 0.0) {
                return param("initial wealth sd must be nonnegative");
            }
        }
        self.constraint.validate(d)
    }

    /// Precomputed data for grid step k.
    pub fn step(&self, k: usize) -> Result<StepData> {
        let sigma = self.sigma.at(k).clone();
        let sigma_star = DVector::from_vec(self.sigma_star.at(k).clone());
        let tr = SigmaTransforms::new(&sigma, sigma_star.as_slice())?;
        let set = ScaledSet::new(self.constraint.clone(), tr.varsigma.clone())?;
        Ok(StepData {
            sigma,
            sigma_star,
            theta: DVector::from_vec(self.theta.at(k).clone()),
            eta: self.eta,
            tr,
            set,
        })
    }

    pub fn steps(&self, grid: &TimeGrid) -> Result<Vec<StepData>> {
        self.validate(grid)?;
        (0..grid.steps).map(|k| self.step(k)).collect()
    }
}

pub(crate) struct Eigen {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
///
/// nalgebra's SymmetricEigen reconstructs some 3×3 inputs only to ~1e−8,
/// too coarse for the square-root check below.
pub(crate) fn sym_eigen(m: &DMatrix<f64>) -> Eigen {
    let d = m.nrows();
    let mut a = m.clone();
    let mut v = DMatrix::identity(d, d);
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off <= f64::MIN_POSITIVE {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Eigen { eigenvalues: a.diagonal(), eigenvectors: v }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaTransforms {
    pub varsigma: DMatrix<f64>,
    pub varsigma_inv: DMatrix<f64>,
    pub sigma_tilde: DMatrix<f64>,
    pub sigma_star_tilde: DVector<f64>,
}

impl SigmaTransforms {
    /// ς = Q E^{1/2} Q' from the eigendecomposition of σ² + σ*σ*'.
    pub fn new(sigma: &[f64], sigma_star: &[f64]) -> Result<Self> {
        let d = sigma.len();
        if sigma_star.len() != d {
            return param("sigma and sigma_star dimensions differ");
        }
        let ss = DVector::from_column_slice(sigma_star);
        let mut s = DMatrix::from_diagonal(&DVector::from_iterator(d, sigma.iter().map(|x| x * x)));
        s += &ss * ss.transpose();
        let eig = sym_eigen(&s);
        let scale = eig.eigenvalues.amax().max(1.0);
        if eig.eigenvalues.iter().any(|&e| !(e > 1e-14 * scale)) {
            return Err(Error::Decomposition("sigma^2 + sigma* sigma*' is not positive definite".into()));
        }
        let q = &eig.eigenvectors;
        let root = DVector::from_iterator(d, eig.eigenvalues.iter().map(|e| e.sqrt()));
        let varsigma = q * DMatrix::from_diagonal(&root) * q.transpose();
        let varsigma_inv = q * DMatrix::from_diagonal(&root.map(|r| 1.0 / r)) * q.transpose();
        let varsigma = (&varsigma + varsigma.transpose()) * 0.5;
        let varsigma_inv = (&varsigma_inv + varsigma_inv.transpose()) * 0.5;
        let resid = (&varsigma * &varsigma - &s).amax();
        if resid > 1e-10 * scale {
            return Err(Error::Decomposition(format!("square-root residual {resid:e}")));
        }
        let sigma_tilde = &varsigma_inv * DMatrix::from_diagonal(&DVector::from_column_slice(sigma));
        let sigma_star_tilde = &varsigma_inv * ss;
        Ok(SigmaTransforms { varsigma, varsigma_inv, sigma_tilde, sigma_star_tilde })
    }
}

/// The image ς·A of a constraint set, with its Euclidean projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSet {
    set: ConvexSet,
    scale: DMatrix<f64>,
    kind: ScaleKind,
    // eigenpairs of the scale, used for ellipsoids and bound-constrained solves
    eig_vectors: DMatrix<f64>,
    eig_values: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScaleKind {
    Scalar(f64),
    Diagonal,
    Full,
}

impl ScaledSet {
    pub fn new(set: ConvexSet, scale: DMatrix<f64>) -> Result<Self> {
        let d = scale.nrows();
        if scale.ncols() != d {
            return param("scale must be square");
        }
        set.validate(d)?;
        let norm = scale.amax();
        let off = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| scale[(i, j)].abs())
            .fold(0.0, f64::max);
        let kind = if off > 1e-14 * norm {
            ScaleKind::Full
        } else if (0..d).all(|i| (scale[(i, i)] - scale[(0, 0)]).abs() <= 1e-14 * norm) {
            ScaleKind::Scalar(scale[(0, 0)])
        } else {
            ScaleKind::Diagonal
        };
        let eig = sym_eigen(&scale);
        if eig.eigenvalues.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Decomposition("projection scale is not positive definite".into()));
        }
        Ok(ScaledSet { set, scale, kind, eig_vectors: eig.eigenvectors, eig_values: eig.eigenvalues })
    }

    pub fn identity(set: ConvexSet, d: usize) -> Result<Self> {
        Self::new(set, DMatrix::identity(d, d))
    }

    pub fn set(&self) -> &ConvexSet {
        &self.set
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.scale.nrows()
    }

    /// argmin over y ∈ ς·A of |x − y|.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.set {
            ConvexSet::FullSpace => x.clone(),
            ConvexSet::HalfSpace { normal, offset } => {
                // ς·A = {z : (ς⁻¹a)·z ≤ b}, ς symmetric
                let a = DVector::from_column_slice(normal);
                let c = self.solve_scale(&a);
                let excess = c.dot(x) - offset;
                if excess <= 0.0 {
                    x.clone()
                } else {
                    x - c.scale(excess / c.norm_squared())
                }
            }
            ConvexSet::Box { lower, upper } => self.project_box(lower, upper, x),
            ConvexSet::Orthant => {
                let d = self.dim();
                self.project_box(&vec![0.0; d], &vec![f64::INFINITY; d], x)
            }
            ConvexSet::Ball { center, radius } => self.project_ball(center, *radius, x),
        }
    }

    pub fn dist_sq(&self, x: &DVector<f64>) -> f64 {
        (x - self.project(x)).norm_squared()
    }

    fn solve_scale(&self, v: &DVector<f64>) -> DVector<f64> {
        let q = &self.eig_vectors;
        let w = q.transpose() * v;
        q * w.component_div(&self.eig_values)
    }

    fn project_box(&self, lower: &[f64], upper: &[f64], x: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            ScaleKind::Scalar(_) | ScaleKind::Diagonal => DVector::from_iterator(
                x.len(),
                (0..x.len()).map(|i| {
                    let s = self.scale[(i, i)];
                    x[i].clamp(s * lower[i], s * upper[i])
                }),
            ),
            ScaleKind::Full => &self.scale * bounded_least_squares(&self.scale, x, lower, upper),
        }
    }

    fn project_ball(&self, center: &[f64], radius: f64, x: &DVector<f64>) -> DVector<f64> {
        let c = &self.scale * DVector::from_column_slice(center);
        let shifted = x - &c;
        if let ScaleKind::Scalar(s) = self.kind {
            let r = s * radius;
            let len = shifted.norm();
            return if len <= r { x.clone() } else { c + shifted.scale(r / len) };
        }
        // min |ς w − x'| over |w| ≤ r: in eigencoordinates w_k = e_k q_k / (e_k² + μ)
        let q = self.eig_vectors.transpose() * &shifted;
        let e = &self.eig_values;
        let w_of = |mu: f64| DVector::from_iterator(q.len(), (0..q.len()).map(|k| e[k] * q[k] / (e[k] * e[k] + mu)));
        if w_of(0.0).norm() <= radius {
            return x.clone();
        }
        // Newton on 1/|w(μ)| − 1/r, which is concave increasing in μ
        let mut mu = 0.0;
        for _ in 0..200 {
            let w = w_of(mu);
            let nw = w.norm();
            let dnw = -(0..q.len()).map(|k| w[k] * w[k] / (e[k] * e[k] + mu)).sum::<f64>() / nw;
            let f = 1.0 / nw - 1.0 / radius;
            let df = -dnw / (nw * nw);
            let next = (mu - f / df).max(0.0);
            if (next - mu).abs() <= 1e-15 * (1.0 + mu) {
                mu = next;
                break;
            }
            mu = next;
        }
        let w = w_of(mu);
        let w = w.scale(radius / w.norm());
        c + &self.eig_vectors * w.component_mul(e)
    }
}

/// min |S y − x|² subject to lower ≤ y ≤ upper, by a primal active-set method.
fn bounded_least_squares(s: &DMatrix<f64>, x: &DVector<f64>, lower: &[f64], upper: &[f64]) -> DVector<f64> {
    let d = x.len();
    let h = s.transpose() * s;
    let g = s.transpose() * x;
    let mut y = DVector::from_iterator(d, (0..d).map(|i| 0.0f64.clamp(lower[i], upper[i])));
    // 0 free, -1 fixed at lower, +1 fixed at upper
    let mut state: Vec<i8> = (0..d)
        .map(|i| if y[i] == lower[i] && lower[i].is_finite() { -1 } else if y[i] == upper[i] && upper[i].is_finite() { 1 } else { 0 })
        .collect();
    for _ in 0..(50 * d + 50) {
        let free: Vec<usize> = (0..d).filter(|&i| state[i] == 0).collect();
        let mut target = y.clone();
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
            let rhs = DVector::from_iterator(
                free.len(),
                free.iter().map(|&i| g[i] - (0..d).filter(|&j| state[j] != 0).map(|j| h[(i, j)] * y[j]).sum::<f64>()),
            );
            let sol = hf.cholesky().map(|c| c.solve(&rhs)).unwrap_or(rhs);
            for (a, &i) in free.iter().enumerate() {
                target[i] = sol[a];
            }
        }
        // longest feasible step toward the subspace minimizer
        let mut alpha = 1.0;
        let mut blocking = None;
        for &i in &free {
            let dir = target[i] - y[i];
            if dir < 0.0 && target[i] < lower[i] {
                let a = (lower[i] - y[i]) / dir;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, -1));
                }
            } else if dir > 0.0 && target[i] > upper[i] {
                let a = (upper[i] - y[i]) / dir;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, 1));
                }
            }
        }
        y += (&target - &y).scale(alpha.max(0.0));
        if let Some((i, side)) = blocking {
            y[i] = if side < 0 { lower[i] } else { upper[i] };
            state[i] = side;
            continue;
        }
        let grad = &h * &y - &g;
        let tol = 1e-14 * (1.0 + g.amax());
        let worst = (0..d)
            .filter(|&i| state[i] != 0)
            .map(|i| (i, if state[i] < 0 { -grad[i] } else { grad[i] }))
            .filter(|&(_, v)| v > tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((i, _)) => state[i] = 0,
            None => break,
        }
    }
    y
}

/// Euclidean projection of x onto scale·A.
pub fn project(set: &ConvexSet, scale: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(ScaledSet::new(set.clone(), scale.clone())?.project(x))
}

/// One agent's coefficients on one grid step, with the derived transforms.
#[derive(Debug, Clone, PartialEq)]
pub struct StepData {
    pub sigma: Vec<f64>,
    pub sigma_star: DVector<f64>,
    pub theta: DVector<f64>,
    pub eta: f64,
    pub tr: SigmaTransforms,
    pub set: ScaledSet,
}

/// Optimizer of |a − σπ|² + (b − σ*·π)² over π ∈ A.
#[derive(Debug, Clone)]
pub struct Response {
    pub pi: DVector<f64>,
    /// dist²(σ̃a + σ̃*b, ς·A)
    pub dist_sq: f64,
    /// unconstrained least-squares residual |a|² + b² − |σ̃a + σ̃*b|²
    pub residual: f64,
}

impl StepData {
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn tau(&self, a: &DVector<f64>, b: f64) -> DVector<f64> {
        &self.tr.sigma_tilde * a + self.tr.sigma_star_tilde.scale(b)
    }

    /// The projected response ς⁻¹P(σ̃a + σ̃*b).
    ///
    /// Since |ςπ|² = |σπ|² + (σ*·π)², minimizing the quadratic loss over A is the
    /// projection of τ = σ̃a + σ̃*b onto ς·A plus a residual independent of π.
    pub fn respond(&self, a: &DVector<f64>, b: f64) -> Response {
        let tau = self.tau(a, b);
        let p = self.set.project(&tau);
        let dist_sq = (&tau - &p).norm_squared();
        let pi = &self.tr.varsigma_inv * p;
        let y = &self.tr.varsigma_inv * &tau;
        let fit_a = DVector::from_iterator(a.len(), (0..a.len()).map(|k| self.sigma[k] * y[k] - a[k]));
        let fit_b = self.sigma_star.dot(&y) - b;
        Response { pi, dist_sq, residual: fit_a.norm_squared() + fit_b * fit_b }
    }

    /// Quadratic loss |a − σπ|² + (b − σ*·π)² of a candidate π.
    pub fn loss(&self, pi: &DVector<f64>, a: &DVector<f64>, b: f64) -> f64 {
        let ra: f64 = (0..a.len()).map(|k| (a[k] - self.sigma[k] * pi[k]).powi(2)).sum();
        ra + (b - self.sigma_star.dot(pi)).powi(2)
    }

    /// Distance of π from A (not ς·A).
    pub fn constraint_residual(&self, pi: &DVector<f64>) -> f64 {
        let unit = ScaledSet::identity(self.set.set().clone(), pi.len()).expect("validated set");
        (pi - unit.project(pi)).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityValue {
    pub value: f64,
    pub saturated: bool,
}

/// −exp(−(x_T − benchmark)/η), exponent clamped at ±700.
pub fn utility(x_t: f64, benchmark: f64, eta: f64) -> UtilityValue {
    let e = -(x_t - benchmark) / eta;
    let clamped = e.clamp(-700.0, 700.0);
    UtilityValue { value: -clamped.exp(), saturated: clamped != e }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WealthSample {
    pub terminal: Vec<f64>,
    /// per path, wealth at every knot (only when requested)
    pub paths: Option<Vec<Vec<f64>>>,
}

fn check_strategy(steps: &[StepData], strategy: &[Vec<f64>], grid: &TimeGrid) -> Result<()> {
    if strategy.len() != grid.steps {
        return param(format!("strategy has {} values, grid has {} steps", strategy.len(), grid.steps));
    }
    for (k, (sd, pi)) in steps.iter().zip(strategy).enumerate() {
        if pi.len() != sd.dim() {
            return param(format!("strategy at step {k} has wrong dimension"));
        }
        let r = sd.constraint_residual(&DVector::from_column_slice(pi));
        if r > 1e-9 {
            return param(format!("strategy at step {k} leaves the constraint set by {r:e}"));
        }
    }
    Ok(())
}

/// Euler simulation of one agent's wealth; noise keyed as agent 0.
pub fn simulate_wealth(
    coeffs: &AgentCoeffs,
    strategy: &[Vec<f64>],
    grid: &TimeGrid,
    paths: usize,
    with_common_noise: bool,
    seed: u64,
    keep_paths: bool,
) -> Result<WealthSample> {
    let steps = coeffs.steps(grid)?;
    check_strategy(&steps, strategy, grid)?;
    let xi = coeffs.xi.fixed()?;
    let out: Vec<(f64, Option<Vec<f64>>)> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let noise = PathNoise::new(seed, p, &[0], coeffs.dim(), grid, with_common_noise);
            let mut x = xi;
            let mut traj = keep_paths.then(|| vec![xi]);
            for (k, sd) in steps.iter().enumerate() {
                x += increment(sd, &strategy[k], noise.idio(0, k), noise.star(k), grid.dt());
                if let Some(t) = traj.as_mut() {
                    t.push(x);
                }
            }
            (x, traj)
        })
        .collect();
    let terminal = out.iter().map(|o| o.0).collect();
    let paths = keep_paths.then(|| out.into_iter().map(|o| o.1.unwrap()).collect());
    Ok(WealthSample { terminal, paths })
}

/// Joint simulation with a shared common noise; returns terminal wealth [path][agent].
pub fn simulate_wealth_joint(
    coeffs: &[AgentCoeffs],
    strategies: &[Vec<Vec<f64>>],
    grid: &TimeGrid,
    paths: usize,
    with_common_noise: bool,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if coeffs.len() != strategies.len() {
        return param("one strategy per agent required");
    }
    let steps: Vec<Vec<StepData>> = coeffs.iter().map(|c| c.steps(grid)).collect::<Result<_>>()?;
    for (s, st) in steps.iter().zip(strategies) {
        check_strategy(s, st, grid)?;
    }
    let xi: Vec<f64> = coeffs.iter().map(|c| c.xi.fixed()).collect::<Result<_>>()?;
    let agents: Vec<u64> = (0..coeffs.len() as u64).collect();
    let d = coeffs.first().map_or(1, |c| c.dim());
    if coeffs.iter().any(|c| c.dim() != d) {
        return param("joint simulation needs a common asset dimension");
    }
    Ok((0..paths)
        .into_par_iter()
        .map(|p| {
            let noise = PathNoise::new(seed, p, &agents, d, grid, with_common_noise);
            (0..coeffs.len())
                .map(|a| {
                    let mut x = xi[a];
                    for (k, sd) in steps[a].iter().enumerate() {
                        x += increment(sd, &strategies[a][k], noise.idio(a, k), noise.star(k), grid.dt());
                    }
                    x
                })
                .collect()
        })
        .collect())
}

#[inline]
fn increment(sd: &StepData, pi: &[f64], dw: &[f64], dw_star: f64, dt: f64) -> f64 {
    let mut inc = 0.0;
    for k in 0..pi.len() {
        inc += pi[k] * sd.sigma[k] * (sd.theta[k] * dt + dw[k]);
    }
    for k in 0..pi.len() {
        inc += pi[k] * sd.sigma_star[k] * dw_star;
    }
    inc
}

/// Brownian increments of one path for a set of agents plus the common noise.
pub(crate) struct PathNoise {
    d: usize,
    steps: usize,
    idio: Vec<f64>,
    star: Vec<f64>,
}

impl PathNoise {
    pub(crate) fn new(seed: u64, path: usize, agents: &[u64], d: usize, grid: &TimeGrid, common: bool) -> Self {
        let sq = grid.dt().sqrt();
        let mut idio = vec![0.0; agents.len() * grid.steps * d];
        for (a, chunk) in agents.iter().zip(idio.chunks_mut(grid.steps * d)) {
            rng::normals(seed, &[rng::TAG_IDIO, path as u64, *a], chunk);
        }
        idio.iter_mut().for_each(|x| *x *= sq);
        let mut star = vec![0.0; grid.steps];
        if common {
            rng::normals(seed, &[rng::TAG_STAR, path as u64], &mut star);
            star.iter_mut().for_each(|x| *x *= sq);
        }
        PathNoise { d, steps: grid.steps, idio, star }
    }

    #[inline]
    pub(crate) fn idio(&self, slot: usize, k: usize) -> &[f64] {
        let o = (slot * self.steps + k) * self.d;
        &self.idio[o..o + self.d]
    }

    #[inline]
    pub(crate) fn star(&self, k: usize) -> f64 {
        self.star[k]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.3, 0.4, -0.7, 0.4, 1.1, 0.2, -0.7, 0.2, 3.9]);
        let e = sym_eigen(&m);
        let back = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues) * e.eigenvectors.transpose();
        assert!((back - &m).amax() < 1e-14);
        assert!((e.eigenvectors.transpose() * &e.eigenvectors - DMatrix::identity(3, 3)).amax() < 1e-14);
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn varsigma_examples() {
        let t = SigmaTransforms::new(&[1.0], &[1.0]).unwrap();
        let r2 = 2f64.sqrt();
        assert!((t.varsigma[(0, 0)] - r2).abs() < 1e-14);
        assert!((t.sigma_tilde[(0, 0)] - 1.0 / r2).abs() < 1e-14);
        assert!((t.sigma_star_tilde[0] - 1.0 / r2).abs() < 1e-14);
        let t = SigmaTransforms::new(&[1.5, 0.7], &[0.0, 0.0]).unwrap();
        assert!((&t.sigma_tilde - DMatrix::identity(2, 2)).amax() < 1e-14);
        assert!((t.varsigma[(1, 1)] - 0.7).abs() < 1e-14);
        let t = SigmaTransforms::new(&[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert!((&t.varsigma - DMatrix::from_diagonal(&v(&[r2, 2.0]))).amax() < 1e-14);
    }

    #[test]
    fn projection_examples() {
        let id = DMatrix::identity(2, 2);
        assert_eq!(project(&ConvexSet::FullSpace, &id, &v(&[3.0, -1.0])).unwrap(), v(&[3.0, -1.0]));
        let b = ConvexSet::Box { lower: vec![0.0], upper: vec![0.05] };
        assert_eq!(project(&b, &DMatrix::identity(1, 1), &v(&[0.1])).unwrap()[0], 0.05);
        let ball = ConvexSet::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        let p = project(&ball, &id, &v(&[3.0, 4.0])).unwrap();
        assert!((p - v(&[0.6, 0.8])).amax() < 1e-15);
        let h = ConvexSet::HalfSpace { normal: vec![1.0, 1.0], offset: 1.0 };
        let p = project(&h, &id, &v(&[2.0, 2.0])).unwrap();
        assert!((p - v(&[0.5, 0.5])).amax() < 1e-15);
        let p = project(&ConvexSet::Orthant, &id, &v(&[-2.0, 2.0])).unwrap();
        assert_eq!(p, v(&[0.0, 2.0]));
    }

    #[test]
    fn ellipsoid_projection_matches_kkt() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let ball = ConvexSet::Ball { center: vec![0.1, -0.2], radius: 0.3 };
        let set = ScaledSet::new(ball, s.clone()).unwrap();
        let x = v(&[3.0, -1.0]);
        let p = set.project(&x);
        // p = ς w with |w − c| = r and x − p ∥ ς⁻¹-normal: (x−p) = μ ς⁻¹ (w − c)
        let w = s.clone().try_inverse().unwrap() * &p;
        let wc = &w - v(&[0.1, -0.2]);
        assert!((wc.norm() - 0.3).abs() < 1e-12);
        let normal = s.try_inverse().unwrap() * &wc;
        let r = &x - &p;
        let cross = r[0] * normal[1] - r[1] * normal[0];
        assert!(cross.abs() < 1e-10 * r.norm() * normal.norm());
        assert!(r.dot(&normal) > 0.0);
    }

    #[test]
    fn response_at_unconstrained_point_has_zero_distance() {
        let c = AgentCoeffs::scalar(1.0, 1.0, 0.2, 0.5, 0.0, ConvexSet::FullSpace);
        let sd = c.step(0).unwrap();
        let r = sd.respond(&v(&[0.1]), 0.0);
        assert!((r.pi[0] - 0.05).abs() < 1e-15);
        assert_eq!(r.dist_sq, 0.0);
        // |a|² + b² − |τ|² = 0.01 − 0.005
        assert!((r.residual - 0.005).abs() < 1e-15);
    }

    #[test]
    fn utility_examples() {
        assert_eq!(utility(1.0, 1.0, 0.3).value, -1.0);
        assert!((utility(0.5, 0.0, 0.5).value + (-1.0f64).exp()).abs() < 1e-15);
        assert!((utility(-0.015, 0.0, 0.5).value + 0.03f64.exp()).abs() < 1e-15);
        let u = utility(-1e6, 0.0, 0.5);
        assert!(u.saturated && u.value.is_finite() && u.value < 0.0);
    }

    #[test]
    fn simulation_examples() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let c = AgentCoeffs::scalar(1.0, 1.0, 0.2, 0.5, 1.0, ConvexSet::FullSpace);
        let zero = simulate_wealth(&c, &vec![vec![0.0]; 20], &grid, 100, true, 1, false).unwrap();
        assert!(zero.terminal.iter().all(|&x| x == 1.0));

        let c0 = AgentCoeffs::scalar(1.0, 0.0, 0.0, 0.5, 0.0, ConvexSet::FullSpace);
        let n = 20_000;
        let s = simulate_wealth(&c0, &vec![vec![1.0]; 20], &grid, n, false, 2, false).unwrap();
        let m = s.terminal.iter().sum::<f64>() / n as f64;
        assert!(m.abs() < 3.0 / (n as f64).sqrt());

        let c1 = AgentCoeffs::scalar(1.0, 0.0, 0.2, 0.5, 0.0, ConvexSet::FullSpace);
        let s = simulate_wealth(&c1, &vec![vec![0.1]; 20], &grid, n, true, 3, true).unwrap();
        let m = s.terminal.iter().sum::<f64>() / n as f64;
        let sd = (s.terminal.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((m - 0.02).abs() < 3.0 * sd / (n as f64).sqrt());
        assert_eq!(s.paths.as_ref().unwrap()[0].len(), 21);

        let boxed = AgentCoeffs::scalar(1.0, 0.0, 0.2, 0.5, 0.0, ConvexSet::Box { lower: vec![0.0], upper: vec![0.05] });
        assert!(simulate_wealth(&boxed, &vec![vec![0.1]; 20], &grid, 10, true, 3, false).is_err());
    }

    #[test]
    fn joint_simulation_shares_common_noise() {
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let c = AgentCoeffs::scalar(1.0, 1.0, 0.0, 0.5, 0.0, ConvexSet::FullSpace);
        let cs = vec![c.clone(), c];
        let x = simulate_wealth_joint(&cs, &[vec![vec![1.0]; 5], vec![vec![1.0]; 5]], &grid, 3, true, 9).unwrap();
        let single = simulate_wealth(&cs[0], &vec![vec![1.0]; 5], &grid, 3, true, 9, false).unwrap();
        for p in 0..3 {
            assert_eq!(x[p][0], single.terminal[p]);
            assert_ne!(x[p][0], x[p][1]);
        }
    }

    #[test]
    fn coefficient_validation() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let mut c = AgentCoeffs::scalar(1.0, 0.0, 0.2, 0.5, 0.0, ConvexSet::FullSpace);
        assert!(c.validate(&grid).is_ok());
        c.eta = 1.5;
        assert!(c.validate(&grid).is_err());
        c.eta = 0.5;
        c.theta = TimeSeries::Steps(vec![vec![0.1]; 3]);
        assert!(c.validate(&grid).is_err());
        c.theta = TimeSeries::Steps(vec![vec![0.1], vec![0.3]]);
        assert!(c.validate(&grid).is_ok());
        let js = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<AgentCoeffs>(&js).unwrap(), c);
        assert!(serde_json::from_str::<AgentCoeffs>(&js.replace("\"eta\"", "\"etta\"")).is_err());
    }
}
