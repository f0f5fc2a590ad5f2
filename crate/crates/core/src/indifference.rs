//! Competition-indifference capital: the closed form and a Monte Carlo
//! bisection on the defining utility identity.

use serde::{Deserialize, Serialize};

use crate::bsde::baseline_y0;
use crate::error::{param, Error, Result};
use crate::fixed_point_finite::{step_table, FiniteEquilibrium};
use crate::graphon::{Graphon, Weights};
use crate::graphon_game::{benchmark_mean, GraphonEquilibrium, LabelGrid};
use crate::market::{simulate_wealth_joint, utility, AgentCoeffs, TimeGrid};
use crate::optim::bisect;

pub const FORM_TOL: f64 = 1e-8;
pub const BRACKET: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Bisection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// largest gap between ξ̄ + γ_0 − Y^base_0 and η log(V^comp/V^base)
    #[serde(skip_serializing_if = "Option::is_none")]
    pub form_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bracket_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndifferenceResult {
    /// per agent, per label, or a single entry for a bisection
    pub p: Vec<f64>,
    pub y_base_0: Vec<f64>,
    pub method: Method,
    pub diagnostics: Diagnostics,
}

fn two_forms(xi: f64, bench: f64, gamma: f64, y_base: f64, v_comp: f64, eta: f64) -> (f64, f64) {
    let closed = bench + gamma - y_base;
    let v_base = utility(xi, y_base, eta).value;
    let logs = eta * ((-v_comp).ln() - (-v_base).ln());
    (closed, (closed - logs).abs())
}

fn check(gap: f64, what: &str) -> Result<()> {
    if gap > FORM_TOL {
        return Err(Error::Inconsistent { what: what.into(), difference: gap });
    }
    Ok(())
}

/// p^{i,n} = ξ̄^i + γ^i_0 − Y^base_0, cross-checked against η(log(−V^comp) − log(−V^base)).
pub fn indifference_capital_finite(eq: &FiniteEquilibrium, coeffs: &[AgentCoeffs], weights: &Weights, grid: &TimeGrid) -> Result<IndifferenceResult> {
    if coeffs.len() != eq.n || weights.n() != eq.n {
        return param("equilibrium, coefficients and weights disagree on n");
    }
    let y_base: Vec<f64> = coeffs.iter().map(|c| baseline_y0(c, grid)).collect::<Result<_>>()?;
    let mut p = Vec::with_capacity(eq.n);
    let mut worst: f64 = 0.0;
    for i in 0..eq.n {
        let bench: f64 = (0..eq.n).filter(|&j| j != i).map(|j| weights.get(i, j) * coeffs[j].xi.mean()).sum();
        let (closed, gap) = two_forms(coeffs[i].xi.fixed()?, bench, eq.gamma0[i], y_base[i], eq.value0[i], coeffs[i].eta);
        worst = worst.max(gap);
        p.push(closed);
    }
    check(worst, "finite indifference capital")?;
    Ok(IndifferenceResult { p, y_base_0: y_base, method: Method::ClosedForm, diagnostics: Diagnostics { form_gap: Some(worst), ..Default::default() } })
}

/// p^u = ∫E[ξ^v]G(u,v)dv + Y^u_0 − Y^base_0 per label.
pub fn indifference_capital_graphon(eq: &GraphonEquilibrium, g: &Graphon, grid: &LabelGrid, tgrid: &TimeGrid, coeffs: &[AgentCoeffs]) -> Result<IndifferenceResult> {
    if eq.y0.len() != grid.m {
        return param("equilibrium does not match the label grid");
    }
    let bench = benchmark_mean(g, grid, coeffs)?;
    let per_label = |m: usize| if coeffs.len() == 1 { &coeffs[0] } else { &coeffs[m] };
    let mut y_base = Vec::with_capacity(grid.m);
    let mut p = Vec::with_capacity(grid.m);
    let mut worst: f64 = 0.0;
    for m in 0..grid.m {
        let c = per_label(m);
        let yb = baseline_y0(c, tgrid)?;
        let (closed, gap) = two_forms(c.xi.fixed()?, bench[m], eq.y0[m], yb, eq.value0[m], c.eta);
        worst = worst.max(gap);
        y_base.push(yb);
        p.push(closed);
    }
    check(worst, "graphon indifference capital")?;
    Ok(IndifferenceResult { p, y_base_0: y_base, method: Method::ClosedForm, diagnostics: Diagnostics { form_gap: Some(worst), ..Default::default() } })
}

/// Solves Ĵ(ξ^i − p, 0) = Ĵ(ξ^i, benchmark) by bisection, both sides estimated
/// on the same Brownian paths. The isolated agent plays its optimal strategy
/// without competition; everyone else plays the equilibrium.
pub fn indifference_bisection(
    i: usize,
    eq: &FiniteEquilibrium,
    coeffs: &[AgentCoeffs],
    weights: &Weights,
    grid: &TimeGrid,
    mc_paths: usize,
    seed: u64,
    tol: f64,
) -> Result<IndifferenceResult> {
    let n = eq.n;
    if i >= n || coeffs.len() != n || weights.n() != n {
        return param("agent index or dimensions out of range");
    }
    if mc_paths < 2 {
        return param("need at least two Monte Carlo paths");
    }
    let table = step_table(coeffs, grid)?;
    let eta = coeffs[i].eta;
    let common = table.iter().flatten().any(|s| s.sigma_star.amax() != 0.0);
    let joint = simulate_wealth_joint(coeffs, &eq.pi, grid, mc_paths, common, seed)?;
    let base_strategy: Vec<Vec<f64>> = table[i].iter().map(|sd| sd.respond(&sd.theta.scale(sd.eta), 0.0).pi.as_slice().to_vec()).collect();
    let mut strategies = eq.pi.clone();
    strategies[i] = base_strategy;
    let alone = simulate_wealth_joint(coeffs, &strategies, grid, mc_paths, common, seed)?;

    let comp: Vec<f64> = joint
        .iter()
        .map(|x| {
            let bench: f64 = (0..n).filter(|&j| j != i).map(|j| weights.get(i, j) * x[j]).sum();
            utility(x[i], bench, eta).value
        })
        .collect();
    let base: Vec<f64> = alone.iter().map(|x| utility(x[i], 0.0, eta).value).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let j_comp = mean(&comp);
    let j_base = mean(&base);
    // J(ξ − p, 0) = e^{p/η} J(ξ, 0) under exponential utility
    let f = |p: f64| j_base * (p / eta).min(700.0).exp() - j_comp;
    let root = bisect(f, BRACKET.0, BRACKET.1, tol, 200)
        .ok_or_else(|| Error::Range(format!("no sign change of the utility gap on [{}, {}]", BRACKET.0, BRACKET.1)))?;

    // delta method for η(log(−Ĵ_comp) − log(−Ĵ_base)) on common paths
    let m = mc_paths as f64;
    let infl: Vec<f64> = comp.iter().zip(&base).map(|(c, b)| eta * (c / j_comp - b / j_base)).collect();
    let mu = mean(&infl);
    let var = infl.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1.0);
    let y_base = baseline_y0(&coeffs[i], grid)?;
    Ok(IndifferenceResult {
        p: vec![root],
        y_base_0: vec![y_base],
        method: Method::Bisection,
        diagnostics: Diagnostics { std_error: Some((var / m).sqrt()), paths: Some(mc_paths), bracket_width: Some(tol), ..Default::default() },
    })
}

/// Convenience: the closed form of agent i when coefficients are deterministic.
pub fn closed_form_agent(eq: &FiniteEquilibrium, coeffs: &[AgentCoeffs], weights: &Weights, grid: &TimeGrid, i: usize) -> Result<f64> {
    let r = indifference_capital_finite(eq, coeffs, weights, grid)?;
    r.p.get(i).copied().ok_or_else(|| Error::Parameter(format!("agent {i} out of range")))
}
