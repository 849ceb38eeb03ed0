//! Algebra of the steady state: the discriminant, the fixed-point function
//! `g(λ)` and its roots, the `(μ, λ) ↔ (k_nf, k_pf)` conversion, and the forward
//! solution `R(x) = λ σ₀(μ x)`.

use serde::{Deserialize, Serialize};

use crate::elliptic::GroundState;
use crate::error::{Error, Result};
use crate::numerics::{find_root_bracketed, format_sig, quadrature_trapezoid};

/// Known constants of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub alpha: f64,
    /// Lateral diffusion rate `D`.
    pub diffusion: f64,
    /// Total free ROP1 `R_tot`.
    pub r_tot: f64,
    /// Half-length of the observation window.
    pub l0: f64,
}

impl ModelConstants {
    pub fn new(alpha: f64, diffusion: f64, r_tot: f64, l0: f64) -> Result<Self> {
        let c = ModelConstants { alpha, diffusion, r_tot, l0 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::InvalidInput(format!("alpha must be > 1, got {}", self.alpha)));
        }
        for (name, v) in [("D", self.diffusion), ("R_tot", self.r_tot), ("L0", self.l0)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Simulation constants: `alpha = 1.2`, `D = 0.1`, `R_tot = 797`, window `[-15, 15]`.
    pub fn simulation() -> Self {
        ModelConstants { alpha: 1.2, diffusion: 0.1, r_tot: 797.0, l0: 15.0 }
    }

    /// Constants used for the pollen tube data: `alpha = 1.2`, `D = 0.2`, `R_tot = 30`.
    pub fn pollen_data() -> Self {
        ModelConstants { alpha: 1.2, diffusion: 0.2, r_tot: 30.0, l0: 10.36 }
    }
}

/// Feedback rates `(k_nf, k_pf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub k_nf: f64,
    pub k_pf: f64,
}

impl ModelParams {
    pub fn new(k_nf: f64, k_pf: f64) -> Result<Self> {
        if !(k_nf > 0.0) || !(k_pf > 0.0) {
            return Err(Error::InvalidInput(format!("k_nf and k_pf must be positive, got ({k_nf}, {k_pf})")));
        }
        Ok(ModelParams { k_nf, k_pf })
    }
}

/// Spatial scale `μ = sqrt(k_nf/D)` and amplitude `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    pub mu: f64,
    pub lambda: f64,
}

impl NaturalParams {
    pub fn new(mu: f64, lambda: f64) -> Self {
        NaturalParams { mu, lambda }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.mu, self.lambda]
    }

    pub fn from_array(a: [f64; 2]) -> Self {
        NaturalParams { mu: a[0], lambda: a[1] }
    }
}

/// Which positive root of `g` to use when two exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Smaller,
    #[default]
    Larger,
}

impl std::str::FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smaller" => Ok(Branch::Smaller),
            "larger" => Ok(Branch::Larger),
            other => Err(Error::InvalidInput(format!("unknown branch '{other}' (expected smaller|larger)"))),
        }
    }
}

/// Forward solution on `[-L0, L0]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Profile {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// `1 - ∫R / R_tot` over the window.
    pub lambda_prime: f64,
    pub natural: NaturalParams,
}

impl Profile {
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Max over interior grid points of
    /// `|-D R'' + k_nf R - k_pf R^α (1 - ∫R/R_tot)|`, with `R''` by central
    /// differences and the integral by the trapezoid rule.
    pub fn ide_residual(&self, p: &ModelParams, c: &ModelConstants) -> Result<f64> {
        let integral = quadrature_trapezoid(&self.grid, &self.values)?;
        let factor = 1.0 - integral / c.r_tot;
        let v = &self.values;
        let mut max = 0.0f64;
        for i in 1..v.len().saturating_sub(1) {
            let h1 = self.grid[i] - self.grid[i - 1];
            let h2 = self.grid[i + 1] - self.grid[i];
            let r2 = 2.0 * (h1 * v[i + 1] - (h1 + h2) * v[i] + h2 * v[i - 1]) / (h1 * h2 * (h1 + h2));
            let res = -c.diffusion * r2 + p.k_nf * v[i] - p.k_pf * v[i].powf(c.alpha) * factor;
            max = max.max(res.abs());
        }
        Ok(max)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,R")?;
        for (x, r) in self.grid.iter().zip(&self.values) {
            writeln!(out, "{},{}", format_sig(*x, 6), format_sig(*r, 6))?;
        }
        Ok(())
    }
}

/// `Λ = k_nf/k_pf - (1/α) ((α-1)/α · sqrt(k_nf/D) · R_tot/‖σ₀‖₁)^{α-1}`.
pub fn discriminant(p: &ModelParams, c: &ModelConstants, l1: f64) -> f64 {
    let a = c.alpha;
    p.k_nf / p.k_pf - lambda_crit(p, c, l1).powf(a - 1.0) / a
}

/// `g(λ) = k_nf/k_pf - λ^{α-1} + λ^α sqrt(D/k_nf) ‖σ₀‖₁/R_tot`.
pub fn g_value(lambda: f64, p: &ModelParams, c: &ModelConstants, l1: f64) -> f64 {
    let a = c.alpha;
    p.k_nf / p.k_pf - lambda.powf(a - 1.0) + lambda.powf(a) * (c.diffusion / p.k_nf).sqrt() * l1 / c.r_tot
}

/// Stationary point of `g`: `(α-1)/α · sqrt(k_nf/D) · R_tot/‖σ₀‖₁`.
pub fn lambda_crit(p: &ModelParams, c: &ModelConstants, l1: f64) -> f64 {
    (c.alpha - 1.0) / c.alpha * (p.k_nf / c.diffusion).sqrt() * c.r_tot / l1
}

/// Positive roots of `g`, ascending: none when `Λ > tol`, the double root
/// `λ_c` when `|Λ| <= tol`, otherwise one root on each side of `λ_c`.
pub fn solve_lambda_roots(p: &ModelParams, c: &ModelConstants, l1: f64, tol: f64) -> Vec<f64> {
    let disc = discriminant(p, c, l1);
    let lc = lambda_crit(p, c, l1);
    if disc > tol {
        return Vec::new();
    }
    if disc.abs() <= tol {
        return vec![lc];
    }
    let g = |l: f64| g_value(l, p, c, l1);
    // bisect to full precision
    let root_tol = 0.0;
    let small = find_root_bracketed(g, 0.0, lc, root_tol).expect("g(0) > 0 > g(lambda_c)");
    let mut hi = 2.0 * lc;
    while g(hi) <= 0.0 {
        hi *= 2.0;
    }
    let large = find_root_bracketed(g, lc, hi, root_tol).expect("g(lambda_c) < 0 < g(hi)");
    vec![small, large]
}

/// `Λ*(μ, λ) = μ R_tot - λ ‖σ₀‖₁`.
pub fn feasibility_margin(n: &NaturalParams, c: &ModelConstants, l1: f64) -> f64 {
    n.mu * c.r_tot - n.lambda * l1
}

/// `μ > 0`, `λ > 0` and `Λ* > 0`.
pub fn feasible(n: &NaturalParams, c: &ModelConstants, l1: f64) -> bool {
    n.mu > 0.0 && n.lambda > 0.0 && feasibility_margin(n, c, l1) > 0.0
}

/// `k_nf = D μ²`, `k_pf = D μ² / (λ^{α-1} - λ^α ‖σ₀‖₁ / (μ R_tot))`.
pub fn natural_to_model(n: &NaturalParams, c: &ModelConstants, l1: f64) -> Result<ModelParams> {
    if !feasible(n, c, l1) {
        return Err(Error::Infeasible { mu: n.mu, lambda: n.lambda, margin: feasibility_margin(n, c, l1) });
    }
    let a = c.alpha;
    let k_nf = c.diffusion * n.mu * n.mu;
    let denom = n.lambda.powf(a - 1.0) - n.lambda.powf(a) * l1 / (n.mu * c.r_tot);
    Ok(ModelParams { k_nf, k_pf: k_nf / denom })
}

pub fn model_to_natural(
    p: &ModelParams,
    c: &ModelConstants,
    gs: &GroundState,
    branch: Branch,
) -> Result<NaturalParams> {
    model_to_natural_l1(p, c, gs.l1_norm(), branch)
}

pub fn model_to_natural_l1(p: &ModelParams, c: &ModelConstants, l1: f64, branch: Branch) -> Result<NaturalParams> {
    let roots = solve_lambda_roots(p, c, l1, 1e-14);
    let lambda = match (roots.as_slice(), branch) {
        ([], _) => return Err(Error::NoSteadyState { discriminant: discriminant(p, c, l1) }),
        ([only], _) => *only,
        ([small, _], Branch::Smaller) => *small,
        ([_, large], Branch::Larger) => *large,
        _ => unreachable!("at most two roots"),
    };
    Ok(NaturalParams { mu: (p.k_nf / c.diffusion).sqrt(), lambda })
}

/// `R(x) = λ σ₀(μ x)`.
pub fn eval_r(n: &NaturalParams, gs: &GroundState, x: f64) -> f64 {
    n.lambda * gs.eval(n.mu * x)
}

/// `(∂R/∂μ, ∂R/∂λ) = (λ x σ₀'(μx), σ₀(μx))`.
pub fn grad_r(n: &NaturalParams, gs: &GroundState, x: f64) -> [f64; 2] {
    let z = n.mu * x;
    [n.lambda * x * gs.eval_deriv(z), gs.eval(z)]
}

/// Steady state for given rates, tabulated on `[-L0, L0]` at `grid_step`.
pub fn forward_solve(
    p: &ModelParams,
    c: &ModelConstants,
    gs: &GroundState,
    branch: Branch,
    grid_step: f64,
) -> Result<Profile> {
    c.validate()?;
    if !(grid_step > 0.0) {
        return Err(Error::InvalidInput("grid_step must be positive".into()));
    }
    let natural = model_to_natural(p, c, gs, branch)?;
    let n = (c.l0 / grid_step).round().max(1.0) as usize;
    let h = c.l0 / n as f64;
    let grid: Vec<f64> = (0..=2 * n).map(|i| (i as f64 - n as f64) * h).collect();
    let values: Vec<f64> = grid.iter().map(|&x| eval_r(&natural, gs, x)).collect();
    let integral = quadrature_trapezoid(&grid, &values)?;
    let lambda_prime = 1.0 - integral / c.r_tot;
    if !(lambda_prime > 0.0 && lambda_prime < 1.0) {
        return Err(Error::InvalidInput(format!("forward solution has lambda' = {lambda_prime} outside (0, 1)")));
    }
    Ok(Profile { grid, values, lambda_prime, natural })
}
