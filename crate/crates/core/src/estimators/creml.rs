use super::cmm::{cmm_fit, CmmOptions};
use super::{MixedFit, MixedMethod, TubeData};
use crate::elliptic::GroundState;
use crate::error::{Error, Result};
use crate::numerics::{minimize_simplex, polish_newton, psd_project, Mat2, SimplexOptions, SymMat2};
use crate::steady_state::{eval_r, feasible, grad_r, natural_to_model, ModelConstants, NaturalParams};

/// Pooled OLS residual at or below this fraction of `Σ y*²` is treated as an
/// exact fit; below it `c - bᵀA⁻¹b` is dominated by cancellation.
const EXACT_FIT_REL: f64 = 1e-12;
/// Relative eigenvalue threshold for flagging a boundary `Σ̂`.
const BOUNDARY_REL: f64 = 1e-8;
const REML_DIAMETER_TOL: f64 = 1e-9;
const REML_MAX_RUNS: usize = 20;

/// Linear surrogate of one tube around a BLUP: `y* ≈ Z θᵢ + ε`.
#[derive(Debug, Clone)]
pub struct LinearizedTube {
    pub tube_id: String,
    pub pseudo_y: Vec<f64>,
    /// Row `j` is `∇R(x_j)ᵀ` at the expansion point.
    pub design: Vec<[f64; 2]>,
    gram: SymMat2,
    zty: [f64; 2],
    yty: f64,
}

impl LinearizedTube {
    pub fn new(tube_id: impl Into<String>, pseudo_y: Vec<f64>, design: Vec<[f64; 2]>) -> Result<Self> {
        if pseudo_y.len() != design.len() {
            return Err(Error::LengthMismatch(pseudo_y.len(), design.len()));
        }
        let mut gram = SymMat2::ZERO;
        let mut zty = [0.0; 2];
        let mut yty = 0.0;
        for (row, &y) in design.iter().zip(&pseudo_y) {
            gram = gram.add(&SymMat2::outer(*row));
            zty[0] += row[0] * y;
            zty[1] += row[1] * y;
            yty += y * y;
        }
        Ok(LinearizedTube { tube_id: tube_id.into(), pseudo_y, design, gram, zty, yty })
    }

    pub fn len(&self) -> usize {
        self.pseudo_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_y.is_empty()
    }

    /// `Zᵀ Z`.
    pub fn gram(&self) -> SymMat2 {
        self.gram
    }

    /// `Zᵀ y*`.
    pub fn zty(&self) -> [f64; 2] {
        self.zty
    }
}

/// First-order expansion of `R` around `blup`:
/// `y*_j = y_j - R(x_j; blup) + ∇R(x_j; blup)ᵀ blup`.
pub fn linearize_tube(tube: &TubeData, blup: &NaturalParams, gs: &GroundState) -> LinearizedTube {
    let mut design = Vec::with_capacity(tube.len());
    let mut pseudo = Vec::with_capacity(tube.len());
    for (&x, &y) in tube.positions.iter().zip(&tube.intensities) {
        let row = grad_r(blup, gs, x);
        pseudo.push(y - eval_r(blup, gs, x) + row[0] * blup.mu + row[1] * blup.lambda);
        design.push(row);
    }
    LinearizedTube::new(tube.tube_id.clone(), pseudo, design).expect("lengths match by construction")
}

#[derive(Debug, Clone, Copy)]
pub struct RemlEstimate {
    pub sigma_between: SymMat2,
    pub sigma2: f64,
    /// `Σ̂` is singular (an eigenvalue sits at zero).
    pub boundary: bool,
    /// Profiled `-2 log L_REML` up to a constant.
    pub criterion: f64,
    pub converged: bool,
    /// `σ̂² · mean(Gᵢ⁻¹)`: sampling covariance of a single tube's OLS fit,
    /// the resolution below which variance components are not determined.
    pub within_scale: SymMat2,
}

fn lower(l: &[f64]) -> Mat2 {
    Mat2([[l[0], 0.0], [l[1], l[2]]])
}

fn sym(m: &Mat2) -> SymMat2 {
    SymMat2::new(m.0[0][0], 0.5 * (m.0[0][1] + m.0[1][0]), m.0[1][1])
}

// Per-tube pieces of W = I + Z F Fᵀ Zᵀ (times `scale` on the identity), via
// P = scale·I + Fᵀ G F: returns (Zᵀ W⁻¹ Z, Zᵀ W⁻¹ y, y W⁻¹ y, log det P),
// each multiplied by `scale`.
fn woodbury(t: &LinearizedTube, f: &Mat2, scale: f64) -> Option<(SymMat2, [f64; 2], f64, f64)> {
    let g = t.gram;
    let gf = g.to_mat2().mul(f);
    let p = SymMat2::IDENTITY.scale(scale).add(&sym(&f.transpose().mul(&gf)));
    let det = p.det();
    if !(det > 0.0) {
        return None;
    }
    let p_inv = p.inverse()?;
    let fth = f.transpose().mul_vec(t.zty);
    let a = g.sub(&gf.transpose().congruence(&p_inv));
    let corr = gf.mul_vec(p_inv.mul_vec(fth));
    let b = [t.zty[0] - corr[0], t.zty[1] - corr[1]];
    let c = t.yty - p_inv.quad_form(fth);
    Some((a, b, c, det.ln()))
}

// Pooled pieces Σ Zᵢᵀ W⁻¹ Zᵢ etc. for Ψ = F Fᵀ; None when any P is singular.
fn pooled(tubes: &[LinearizedTube], f: &Mat2, scale: f64) -> Option<(SymMat2, [f64; 2], f64, f64)> {
    let mut acc = (SymMat2::ZERO, [0.0; 2], 0.0, 0.0);
    for t in tubes {
        let (a, b, c, ld) = woodbury(t, f, scale)?;
        acc.0 = acc.0.add(&a);
        acc.1[0] += b[0];
        acc.1[1] += b[1];
        acc.2 += c;
        acc.3 += ld;
    }
    Some(acc)
}

// Profiled REML criterion for Ψ = L Lᵀ and its residual quadratic form q.
fn reml_criterion(tubes: &[LinearizedTube], l: &Mat2, n_total: usize) -> Option<(f64, f64)> {
    let (a, b, c, logdet_p) = pooled(tubes, l, 1.0)?;
    let det_a = a.det();
    if !(det_a > 0.0) {
        return None;
    }
    let q = c - a.inverse()?.quad_form(b);
    if !(q > 0.0) {
        return None;
    }
    Some(((n_total - 2) as f64 * q.ln() + logdet_p + det_a.ln(), q))
}

fn lower_cholesky(m: &SymMat2) -> [f64; 3] {
    let l11 = m.a11.max(0.0).sqrt();
    let l21 = if l11 > 0.0 { m.a12 / l11 } else { 0.0 };
    let l22 = (m.a22 - l21 * l21).max(0.0).sqrt();
    [l11, l21, l22]
}

/// REML for `(Σ, σ²)` in the linear mixed model `y*ᵢ = Zᵢ(θ + Φᵢ) + εᵢ`.
///
/// `σ²` is profiled out and `Σ = σ² L Lᵀ` with the three entries of the
/// lower-triangular `L` left unconstrained, so `Σ` is PSD by construction and
/// the zero matrix is reachable. `start` is an optional `(Σ, σ²)` warm start.
pub fn reml_variance_components(tubes: &[LinearizedTube], start: Option<(SymMat2, f64)>) -> Result<RemlEstimate> {
    let m = tubes.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!("REML needs at least 2 tubes, got {m}")));
    }
    let n_total: usize = tubes.iter().map(|t| t.len()).sum();
    if n_total <= 2 * m + 2 {
        return Err(Error::InvalidInput(format!("REML needs more than {} observations, got {n_total}", 2 * m + 2)));
    }

    // Pooled OLS fit (Ψ = 0) and per-tube OLS fits for scaling and start.
    let zero = Mat2([[0.0; 2]; 2]);
    let (a0, b0, c0, _) = pooled(tubes, &zero, 1.0).expect("identity P");
    let a0_inv = a0.inverse().ok_or_else(|| Error::Singular("pooled design Σ ZᵢᵀZᵢ".into()))?;
    let q0 = c0 - a0_inv.quad_form(b0);
    if q0 <= EXACT_FIT_REL * c0 {
        return Ok(RemlEstimate {
            sigma_between: SymMat2::ZERO,
            sigma2: 0.0,
            boundary: true,
            criterion: f64::NEG_INFINITY,
            converged: true,
            within_scale: SymMat2::ZERO,
        });
    }

    let mut mean_g_inv = SymMat2::ZERO;
    let mut ols = Vec::with_capacity(m);
    let mut rss_within = 0.0;
    for t in tubes {
        let g_inv = t.gram.inverse().ok_or_else(|| Error::Singular(format!("ZᵀZ for tube {}", t.tube_id)))?;
        let th = g_inv.mul_vec(t.zty);
        rss_within += t.yty - th[0] * t.zty[0] - th[1] * t.zty[1];
        mean_g_inv = mean_g_inv.add(&g_inv);
        ols.push(th);
    }
    let mean_g_inv = mean_g_inv.scale(1.0 / m as f64);
    // natural unit of each L row: within-tube sd of the OLS estimate over σ
    let unit = [mean_g_inv.a11.sqrt(), mean_g_inv.a22.sqrt()];

    let psi0 = match start {
        Some((s, s2)) if s2 > 0.0 && s.is_finite() => psd_project(s.scale(1.0 / s2)),
        _ => {
            let s2 = (rss_within / (n_total - 2 * m) as f64).max(f64::MIN_POSITIVE);
            let mean = ols.iter().fold([0.0; 2], |acc, th| [acc[0] + th[0] / m as f64, acc[1] + th[1] / m as f64]);
            let cov = ols
                .iter()
                .map(|th| SymMat2::outer([th[0] - mean[0], th[1] - mean[1]]))
                .fold(SymMat2::ZERO, |acc, o| acc.add(&o))
                .scale(1.0 / (m - 1) as f64);
            psd_project(cov.scale(1.0 / s2).sub(&mean_g_inv))
        }
    };
    // nudge off the boundary so every direction is explored
    let psi0 = psi0.add(&SymMat2::diag(1e-2 * unit[0] * unit[0], 1e-2 * unit[1] * unit[1]));
    let l0 = lower_cholesky(&psi0);
    let to_l = |u: &[f64]| [u[0] * unit[0], u[1] * unit[1], u[2] * unit[1]];
    let u0 = [l0[0] / unit[0], l0[1] / unit[1], l0[2] / unit[1]];

    let objective = |u: &[f64]| match reml_criterion(tubes, &lower(&to_l(u)), n_total) {
        Some((v, _)) => v,
        None => f64::INFINITY,
    };
    let mut opts = SimplexOptions {
        diameter_tol: REML_DIAMETER_TOL,
        max_iter: 5000,
        initial_step: Some(u0.iter().map(|u| 0.1 + 0.2 * u.abs()).collect()),
    };
    let mut best = minimize_simplex(objective, &u0, &opts)?;
    for _ in 1..REML_MAX_RUNS {
        opts.initial_step = Some(best.argmin.iter().map(|u| 0.01 + 0.05 * u.abs()).collect());
        let next = minimize_simplex(objective, &best.argmin, &opts)?;
        let gain = best.value - next.value;
        let settled = gain <= 1e-12 * best.value.abs().max(1.0);
        if next.value <= best.value {
            best = next;
        }
        if settled {
            break;
        }
    }

    let (u, _) = polish_newton(objective, &best.argmin, 1e-4, 50);
    let l = lower(&to_l(&u));
    let (criterion, q) =
        reml_criterion(tubes, &l, n_total).ok_or_else(|| Error::NotConverged("REML criterion".into()))?;
    let sigma2 = q / (n_total - 2) as f64;
    let psi = sym(&l.mul(&l.transpose()));
    let scaled =
        SymMat2::new(psi.a11 / (unit[0] * unit[0]), psi.a12 / (unit[0] * unit[1]), psi.a22 / (unit[1] * unit[1]));
    let boundary = scaled.min_eigenvalue() <= BOUNDARY_REL * scaled.trace().max(1.0);
    Ok(RemlEstimate {
        sigma_between: psi.scale(sigma2),
        sigma2,
        boundary,
        criterion,
        converged: best.converged,
        within_scale: mean_g_inv.scale(sigma2),
    })
}

/// GLS objective `θᵀ A θ - 2 bᵀ θ + c`, equal to `σ² (y* - Zθ)ᵀ V⁻¹ (y* - Zθ)`
/// pooled over tubes.
#[derive(Debug, Clone, Copy)]
pub struct GlsSystem {
    pub a: SymMat2,
    pub b: [f64; 2],
    pub c: f64,
}

impl GlsSystem {
    pub fn value(&self, theta: [f64; 2]) -> f64 {
        self.a.quad_form(theta) - 2.0 * (self.b[0] * theta[0] + self.b[1] * theta[1]) + self.c
    }
}

fn check_components(sigma: &SymMat2, sigma2: f64) -> Result<bool> {
    if !(sigma2 >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("invalid variance components Σ = {sigma:?}, σ² = {sigma2}")));
    }
    let zero_sigma = sigma.a11 == 0.0 && sigma.a12 == 0.0 && sigma.a22 == 0.0;
    if sigma2 == 0.0 && !zero_sigma {
        return Err(Error::Singular("V = ZΣZᵀ is singular when σ² = 0".into()));
    }
    Ok(zero_sigma)
}

pub fn gls_normal_equations(tubes: &[LinearizedTube], sigma: &SymMat2, sigma2: f64) -> Result<GlsSystem> {
    let zero_sigma = check_components(sigma, sigma2)?;
    let f = if zero_sigma { Mat2([[0.0; 2]; 2]) } else { sigma.psd_factor() };
    let scale = if zero_sigma { 1.0 } else { sigma2 };
    let (a, b, c, _) = pooled(tubes, &f, scale).ok_or_else(|| Error::Singular("σ²I + FᵀZᵀZF".into()))?;
    Ok(GlsSystem { a, b, c })
}

/// GLS for the population `θ` under `Λ* > 0`, returning the estimate and
/// `Var(θ̂) = σ² A⁻¹`. When the unconstrained minimizer is feasible it is
/// returned as is; otherwise the penalized simplex runs from its projection.
pub fn constrained_gls(
    tubes: &[LinearizedTube],
    sigma: &SymMat2,
    sigma2: f64,
    c: &ModelConstants,
    l1: f64,
) -> Result<(NaturalParams, SymMat2)> {
    let sys = gls_normal_equations(tubes, sigma, sigma2)?;
    let a_inv = sys.a.inverse().ok_or_else(|| Error::Singular("GLS normal matrix".into()))?;
    let cov = a_inv.scale(sigma2);
    let free = NaturalParams::from_array(a_inv.mul_vec(sys.b));
    if feasible(&free, c, l1) {
        return Ok((free, cov));
    }
    let mu = if free.mu > 0.0 { free.mu } else { 1e-3 };
    let limit = mu * c.r_tot / l1;
    let lambda = if free.lambda > 0.0 && free.lambda < limit { free.lambda } else { 0.9 * limit };
    let start = [mu, lambda];
    let objective = |v: &[f64]| {
        let n = NaturalParams::new(v[0], v[1]);
        if feasible(&n, c, l1) {
            sys.value([v[0], v[1]])
        } else {
            f64::INFINITY
        }
    };
    let opts = SimplexOptions::default();
    let mut res = minimize_simplex(objective, &start, &opts)?;
    let again = minimize_simplex(objective, &res.argmin, &opts)?;
    if again.value <= res.value {
        res = again;
    }
    Ok((NaturalParams::new(res.argmin[0], res.argmin[1]), cov))
}

/// `θ + Σ Zᵢᵀ Vᵢ⁻¹ (y*ᵢ - Zᵢ θ)` per tube, computed as `θ + F Pᵢ⁻¹ Fᵀ uᵢ`
/// with `Σ = F Fᵀ`, `Pᵢ = σ² I + Fᵀ Gᵢ F` and `uᵢ = Zᵢᵀ(y*ᵢ - Zᵢ θ)`.
pub fn blup_update(
    tubes: &[LinearizedTube],
    theta: &NaturalParams,
    sigma: &SymMat2,
    sigma2: f64,
) -> Result<Vec<NaturalParams>> {
    if !(sigma2 >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("invalid variance components Σ = {sigma:?}, σ² = {sigma2}")));
    }
    if sigma.a11 == 0.0 && sigma.a12 == 0.0 && sigma.a22 == 0.0 {
        return Ok(vec![*theta; tubes.len()]);
    }
    let f = sigma.psd_factor();
    let th = theta.as_array();
    tubes
        .iter()
        .map(|t| {
            let g = t.gram;
            let p = SymMat2::IDENTITY.scale(sigma2).add(&f.congruence(&g));
            let p_inv = p.inverse().ok_or_else(|| Error::Singular(format!("V for tube {}", t.tube_id)))?;
            let gt = g.mul_vec(th);
            let u = [t.zty[0] - gt[0], t.zty[1] - gt[1]];
            let phi = f.mul_vec(p_inv.mul_vec(f.transpose().mul_vec(u)));
            Ok(NaturalParams::new(theta.mu + phi[0], theta.lambda + phi[1]))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CremlOptions {
    /// Starting fit; defaults to CMM.
    pub start: Option<MixedFit>,
    /// Relative change on `(μ, λ, Σ, σ²)` that ends the outer loop.
    pub tol: f64,
    pub max_outer: usize,
    /// Used to build the default start.
    pub cmm: CmmOptions,
}

impl Default for CremlOptions {
    fn default() -> Self {
        CremlOptions { start: None, tol: 1e-6, max_outer: 100, cmm: CmmOptions::default() }
    }
}

fn rel_change(old: f64, new: f64, floor: f64) -> f64 {
    (new - old).abs() / old.abs().max(new.abs()).max(floor)
}

/// Linearize around the BLUPs, fit `(Σ, σ²)` by REML and `θ` by constrained
/// GLS, update the BLUPs, and repeat until the relative change is below
/// `tol`.
pub fn creml_fit(tubes: &[TubeData], c: &ModelConstants, gs: &GroundState, opts: &CremlOptions) -> Result<MixedFit> {
    if tubes.len() < 2 {
        return Err(Error::InvalidInput(format!("CREML needs at least 2 tubes, got {}", tubes.len())));
    }
    let start = match &opts.start {
        Some(s) => s.clone(),
        None => cmm_fit(tubes, c, gs, &opts.cmm)?,
    };
    let used: Vec<&TubeData> = start
        .tube_ids
        .iter()
        .map(|id| {
            tubes
                .iter()
                .find(|t| &t.tube_id == id)
                .ok_or_else(|| Error::InvalidInput(format!("start refers to unknown tube {id}")))
        })
        .collect::<Result<_>>()?;
    if used.len() < 2 || start.per_tube.len() != used.len() {
        return Err(Error::InvalidInput("start fit does not match the tubes".into()));
    }
    let l1 = gs.l1_norm();

    let mut theta = start.theta;
    let mut sigma = start.sigma_between;
    let mut sigma2 = start.sigma2;
    let mut blups = start.per_tube.clone();
    let mut theta_cov = start.theta_cov;
    let mut boundary = start.boundary;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_outer {
        iterations += 1;
        let lins: Vec<LinearizedTube> = used.iter().zip(&blups).map(|(t, b)| linearize_tube(t, b, gs)).collect();
        let reml = reml_variance_components(&lins, Some((sigma, sigma2)))?;
        let (theta_new, cov) = constrained_gls(&lins, &reml.sigma_between, reml.sigma2, c, l1)?;
        let blups_new = blup_update(&lins, &theta_new, &reml.sigma_between, reml.sigma2)?;

        let y_scale = lins.iter().map(|t| t.yty).sum::<f64>() / lins.iter().map(|t| t.len()).sum::<usize>() as f64;
        let th_old = theta.as_array();
        let th_new = theta_new.as_array();
        // Σ entries are measured against the larger of their own size and
        // the single-tube sampling variance; covariances against the
        // geometric mean of the two diagonal scales.
        let s_new = &reml.sigma_between;
        let diag_scale = |k: usize| {
            let (old, new, floor) = if k == 0 {
                (sigma.a11, s_new.a11, reml.within_scale.a11)
            } else {
                (sigma.a22, s_new.a22, reml.within_scale.a22)
            };
            old.abs().max(new.abs()).max(floor).max(1e-12 * th_new[k] * th_new[k])
        };
        let cross_floor = (diag_scale(0) * diag_scale(1)).sqrt();
        let changes = [
            rel_change(th_old[0], th_new[0], 1e-12),
            rel_change(th_old[1], th_new[1], 1e-12),
            rel_change(sigma.a11, s_new.a11, diag_scale(0)),
            rel_change(sigma.a12, s_new.a12, cross_floor),
            rel_change(sigma.a22, s_new.a22, diag_scale(1)),
            rel_change(sigma2, reml.sigma2, 1e-12 * y_scale),
        ];
        let change = changes.iter().copied().fold(0.0, f64::max);
        theta = theta_new;
        sigma = reml.sigma_between;
        sigma2 = reml.sigma2;
        blups = blups_new;
        theta_cov = cov;
        boundary = reml.boundary;
        log::debug!("CREML iteration {iterations}: max relative change {change:.3e}");
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("CREML did not converge in {} outer iterations", opts.max_outer);
    }
    let model = natural_to_model(&theta, c, l1)?;
    Ok(MixedFit {
        method: MixedMethod::Creml,
        theta,
        sigma_between: sigma,
        sigma_between_raw: sigma,
        sigma2,
        per_tube: blups,
        tube_ids: start.tube_ids.clone(),
        model,
        theta_cov,
        iterations,
        converged,
        excluded: start.excluded.clone(),
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::solve_ground_state;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::OnceLock;

    fn gs() -> &'static GroundState {
        static GS: OnceLock<GroundState> = OnceLock::new();
        GS.get_or_init(|| solve_ground_state(1.2, 30.0, 0.01).unwrap())
    }

    fn xs() -> Vec<f64> {
        (0..=50).map(|i| -5.0 + 0.2 * i as f64).collect()
    }

    fn truth() -> NaturalParams {
        NaturalParams::new(1.0, 34.1883)
    }

    fn noiseless(n: &NaturalParams, id: &str) -> TubeData {
        let ys = xs().iter().map(|&x| eval_r(n, gs(), x)).collect();
        TubeData::new(id, xs(), ys).unwrap()
    }

    fn simulate_lmm(m: usize, sigma: SymMat2, sigma2: f64, seed: u64) -> Vec<LinearizedTube> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design: Vec<[f64; 2]> = xs().iter().map(|&x| grad_r(&truth(), gs(), x)).collect();
        let f = sigma.psd_factor();
        (0..m)
            .map(|i| {
                let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let phi = f.mul_vec(z);
                let th = [truth().mu + phi[0], truth().lambda + phi[1]];
                let y = design
                    .iter()
                    .map(|r| {
                        let e: f64 = rng.sample(StandardNormal);
                        r[0] * th[0] + r[1] * th[1] + sigma2.sqrt() * e
                    })
                    .collect();
                LinearizedTube::new(format!("t{i}"), y, design.clone()).unwrap()
            })
            .collect()
    }

    #[test]
    fn linearize_at_truth_is_exact() {
        let tube = noiseless(&truth(), "a");
        let lin = linearize_tube(&tube, &truth(), gs());
        for ((y, row), &x) in lin.pseudo_y.iter().zip(&lin.design).zip(&tube.positions) {
            assert!((y - (row[0] * 1.0 + row[1] * 34.1883)).abs() < 1e-10);
            assert_eq!(row[1], gs().eval(x));
        }
    }

    #[test]
    fn linearization_is_first_order_invariant() {
        let tube = noiseless(&truth(), "a");
        let base = linearize_tube(&tube, &truth(), gs());
        let mut prev = f64::INFINITY;
        for d in [1e-2, 5e-3] {
            let moved = linearize_tube(&tube, &NaturalParams::new(1.0 + d, 34.1883 * (1.0 + d)), gs());
            // y* - Z θ at truth changes only at second order in d
            let diff = moved
                .pseudo_y
                .iter()
                .zip(&moved.design)
                .zip(&base.pseudo_y)
                .map(|((y, r), y0)| {
                    let fit = r[0] * 1.0 + r[1] * 34.1883;
                    let fit0 = y0;
                    ((y - fit) - (y0 - fit0)).abs()
                })
                .fold(0.0, f64::max);
            if prev.is_finite() {
                let ratio = prev / diff;
                assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
            }
            prev = diff;
        }
    }

    fn inv2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
    }

    fn mm(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        out
    }

    fn tr(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
        [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
    }

    #[test]
    fn blup_matches_direct_matrix_arithmetic() {
        let z1 = [[1.0, 0.0], [0.0, 1.0]];
        let z2 = [[1.0, 0.5], [0.0, 1.0]];
        let y1 = [1.3, 2.1];
        let y2 = [0.4, 1.7];
        let tubes = vec![
            LinearizedTube::new("a", y1.to_vec(), vec![z1[0], z1[1]]).unwrap(),
            LinearizedTube::new("b", y2.to_vec(), vec![z2[0], z2[1]]).unwrap(),
        ];
        let sigma = SymMat2::new(0.5, 0.1, 0.8);
        let s = [[0.5, 0.1], [0.1, 0.8]];
        let sigma2 = 0.3;
        let theta = NaturalParams::new(0.9, 1.2);
        let got = blup_update(&tubes, &theta, &sigma, sigma2).unwrap();
        for (i, (z, y)) in [(z1, y1), (z2, y2)].iter().enumerate() {
            let mut v = mm(mm(*z, s), tr(*z));
            v[0][0] += sigma2;
            v[1][1] += sigma2;
            let vi = inv2(v);
            let r = [y[0] - (z[0][0] * 0.9 + z[0][1] * 1.2), y[1] - (z[1][0] * 0.9 + z[1][1] * 1.2)];
            let k = mm(mm(s, tr(*z)), vi);
            let phi = [k[0][0] * r[0] + k[0][1] * r[1], k[1][0] * r[0] + k[1][1] * r[1]];
            assert!((got[i].mu - 0.9 - phi[0]).abs() < 1e-12, "{i}");
            assert!((got[i].lambda - 1.2 - phi[1]).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn blup_limits() {
        let tubes = simulate_lmm(3, SymMat2::diag(0.04, 0.36), 16.0, 1);
        let th = truth();
        let all = blup_update(&tubes, &th, &SymMat2::ZERO, 16.0).unwrap();
        assert!(all.iter().all(|b| *b == th));
        // σ² -> 0: the per-tube OLS solution
        let b = blup_update(&tubes, &th, &SymMat2::diag(0.04, 0.36), 1e-12).unwrap();
        for (t, b) in tubes.iter().zip(&b) {
            let ols = t.gram().inverse().unwrap().mul_vec(t.zty());
            assert!((b.mu - ols[0]).abs() < 1e-6 && (b.lambda - ols[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn constrained_gls_with_zero_sigma_is_pooled_ols() {
        let tubes = simulate_lmm(4, SymMat2::ZERO, 16.0, 2);
        let c = ModelConstants::simulation();
        let (th, cov) = constrained_gls(&tubes, &SymMat2::ZERO, 16.0, &c, gs().l1_norm()).unwrap();
        let g = tubes.iter().fold(SymMat2::ZERO, |acc, t| acc.add(&t.gram()));
        let h = tubes.iter().fold([0.0; 2], |acc, t| [acc[0] + t.zty()[0], acc[1] + t.zty()[1]]);
        let ols = g.inverse().unwrap().mul_vec(h);
        assert!((th.mu - ols[0]).abs() < 1e-12 && (th.lambda - ols[1]).abs() < 1e-10);
        assert!((cov.a11 - 16.0 * g.inverse().unwrap().a11).abs() < 1e-15);
    }

    #[test]
    fn constrained_gls_binds_on_the_feasibility_line() {
        // a small R_tot moves the pooled OLS solution outside the feasible set
        let tubes = simulate_lmm(4, SymMat2::ZERO, 16.0, 2);
        let l1 = gs().l1_norm();
        let c = ModelConstants { r_tot: 300.0, ..ModelConstants::simulation() };
        let (th, _) = constrained_gls(&tubes, &SymMat2::ZERO, 16.0, &c, l1).unwrap();
        assert!(feasible(&th, &c, l1));
        // brute force: minimize the quadratic along λ = k μ, k = R_tot / l1
        let sys = gls_normal_equations(&tubes, &SymMat2::ZERO, 16.0).unwrap();
        let k = c.r_tot / l1;
        let d = [1.0, k];
        let mu = (sys.b[0] * d[0] + sys.b[1] * d[1]) / sys.a.quad_form(d);
        let line = sys.value([mu, k * mu]);
        assert!((sys.value(th.as_array()) - line).abs() < 1e-6 * line.abs());
        assert!((th.mu - mu).abs() < 1e-5);
    }

    #[test]
    fn reml_recovers_lmm_components() {
        let truth_sigma = SymMat2::diag(0.04, 0.36);
        let tubes = simulate_lmm(5000, truth_sigma, 16.0, 7);
        let est = reml_variance_components(&tubes, None).unwrap();
        assert!((est.sigma_between.a11 / 0.04 - 1.0).abs() < 0.15, "{:?}", est);
        assert!((est.sigma_between.a22 / 0.36 - 1.0).abs() < 0.15, "{:?}", est);
        assert!((est.sigma2 / 16.0 - 1.0).abs() < 0.15, "{:?}", est);
        assert!(est.sigma_between.min_eigenvalue() >= 0.0);
    }

    #[test]
    fn reml_with_no_between_variance() {
        let tubes = simulate_lmm(40, SymMat2::ZERO, 16.0, 3);
        let est = reml_variance_components(&tubes, None).unwrap();
        let n_total: usize = tubes.iter().map(|t| t.len()).sum();
        let g = tubes.iter().fold(SymMat2::ZERO, |acc, t| acc.add(&t.gram()));
        let h = tubes.iter().fold([0.0; 2], |acc, t| [acc[0] + t.zty()[0], acc[1] + t.zty()[1]]);
        let yy: f64 = tubes.iter().flat_map(|t| t.pseudo_y.iter()).map(|y| y * y).sum();
        let pooled = (yy - g.inverse().unwrap().quad_form(h)) / (n_total - 2) as f64;
        assert!((est.sigma2 / pooled - 1.0).abs() < 0.05, "{} vs {pooled}", est.sigma2);
        assert!(est.sigma_between.min_eigenvalue() >= 0.0);
    }

    #[test]
    fn reml_rejects_single_tube() {
        let tubes = simulate_lmm(1, SymMat2::ZERO, 16.0, 3);
        assert!(reml_variance_components(&tubes, None).is_err());
    }

    #[test]
    fn creml_noiseless_identical_tubes() {
        let data: Vec<TubeData> = (0..4).map(|i| noiseless(&truth(), &format!("t{i}"))).collect();
        let fit = creml_fit(&data, &ModelConstants::simulation(), gs(), &CremlOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2, "{}", fit.iterations);
        assert!((fit.theta.mu - 1.0).abs() < 1e-6 && (fit.theta.lambda - 34.1883).abs() < 1e-5);
        assert!(fit.sigma_between.trace() < 1e-10);
    }

    #[test]
    fn creml_restarted_at_fixed_point_stops_after_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<TubeData> = (0..8)
            .map(|i| {
                let n = NaturalParams::new(
                    1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal),
                    34.1883 + 0.6 * rng.sample::<f64, _>(StandardNormal),
                );
                let ys =
                    xs().iter().map(|&x| eval_r(&n, gs(), x) + 4.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                TubeData::new(format!("t{i}"), xs(), ys).unwrap()
            })
            .collect();
        let c = ModelConstants::simulation();
        let first = creml_fit(&data, &c, gs(), &CremlOptions::default()).unwrap();
        assert!(first.converged, "{first:?}");
        let again =
            creml_fit(&data, &c, gs(), &CremlOptions { start: Some(first.clone()), ..Default::default() }).unwrap();
        assert_eq!(again.iterations, 1);
        assert!((again.theta.lambda / first.theta.lambda - 1.0).abs() < 1e-5);
        assert!(again.sigma_between.min_eigenvalue() >= 0.0 && again.sigma2 >= 0.0);
    }
}
