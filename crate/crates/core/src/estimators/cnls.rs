use serde::{Deserialize, Serialize};

use super::asymptotics::{delta_matrix_a, k_matrix, model_covariance, K_SINGULAR_DET};
use super::{intervals_from_cov, CiQuantile, ParamIntervals, TubeData};
use crate::elliptic::GroundState;
use crate::error::{Error, Result};
use crate::numerics::{minimize_simplex, Mat2, SimplexOptions, SymMat2};
use crate::steady_state::{feasible, natural_to_model, ModelConstants, ModelParams, NaturalParams};

/// Fraction of the feasibility limit `μ R_tot / l1` used when projecting an
/// infeasible start.
const START_PROJECTION: f64 = 0.9;
/// Points in the log-spaced `μ` scan of the start search.
const PROFILE_SCAN_POINTS: usize = 81;
/// The scan covers `[μ₀ / PROFILE_SCAN_SPAN, μ₀ · PROFILE_SCAN_SPAN]`.
const PROFILE_SCAN_SPAN: f64 = 8.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CnlsOptions {
    pub start: Option<NaturalParams>,
    pub diameter_tol: f64,
    pub max_iter: usize,
    /// Simplex restarts from the best point after the first run.
    pub restarts: usize,
}

impl Default for CnlsOptions {
    fn default() -> Self {
        CnlsOptions { start: None, diameter_tol: 1e-8, max_iter: 2000, restarts: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CnlsFit {
    pub natural: NaturalParams,
    pub model: ModelParams,
    /// Residual sd, `sqrt(RSS / n)`.
    pub sigma: f64,
    pub rss: f64,
    pub n: usize,
    pub k: SymMat2,
    pub a: Mat2,
    /// Covariance of `(μ̂, λ̂)`: `σ̂² K⁻¹ / n`. `None` when `K` is singular.
    pub cov_natural: Option<SymMat2>,
    /// Covariance of `(k̂_nf, k̂_pf)`: `Aᵀ cov_natural A`.
    pub cov_model: Option<SymMat2>,
    pub converged: bool,
    pub iterations: usize,
    /// Estimate sits within a relative 1e-6 of the feasibility boundary.
    pub at_boundary: bool,
}

/// RSS when `n` is feasible, `+inf` otherwise.
pub fn penalized_objective(n: &NaturalParams, data: &TubeData, gs: &GroundState, c: &ModelConstants, l1: f64) -> f64 {
    if !feasible(n, c, l1) {
        return f64::INFINITY;
    }
    rss(n, data, gs)
}

fn rss(n: &NaturalParams, data: &TubeData, gs: &GroundState) -> f64 {
    data.positions
        .iter()
        .zip(&data.intensities)
        .map(|(&x, &y)| {
            let r = y - n.lambda * gs.eval(n.mu * x);
            r * r
        })
        .sum()
}

fn project_feasible(n: NaturalParams, c: &ModelConstants, l1: f64) -> NaturalParams {
    let limit = n.mu * c.r_tot / l1;
    if n.lambda >= limit {
        NaturalParams::new(n.mu, START_PROJECTION * limit)
    } else {
        n
    }
}

// Position where a running mean of y over |x| first drops below half its peak.
fn smoothed_half_width(data: &TubeData) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> =
        data.positions.iter().map(|x| x.abs()).zip(data.intensities.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    let half = (n / 15).max(1);
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            pts[lo..hi].iter().map(|p| p.1).sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let (imax, &peak) = smooth.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    if !(peak > 0.0) {
        return None;
    }
    for i in imax + 1..n {
        if smooth[i] <= 0.5 * peak {
            let (x0, s0) = (pts[i - 1].0, smooth[i - 1]);
            let (x1, s1) = (pts[i].0, smooth[i]);
            let w = if s0 > s1 { (s0 - 0.5 * peak) / (s0 - s1) } else { 1.0 };
            return Some(x0 + w * (x1 - x0));
        }
    }
    None
}

/// Start heuristic: `λ₀ = max(y)/σ₀(0)` and `μ₀ = x½ / w½`, where `x½` is
/// the half-max position of `σ₀` and `w½` that of the smoothed data. The
/// result is compared against the best point of a profile scan over `μ`
/// (with `λ` solved by linear least squares) and the lower-RSS one is kept.
/// Always feasible.
pub fn default_start(data: &TubeData, gs: &GroundState, c: &ModelConstants) -> Result<NaturalParams> {
    data.validate()?;
    let l1 = gs.l1_norm();
    let ymax = data.intensities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(ymax > 0.0) {
        return Err(Error::DegenerateData(format!("tube {} has no positive intensity", data.tube_id)));
    }
    let xmax = data.positions.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let ref_half = gs.half_max_position();
    let mu0 = match smoothed_half_width(data) {
        Some(w) if w > 0.0 => ref_half / w,
        _ if xmax > 0.0 => ref_half / xmax,
        _ => 1.0,
    };
    let heuristic = project_feasible(NaturalParams::new(mu0, ymax / gs.center_height()), c, l1);
    let mut best = (penalized_objective(&heuristic, data, gs, c, l1), heuristic);

    let log_lo = (mu0 / PROFILE_SCAN_SPAN).ln();
    let log_step = 2.0 * PROFILE_SCAN_SPAN.ln() / (PROFILE_SCAN_POINTS - 1) as f64;
    for i in 0..PROFILE_SCAN_POINTS {
        let mu = (log_lo + log_step * i as f64).exp();
        let (mut syy, mut sss) = (0.0, 0.0);
        for (&x, &y) in data.positions.iter().zip(&data.intensities) {
            let s = gs.eval(mu * x);
            syy += y * s;
            sss += s * s;
        }
        if !(sss > 0.0) || !(syy > 0.0) {
            continue;
        }
        let cand = project_feasible(NaturalParams::new(mu, syy / sss), c, l1);
        let value = penalized_objective(&cand, data, gs, c, l1);
        if value < best.0 {
            best = (value, cand);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::InfeasibleStart(best.1.as_array().to_vec()));
    }
    Ok(best.1)
}

/// Constrained nonlinear least squares for one tube.
pub fn cnls_fit(data: &TubeData, c: &ModelConstants, gs: &GroundState, opts: &CnlsOptions) -> Result<CnlsFit> {
    data.validate()?;
    c.validate()?;
    if (gs.alpha() - c.alpha).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "ground state solved for alpha = {} but constants have alpha = {}",
            gs.alpha(),
            c.alpha
        )));
    }
    let l1 = gs.l1_norm();
    let start = match opts.start {
        Some(s) => project_feasible(s, c, l1),
        None => default_start(data, gs, c)?,
    };
    if !feasible(&start, c, l1) {
        return Err(Error::InfeasibleStart(start.as_array().to_vec()));
    }

    let simplex = SimplexOptions { diameter_tol: opts.diameter_tol, max_iter: opts.max_iter, initial_step: None };
    let objective = |v: &[f64]| penalized_objective(&NaturalParams::new(v[0], v[1]), data, gs, c, l1);
    let mut result = minimize_simplex(objective, &start.as_array(), &simplex)?;
    let mut iterations = result.iterations;
    for _ in 0..opts.restarts {
        let again = minimize_simplex(objective, &result.argmin, &simplex)?;
        iterations += again.iterations;
        let improved = again.value <= result.value;
        let converged = again.converged;
        if improved {
            result = again;
        }
        result.converged = converged;
    }

    let natural = NaturalParams::new(result.argmin[0], result.argmin[1]);
    let model = natural_to_model(&natural, c, l1)?;
    let n = data.len();
    let rss = result.value;
    let sigma = (rss / n as f64).sqrt();
    let k = k_matrix(&natural, gs, &data.positions);
    let a = delta_matrix_a(&natural, c, l1)?;
    let cov_natural =
        if k.det() > K_SINGULAR_DET { k.inverse().map(|ki| ki.scale(sigma * sigma / n as f64)) } else { None };
    let cov_model = cov_natural.map(|cov| model_covariance(&a, &cov));
    let limit = natural.mu * c.r_tot / l1;
    let at_boundary = natural.lambda > (1.0 - 1e-6) * limit || natural.lambda < 1e-6 * limit;
    if !result.converged {
        log::warn!("CNLS simplex for tube {} did not converge in {} iterations", data.tube_id, iterations);
    }
    Ok(CnlsFit {
        natural,
        model,
        sigma,
        rss,
        n,
        k,
        a,
        cov_natural,
        cov_model,
        converged: result.converged,
        iterations,
        at_boundary,
    })
}

/// Wald intervals `estimate ± z σ̂ sqrt(var / n)` at confidence `level`.
pub fn cnls_confidence(fit: &CnlsFit, level: f64) -> Result<ParamIntervals> {
    let z = CiQuantile::Normal.two_sided(level)?;
    let (cov_n, cov_m) = match (fit.cov_natural, fit.cov_model) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Singular(format!("K matrix (det = {:.3e})", fit.k.det()))),
    };
    Ok(intervals_from_cov(fit.natural, fit.model, &cov_n, &cov_m, level, z))
}
