use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::asymptotics::{cross_product, delta_matrix_a, model_covariance};
use super::cnls::{cnls_fit, CnlsFit, CnlsOptions};
use super::{intervals_from_cov, CiQuantile, MixedFit, MixedMethod, ParamIntervals, TubeData};
use crate::elliptic::GroundState;
use crate::error::{Error, Result};
use crate::numerics::{psd_project, SymMat2};
use crate::steady_state::{natural_to_model, ModelConstants, NaturalParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmmOptions {
    pub cnls: CnlsOptions,
    /// Drop tubes whose CNLS fit fails instead of failing the whole fit.
    pub exclude_failed: bool,
    /// Fit tubes on the rayon pool.
    pub parallel: bool,
}

impl Default for CmmOptions {
    fn default() -> Self {
        CmmOptions { cnls: CnlsOptions::default(), exclude_failed: false, parallel: true }
    }
}

fn mean_natural(fits: &[&CnlsFit]) -> NaturalParams {
    let m = fits.len() as f64;
    let (mu, lambda) = fits.iter().fold((0.0, 0.0), |acc, f| (acc.0 + f.natural.mu, acc.1 + f.natural.lambda));
    NaturalParams::new(mu / m, lambda / m)
}

/// Method of moments over per-tube CNLS fits.
pub fn cmm_fit(tubes: &[TubeData], c: &ModelConstants, gs: &GroundState, opts: &CmmOptions) -> Result<MixedFit> {
    if tubes.len() < 2 {
        return Err(Error::InvalidInput(format!("CMM needs at least 2 tubes, got {}", tubes.len())));
    }
    let fit_one = |t: &TubeData| cnls_fit(t, c, gs, &opts.cnls).map_err(|e| e.in_tube(&t.tube_id));
    let results: Vec<Result<CnlsFit>> =
        if opts.parallel { tubes.par_iter().map(fit_one).collect() } else { tubes.iter().map(fit_one).collect() };

    let mut kept: Vec<(&TubeData, CnlsFit)> = Vec::with_capacity(tubes.len());
    let mut excluded = Vec::new();
    for (tube, res) in tubes.iter().zip(results) {
        match res {
            Ok(fit) => kept.push((tube, fit)),
            Err(e) if opts.exclude_failed => {
                log::warn!("excluding {e}");
                excluded.push(tube.tube_id.clone());
            }
            Err(e) => return Err(e),
        }
    }
    let m = kept.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!("only {m} tube(s) fitted successfully; CMM needs 2")));
    }
    let fits: Vec<&CnlsFit> = kept.iter().map(|(_, f)| f).collect();
    let theta = mean_natural(&fits);

    let total_rss: f64 = fits.iter().map(|f| f.rss).sum();
    let dof: usize = fits.iter().map(|f| f.n - 2).sum();
    let sigma2 = total_rss / dof as f64;

    let sample_cov = fits
        .iter()
        .map(|f| {
            let d = [f.natural.mu - theta.mu, f.natural.lambda - theta.lambda];
            SymMat2::outer(d)
        })
        .fold(SymMat2::ZERO, |acc, s| acc.add(&s))
        .scale(1.0 / (m - 1) as f64);

    let mut mean_t_inv = SymMat2::ZERO;
    for (tube, fit) in &kept {
        let t = cross_product(&fit.natural, gs, &tube.positions);
        let t_inv = t
            .inverse()
            .ok_or_else(|| Error::Singular(format!("Gauss-Newton cross product for tube {}", tube.tube_id)))?;
        mean_t_inv = mean_t_inv.add(&t_inv);
    }
    let mean_t_inv = mean_t_inv.scale(1.0 / m as f64);

    let sigma_raw = sample_cov.sub(&mean_t_inv.scale(sigma2));
    let sigma_between = psd_project(sigma_raw);
    let boundary = sigma_between.min_eigenvalue() <= 1e-12 * sigma_between.trace().abs().max(f64::MIN_POSITIVE);
    // Σ̃ = Σ̂ + σ̂² mean(Tᵢ⁻¹) equals the sample covariance of the θ̂ᵢ
    let theta_cov = sigma_raw.add(&mean_t_inv.scale(sigma2)).scale(1.0 / m as f64);
    let l1 = gs.l1_norm();
    let model = natural_to_model(&theta, c, l1)?;
    let converged = fits.iter().all(|f| f.converged);
    let iterations = fits.iter().map(|f| f.iterations).max().unwrap_or(0);

    Ok(MixedFit {
        method: MixedMethod::Cmm,
        theta,
        sigma_between,
        sigma_between_raw: sigma_raw,
        sigma2,
        per_tube: fits.iter().map(|f| f.natural).collect(),
        tube_ids: kept.iter().map(|(t, _)| t.tube_id.clone()).collect(),
        model,
        theta_cov,
        iterations,
        converged,
        excluded,
        boundary,
    })
}

/// Population intervals with Student-t quantiles on `m - 1` degrees of
/// freedom.
pub fn cmm_population_ci(fit: &MixedFit, gs: &GroundState, c: &ModelConstants, level: f64) -> Result<ParamIntervals> {
    let m = fit.m();
    if m < 2 {
        return Err(Error::InvalidInput(format!("population intervals need at least 2 tubes, got {m}")));
    }
    cmm_population_ci_with(fit, gs, c, level, CiQuantile::StudentT((m - 1) as f64))
}

/// Wald intervals from `θ̂ ± q sqrt(Σ̃ᵢᵢ / m)`, and `Aᵀ Σ̃ A` for the rates.
pub fn cmm_population_ci_with(
    fit: &MixedFit,
    gs: &GroundState,
    c: &ModelConstants,
    level: f64,
    quantile: CiQuantile,
) -> Result<ParamIntervals> {
    let m = fit.m();
    if m < 2 {
        return Err(Error::InvalidInput(format!("population intervals need at least 2 tubes, got {m}")));
    }
    if fit.theta_cov.det() <= 0.0 || !fit.theta_cov.is_finite() {
        return Err(Error::Singular(format!("population covariance {:?}", fit.theta_cov)));
    }
    let q = quantile.two_sided(level)?;
    let a = delta_matrix_a(&fit.theta, c, gs.l1_norm())?;
    let cov_model = model_covariance(&a, &fit.theta_cov);
    Ok(intervals_from_cov(fit.theta, fit.model, &fit.theta_cov, &cov_model, level, q))
}
