//! Constrained estimators for `(μ, λ)`: CNLS for one tube, CMM and CREML for
//! several tubes sharing a population mean, plus the asymptotic covariance
//! pieces used for standard errors.

mod asymptotics;
mod cmm;
mod cnls;
mod creml;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::numerics::SymMat2;
use crate::steady_state::{ModelParams, NaturalParams};

pub use asymptotics::{cross_product, delta_matrix_a, k_matrix, model_covariance, K_SINGULAR_DET};
pub use cmm::{cmm_fit, cmm_population_ci, cmm_population_ci_with, CmmOptions};
pub use cnls::{cnls_confidence, cnls_fit, default_start, penalized_objective, CnlsFit, CnlsOptions};
pub use creml::{
    blup_update, constrained_gls, creml_fit, gls_normal_equations, linearize_tube, reml_variance_components,
    CremlOptions, GlsSystem, LinearizedTube, RemlEstimate,
};

/// Observations from one tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeData {
    pub tube_id: String,
    pub positions: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl TubeData {
    pub const MIN_POINTS: usize = 3;

    pub fn new(tube_id: impl Into<String>, positions: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        let tube = TubeData { tube_id: tube_id.into(), positions, intensities };
        tube.validate()?;
        Ok(tube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.len() != self.intensities.len() {
            return Err(Error::LengthMismatch(self.positions.len(), self.intensities.len()).in_tube(&self.tube_id));
        }
        if self.positions.len() < Self::MIN_POINTS {
            return Err(Error::InvalidInput(format!(
                "tube {} has {} points, at least {} required",
                self.tube_id,
                self.positions.len(),
                Self::MIN_POINTS
            )));
        }
        if self.positions.iter().chain(&self.intensities).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("tube {} has non-finite values", self.tube_id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MixedMethod {
    Cmm,
    Creml,
}

/// Population fit from several tubes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedFit {
    pub method: MixedMethod,
    /// Population `(μ, λ)`.
    pub theta: NaturalParams,
    /// Between-tube covariance, PSD.
    pub sigma_between: SymMat2,
    /// Between-tube covariance before PSD projection (equal to
    /// `sigma_between` for CREML).
    pub sigma_between_raw: SymMat2,
    /// Within-tube variance.
    pub sigma2: f64,
    /// Per-tube estimates (CMM) or BLUPs (CREML), in `tube_ids` order.
    pub per_tube: Vec<NaturalParams>,
    pub tube_ids: Vec<String>,
    pub model: ModelParams,
    /// Plug-in covariance of `theta`.
    pub theta_cov: SymMat2,
    pub iterations: usize,
    pub converged: bool,
    /// Tubes dropped because their CNLS fit failed.
    pub excluded: Vec<String>,
    /// Some variance component sits on the boundary of the PSD cone.
    pub boundary: bool,
}

impl MixedFit {
    pub fn m(&self) -> usize {
        self.per_tube.len()
    }
}

/// Wald interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn wald(estimate: f64, se: f64, quantile: f64) -> Self {
        Interval { estimate, se, lower: estimate - quantile * se, upper: estimate + quantile * se }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Intervals for the four parameters of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamIntervals {
    pub level: f64,
    pub quantile: f64,
    pub mu: Interval,
    pub lambda: Interval,
    pub k_nf: Interval,
    pub k_pf: Interval,
}

/// Reference distribution for Wald intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CiQuantile {
    Normal,
    /// Student t with the given degrees of freedom.
    StudentT(f64),
}

impl CiQuantile {
    /// Two-sided quantile for confidence `level`.
    pub fn two_sided(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidInput(format!("confidence level must be in (0, 1), got {level}")));
        }
        let p = 0.5 + 0.5 * level;
        let q = match *self {
            CiQuantile::Normal => Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p),
            CiQuantile::StudentT(df) => StudentsT::new(0.0, 1.0, df)
                .map_err(|e| Error::InvalidInput(format!("invalid t degrees of freedom {df}: {e}")))?
                .inverse_cdf(p),
        };
        Ok(q)
    }
}

pub(crate) fn intervals_from_cov(
    natural: NaturalParams,
    model: ModelParams,
    cov_natural: &SymMat2,
    cov_model: &SymMat2,
    level: f64,
    quantile: f64,
) -> ParamIntervals {
    ParamIntervals {
        level,
        quantile,
        mu: Interval::wald(natural.mu, cov_natural.a11.max(0.0).sqrt(), quantile),
        lambda: Interval::wald(natural.lambda, cov_natural.a22.max(0.0).sqrt(), quantile),
        k_nf: Interval::wald(model.k_nf, cov_model.a11.max(0.0).sqrt(), quantile),
        k_pf: Interval::wald(model.k_pf, cov_model.a22.max(0.0).sqrt(), quantile),
    }
}
