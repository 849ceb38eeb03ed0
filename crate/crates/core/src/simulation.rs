//! Seeded data generators and a Monte Carlo harness for the single-tube and
//! population designs.
//!
//! Each replicate draws from its own ChaCha8 stream (`seed`, stream =
//! replicate index), so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elliptic::GroundState;
use crate::error::{Error, Result};
use crate::estimators::{
    cmm_fit, cmm_population_ci_with, cnls_confidence, cnls_fit, creml_fit, delta_matrix_a, k_matrix, model_covariance,
    CiQuantile, CmmOptions, CnlsOptions, CremlOptions, MixedFit, MixedMethod, TubeData,
};
use crate::numerics::{format_sig, SymMat2};
use crate::steady_state::{
    eval_r, feasible, model_to_natural, natural_to_model, Branch, ModelConstants, ModelParams, NaturalParams,
};

/// Draws before `gen_population` gives up on finding a feasible tube.
pub const MAX_REJECTION_DRAWS: usize = 1_000_000;

/// Observation positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Explicit {
        positions: Vec<f64>,
    },
    /// `start, start + step, ...` up to and including `stop` (within half a
    /// step).
    Grid {
        start: f64,
        stop: f64,
        step: f64,
    },
    /// `n` positions drawn uniformly on `[lo, hi]` per tube, sorted.
    Uniform {
        lo: f64,
        hi: f64,
        n: usize,
    },
}

impl Design {
    pub fn validate(&self) -> Result<()> {
        match self {
            Design::Explicit { positions } if positions.len() < TubeData::MIN_POINTS => {
                Err(Error::InvalidInput(format!("design needs at least {} positions", TubeData::MIN_POINTS)))
            }
            Design::Explicit { positions } if positions.iter().any(|x| !x.is_finite()) => {
                Err(Error::InvalidInput("design positions must be finite".into()))
            }
            Design::Grid { start, stop, step } if !(*step > 0.0 && stop > start) => {
                Err(Error::InvalidInput(format!("invalid grid design {start}..{stop} step {step}")))
            }
            Design::Uniform { lo, hi, n } if !(hi > lo) || *n < TubeData::MIN_POINTS => {
                Err(Error::InvalidInput(format!("invalid uniform design [{lo}, {hi}] with n = {n}")))
            }
            _ => Ok(()),
        }
    }

    /// Fixed positions, or `None` for random designs.
    pub fn fixed_positions(&self) -> Option<Vec<f64>> {
        match self {
            Design::Explicit { positions } => Some(positions.clone()),
            Design::Grid { start, stop, step } => {
                let count = ((stop - start) / step + 0.5).floor() as usize;
                Some((0..=count).map(|i| start + step * i as f64).collect())
            }
            Design::Uniform { .. } => None,
        }
    }

    pub fn positions<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Design::Uniform { lo, hi, n } => {
                let mut xs: Vec<f64> = (0..*n).map(|_| rng.random_range(*lo..=*hi)).collect();
                xs.sort_by(f64::total_cmp);
                xs
            }
            _ => self.fixed_positions().expect("fixed design"),
        }
    }
}

/// Ground truth, either as rates on a steady-state branch or directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truth {
    Model { params: ModelParams, branch: Branch },
    Natural { params: NaturalParams },
}

impl Truth {
    pub fn resolve(&self, c: &ModelConstants, gs: &GroundState) -> Result<NaturalParams> {
        let n = match *self {
            Truth::Model { params, branch } => model_to_natural(&params, c, gs, branch)?,
            Truth::Natural { params } => params,
        };
        if !feasible(&n, c, gs.l1_norm()) {
            return Err(Error::Infeasible {
                mu: n.mu,
                lambda: n.lambda,
                margin: crate::steady_state::feasibility_margin(&n, c, gs.l1_norm()),
            });
        }
        Ok(n)
    }
}

/// Reference distribution for the population intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationQuantile {
    Normal,
    #[default]
    StudentT,
}

impl PopulationQuantile {
    pub fn for_tubes(&self, m: usize) -> CiQuantile {
        match self {
            PopulationQuantile::Normal => CiQuantile::Normal,
            PopulationQuantile::StudentT => CiQuantile::StudentT(m.saturating_sub(1).max(1) as f64),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub constants: ModelConstants,
    pub truth: Truth,
    pub design: Design,
    /// Within-tube noise sd.
    pub sigma: f64,
    /// Tubes per replicate (population mode).
    pub m: usize,
    /// Between-tube covariance (population mode).
    pub sigma_between: SymMat2,
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
    pub population_quantile: PopulationQuantile,
}

impl SimConfig {
    /// Single-tube protocol: 301 points on `[-15, 15]`.
    pub fn table1(sigma: f64) -> Self {
        SimConfig {
            constants: ModelConstants::simulation(),
            truth: Truth::Model { params: ModelParams { k_nf: 0.1, k_pf: 0.1125 }, branch: Branch::Larger },
            design: Design::Grid { start: -15.0, stop: 15.0, step: 0.1 },
            sigma,
            m: 1,
            sigma_between: SymMat2::ZERO,
            replicates: 500,
            seed: 20_240_501,
            level: 0.95,
            population_quantile: PopulationQuantile::default(),
        }
    }

    /// Population protocol. Case 1 uses six fixed positions, case 2 a grid of
    /// 51 on `[-5, 5]`.
    pub fn table2(case: u8) -> Result<Self> {
        let design = match case {
            1 => Design::Explicit { positions: vec![-5.0, -1.0, -0.2, 0.2, 1.0, 5.0] },
            2 => Design::Grid { start: -5.0, stop: 5.0, step: 0.2 },
            _ => return Err(Error::InvalidInput(format!("unknown population case {case}, expected 1 or 2"))),
        };
        Ok(SimConfig {
            design,
            sigma: 4.0,
            m: 10,
            sigma_between: SymMat2::diag(0.04, 0.36),
            replicates: 200,
            ..SimConfig::table1(4.0)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.constants.validate()?;
        self.design.validate()?;
        if self.replicates < 1 {
            return Err(Error::InvalidInput("replicates must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be nonnegative, got {}", self.sigma)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidInput(format!("level must be in (0, 1), got {}", self.level)));
        }
        if self.sigma_between.min_eigenvalue() < -1e-12 * self.sigma_between.trace().abs().max(1.0) {
            return Err(Error::InvalidInput("between-tube covariance must be PSD".into()));
        }
        Ok(())
    }

    /// Generator for replicate `index`.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// `y_j = λ σ₀(μ x_j) + ε_j`, `ε_j ~ N(0, σ²)`.
pub fn gen_single_tube<R: Rng + ?Sized>(
    tube_id: &str,
    n: &NaturalParams,
    gs: &GroundState,
    design: &Design,
    sigma: f64,
    rng: &mut R,
) -> TubeData {
    let positions = design.positions(rng);
    let intensities = positions
        .iter()
        .map(|&x| {
            let e: f64 = rng.sample(StandardNormal);
            eval_r(n, gs, x) + sigma * e
        })
        .collect();
    TubeData { tube_id: tube_id.to_string(), positions, intensities }
}

#[derive(Debug, Clone)]
pub struct Population {
    pub tubes: Vec<TubeData>,
    /// Realized `(μᵢ, λᵢ)`.
    pub params: Vec<NaturalParams>,
    /// Draws rejected for infeasibility.
    pub rejected: usize,
}

/// `m` tubes with `(μᵢ, λᵢ) = θ + F z`, `F Fᵀ = Σ`, redrawing any infeasible
/// draw.
#[allow(clippy::too_many_arguments)]
pub fn gen_population<R: Rng + ?Sized>(
    theta: &NaturalParams,
    sigma_between: &SymMat2,
    sigma: f64,
    m: usize,
    design: &Design,
    gs: &GroundState,
    c: &ModelConstants,
    rng: &mut R,
) -> Result<Population> {
    let l1 = gs.l1_norm();
    if !feasible(theta, c, l1) {
        return Err(Error::Infeasible {
            mu: theta.mu,
            lambda: theta.lambda,
            margin: crate::steady_state::feasibility_margin(theta, c, l1),
        });
    }
    let f = sigma_between.psd_factor();
    let mut params = Vec::with_capacity(m);
    let mut draws = 0usize;
    while params.len() < m {
        if draws >= MAX_REJECTION_DRAWS {
            return Err(Error::InvalidInput(format!(
                "rejection sampling gave up after {MAX_REJECTION_DRAWS} draws; between-tube covariance is grossly infeasible"
            )));
        }
        draws += 1;
        let z = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let phi = f.mul_vec(z);
        let cand = NaturalParams::new(theta.mu + phi[0], theta.lambda + phi[1]);
        if feasible(&cand, c, l1) {
            params.push(cand);
        }
    }
    let tubes = params
        .iter()
        .enumerate()
        .map(|(i, p)| gen_single_tube(&format!("tube{}", i + 1), p, gs, design, sigma, rng))
        .collect();
    Ok(Population { tubes, params, rejected: draws - m })
}

/// Monte Carlo summary of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub sd_theory: Option<f64>,
    pub coverage: Option<f64>,
    /// Successful replicates.
    pub n: usize,
}

/// `bias = mean - truth`, `sd` the sample sd, `coverage` the hit fraction.
pub fn summarize(
    name: &str,
    estimates: &[f64],
    truth: f64,
    sd_theory: Option<f64>,
    hits: Option<&[bool]>,
) -> Result<ParamSummary> {
    let n = estimates.len();
    if n < 2 {
        return Err(Error::TooFewReplicates(n));
    }
    let mean = estimates.iter().sum::<f64>() / n as f64;
    let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1) as f64;
    let coverage = match hits {
        Some(h) if h.len() != n => return Err(Error::LengthMismatch(h.len(), n)),
        Some(h) => Some(h.iter().filter(|&&b| b).count() as f64 / n as f64),
        None => None,
    };
    Ok(ParamSummary { name: name.to_string(), truth, mean, bias: mean - truth, sd: var.sqrt(), sd_theory, coverage, n })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    /// Replicates whose optimizer hit its iteration limit (still included).
    pub nonconverged: usize,
    /// Intervals had zero width (no noise), so coverage is not reported.
    pub coverage_undefined: bool,
    pub seed: u64,
    pub params: Vec<ParamSummary>,
}

impl SimReport {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// One row per parameter.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        write_reports_csv(std::slice::from_ref(self), out)
    }
}

/// Rows of several reports under one header, numbers to 6 significant digits.
pub fn write_reports_csv<W: std::io::Write>(reports: &[SimReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "parameter", "truth", "mean", "bias", "sd", "sd_theory", "coverage", "n"])?;
    let num = |v: f64| format_sig(v, 6);
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    for r in reports {
        for p in &r.params {
            w.write_record([
                r.method.clone(),
                p.name.clone(),
                num(p.truth),
                num(p.mean),
                num(p.bias),
                num(p.sd),
                opt(p.sd_theory),
                opt(p.coverage),
                p.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

struct SingleRep {
    values: [f64; 5],
    hits: [bool; 4],
    converged: bool,
}

/// Repeated single-tube CNLS fits. Parameters are reported in the order
/// `k_nf, k_pf, mu, lambda, sigma`.
pub fn run_mc_single(config: &SimConfig, gs: &GroundState) -> Result<SimReport> {
    config.validate()?;
    let c = &config.constants;
    let truth = config.truth.resolve(c, gs)?;
    let truth_model = natural_to_model(&truth, c, gs.l1_norm())?;

    // theoretical sds from K at the truth (fixed designs only)
    let sd_theory = match config.design.fixed_positions() {
        Some(xs) if config.sigma > 0.0 => {
            let k = k_matrix(&truth, gs, &xs);
            k.inverse().map(|k_inv| {
                let cov = k_inv.scale(config.sigma * config.sigma / xs.len() as f64);
                let a = delta_matrix_a(&truth, c, gs.l1_norm()).expect("feasible truth");
                let cov_m = model_covariance(&a, &cov);
                [cov_m.a11.sqrt(), cov_m.a22.sqrt(), cov.a11.sqrt(), cov.a22.sqrt()]
            })
        }
        _ => None,
    };

    let opts = CnlsOptions::default();
    let results: Vec<Result<SingleRep>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = config.rng_for(r);
            let data = gen_single_tube("sim", &truth, gs, &config.design, config.sigma, &mut rng);
            let fit = cnls_fit(&data, c, gs, &opts)?;
            let hits = match cnls_confidence(&fit, config.level) {
                Ok(ci) => [
                    ci.k_nf.contains(truth_model.k_nf),
                    ci.k_pf.contains(truth_model.k_pf),
                    ci.mu.contains(truth.mu),
                    ci.lambda.contains(truth.lambda),
                ],
                Err(_) => [false; 4],
            };
            Ok(SingleRep {
                values: [fit.model.k_nf, fit.model.k_pf, fit.natural.mu, fit.natural.lambda, fit.sigma],
                hits,
                converged: fit.converged,
            })
        })
        .collect();

    let mut reps = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(rep) => reps.push(rep),
            Err(e) => {
                log::warn!("replicate failed: {e}");
                failures += 1;
            }
        }
    }
    let coverage_undefined = config.sigma == 0.0;
    let names = ["k_nf", "k_pf", "mu", "lambda", "sigma"];
    let truths = [truth_model.k_nf, truth_model.k_pf, truth.mu, truth.lambda, config.sigma];
    let mut params = Vec::new();
    for i in 0..5 {
        let est: Vec<f64> = reps.iter().map(|r| r.values[i]).collect();
        let hits: Option<Vec<bool>> =
            if i < 4 && !coverage_undefined { Some(reps.iter().map(|r| r.hits[i]).collect()) } else { None };
        let sd_t = if i < 4 { sd_theory.map(|s| s[i]) } else { None };
        params.push(summarize(names[i], &est, truths[i], sd_t, hits.as_deref())?);
    }
    Ok(SimReport {
        method: "CNLS".into(),
        replicates: config.replicates,
        failures,
        nonconverged: reps.iter().filter(|r| !r.converged).count(),
        coverage_undefined,
        seed: config.seed,
        params,
    })
}

struct MixedRep {
    values: [f64; 7],
    hits: Option<[bool; 4]>,
    converged: bool,
}

fn fit_mixed(tubes: &[TubeData], c: &ModelConstants, gs: &GroundState, method: MixedMethod) -> Result<MixedFit> {
    let cmm = cmm_fit(tubes, c, gs, &CmmOptions::default())?;
    match method {
        MixedMethod::Cmm => Ok(cmm),
        MixedMethod::Creml => creml_fit(tubes, c, gs, &CremlOptions { start: Some(cmm), ..Default::default() }),
    }
}

/// Repeated population fits. Parameters are reported in the order
/// `k_nf, k_pf, mu, lambda, sigma, Sigma11, Sigma22`; coverage is reported
/// for CMM only.
pub fn run_mc_mixed(config: &SimConfig, gs: &GroundState, method: MixedMethod) -> Result<SimReport> {
    config.validate()?;
    if config.m < 2 {
        return Err(Error::InvalidInput(format!("population mode needs m >= 2, got {}", config.m)));
    }
    let c = &config.constants;
    let truth = config.truth.resolve(c, gs)?;
    let truth_model = natural_to_model(&truth, c, gs.l1_norm())?;
    let quantile = config.population_quantile.for_tubes(config.m);
    let with_coverage = method == MixedMethod::Cmm && config.sigma > 0.0;

    let results: Vec<Result<MixedRep>> = (0..config.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = config.rng_for(r);
            let pop =
                gen_population(&truth, &config.sigma_between, config.sigma, config.m, &config.design, gs, c, &mut rng)?;
            let fit = fit_mixed(&pop.tubes, c, gs, method)?;
            let hits = if with_coverage {
                cmm_population_ci_with(&fit, gs, c, config.level, quantile).ok().map(|ci| {
                    [
                        ci.k_nf.contains(truth_model.k_nf),
                        ci.k_pf.contains(truth_model.k_pf),
                        ci.mu.contains(truth.mu),
                        ci.lambda.contains(truth.lambda),
                    ]
                })
            } else {
                None
            };
            Ok(MixedRep {
                values: [
                    fit.model.k_nf,
                    fit.model.k_pf,
                    fit.theta.mu,
                    fit.theta.lambda,
                    fit.sigma2.sqrt(),
                    fit.sigma_between.a11,
                    fit.sigma_between.a22,
                ],
                hits: if with_coverage { Some(hits.unwrap_or([false; 4])) } else { None },
                converged: fit.converged,
            })
        })
        .collect();

    let mut reps = Vec::with_capacity(results.len());
    let mut failures = 0;
    for r in results {
        match r {
            Ok(rep) => reps.push(rep),
            Err(e) => {
                log::warn!("replicate failed: {e}");
                failures += 1;
            }
        }
    }
    let names = ["k_nf", "k_pf", "mu", "lambda", "sigma", "Sigma11", "Sigma22"];
    let truths = [
        truth_model.k_nf,
        truth_model.k_pf,
        truth.mu,
        truth.lambda,
        config.sigma,
        config.sigma_between.a11,
        config.sigma_between.a22,
    ];
    let mut params = Vec::new();
    for i in 0..7 {
        let est: Vec<f64> = reps.iter().map(|r| r.values[i]).collect();
        let hits: Option<Vec<bool>> = if i < 4 && with_coverage {
            Some(reps.iter().map(|r| r.hits.expect("coverage")[i]).collect())
        } else {
            None
        };
        params.push(summarize(names[i], &est, truths[i], None, hits.as_deref())?);
    }
    Ok(SimReport {
        method: match method {
            MixedMethod::Cmm => "CMM".into(),
            MixedMethod::Creml => "CREML".into(),
        },
        replicates: config.replicates,
        failures,
        nonconverged: reps.iter().filter(|r| !r.converged).count(),
        coverage_undefined: config.sigma == 0.0,
        seed: config.seed,
        params,
    })
}
