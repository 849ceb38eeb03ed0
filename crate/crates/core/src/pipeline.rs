//! Measured-data path: CSV ingestion, quantile normalization across tubes,
//! optional outlier removal, kernel-smoothed background subtraction and
//! scaling, and fit orchestration with report tables.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elliptic::GroundState;
use crate::error::{Error, Result};
use crate::estimators::{
    cmm_fit, cmm_population_ci_with, cnls_confidence, cnls_fit, creml_fit, CiQuantile, CmmOptions, CnlsFit,
    CnlsOptions, CremlOptions, MixedFit, ParamIntervals, TubeData,
};
use crate::numerics::format_sig;
use crate::steady_state::{eval_r, ModelConstants, NaturalParams};

/// Grid size of the pooled smoother.
pub const SMOOTH_GRID_POINTS: usize = 200;
/// Points of the fitted-curve grid for pooled and population curves.
const CURVE_GRID_POINTS: usize = 201;
/// Consistency factor turning a MAD into a normal-scale sd.
const MAD_TO_SD: f64 = 1.4826;

/// Where a dataset came from and what has been done to it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<String>,
    steps: Vec<String>,
}

impl Provenance {
    pub fn new(source: Option<String>) -> Self {
        Provenance { source, steps: Vec::new() }
    }

    /// Preprocessing steps in execution order.
    pub fn steps(&self) -> &[String] {
        &self.steps
    }

    fn record(&mut self, step: String) {
        self.steps.push(step);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tubes: Vec<TubeData>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(tubes: Vec<TubeData>, source: Option<String>) -> Result<Self> {
        if tubes.is_empty() {
            return Err(Error::InvalidInput("dataset has no tubes".into()));
        }
        for t in &tubes {
            t.validate()?;
        }
        Ok(Dataset { tubes, provenance: Provenance::new(source) })
    }

    pub fn m(&self) -> usize {
        self.tubes.len()
    }

    pub fn total_points(&self) -> usize {
        self.tubes.iter().map(|t| t.len()).sum()
    }

    fn pooled(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.tubes.iter().flat_map(|t| t.positions.iter().copied().zip(t.intensities.iter().copied()))
    }

    /// All tubes concatenated into one, in tube order.
    pub fn concatenated(&self, tube_id: &str) -> Result<TubeData> {
        let (positions, intensities) = self.pooled().unzip();
        TubeData::new(tube_id, positions, intensities)
    }

    /// Writes `tube_id,position,intensity` rows, numbers to 6 significant
    /// digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tube_id", "position", "intensity"])?;
        for t in &self.tubes {
            for (x, y) in t.positions.iter().zip(&t.intensities) {
                w.write_record([t.tube_id.as_str(), &format_sig(*x, 6), &format_sig(*y, 6)])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `tube_id,position,intensity` CSV. Tubes keep their order of first
/// appearance and positions are sorted ascending. With `l0`, positions
/// outside `[-l0, l0]` are rejected.
pub fn read_tubes_csv(path: impl AsRef<Path>, l0: Option<f64>) -> Result<Dataset> {
    let path = path.as_ref();
    let file =
        std::fs::File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    read_tubes(file, &path.display().to_string(), l0)
}

/// Reader form of [`read_tubes_csv`]; `source` labels errors and provenance.
pub fn read_tubes<R: Read>(input: R, source: &str, l0: Option<f64>) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse { path: source.to_string(), line, message };
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(parse_err(1, "empty file".into()));
    }
    let expected = ["tube_id", "position", "intensity"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(parse_err(
            1,
            format!(
                "header must be `tube_id,position,intensity`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    let mut n_rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let number = |idx: usize, name: &str| -> Result<f64> {
            let raw = &record[idx];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(line, format!("{name} `{raw}` is not a finite number"))),
            }
        };
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(parse_err(line, "empty tube_id".into()));
        }
        let x = number(1, "position")?;
        let y = number(2, "intensity")?;
        if let Some(l0) = l0 {
            if x.abs() > l0 {
                return Err(parse_err(line, format!("position {x} outside [-{l0}, {l0}]")));
            }
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((x, y));
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(parse_err(1, "no data rows".into()));
    }

    let short: Vec<&str> =
        order.iter().filter(|id| rows[*id].len() < TubeData::MIN_POINTS).map(String::as_str).collect();
    if !short.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{source}: tubes with fewer than {} points: {}",
            TubeData::MIN_POINTS,
            short.join(", ")
        )));
    }
    let tubes = order
        .iter()
        .map(|id| {
            let mut pts = rows.remove(id).unwrap_or_default();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (positions, intensities) = pts.into_iter().unzip();
            TubeData::new(id.clone(), positions, intensities)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(tubes, Some(source.to_string()))?;
    ds.provenance.record(format!("read {n_rows} rows, {} tubes from {source}", ds.m()));
    log::info!("read {n_rows} rows in {} tubes from {source}", ds.m());
    Ok(ds)
}

/// Replaces each tube's r-th order statistic by the mean of all tubes' r-th
/// order statistics. Ties within a tube share the mean of their ranks'
/// targets.
pub fn quantile_normalize(ds: &Dataset) -> Result<Dataset> {
    let n = ds.tubes[0].len();
    if let Some(t) = ds.tubes.iter().find(|t| t.len() != n) {
        return Err(Error::InvalidInput(format!(
            "quantile normalization needs equal tube lengths: tube {} has {} points, tube {} has {n}",
            t.tube_id,
            t.len(),
            ds.tubes[0].tube_id
        )));
    }
    let orders: Vec<Vec<usize>> = ds
        .tubes
        .iter()
        .map(|t| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| t.intensities[a].total_cmp(&t.intensities[b]));
            idx
        })
        .collect();
    let mut target = vec![0.0; n];
    for (t, idx) in ds.tubes.iter().zip(&orders) {
        for (r, &i) in idx.iter().enumerate() {
            target[r] += t.intensities[i];
        }
    }
    let m = ds.m() as f64;
    target.iter_mut().for_each(|v| *v /= m);

    let mut out = ds.clone();
    for (t, idx) in out.tubes.iter_mut().zip(&orders) {
        let original = t.intensities.clone();
        let mut r = 0;
        while r < n {
            let mut end = r + 1;
            while end < n && original[idx[end]] == original[idx[r]] {
                end += 1;
            }
            let value = target[r..end].iter().sum::<f64>() / (end - r) as f64;
            for &i in &idx[r..end] {
                t.intensities[i] = value;
            }
            r = end;
        }
    }
    out.provenance.record(format!("quantile normalization across {} tubes", ds.m()));
    Ok(out)
}

/// Rule-of-thumb bandwidth `1.06 sd(x) N^(-1/5)` over pooled positions.
pub fn default_bandwidth(ds: &Dataset) -> f64 {
    let xs: Vec<f64> = ds.pooled().map(|p| p.0).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Nadaraya–Watson smooth of the pooled data with a Gaussian kernel on
/// [`SMOOTH_GRID_POINTS`] equally spaced points spanning the positions.
pub fn smooth_pooled(ds: &Dataset, bandwidth: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let pts: Vec<(f64, f64)> = ds.pooled().collect();
    if pts.is_empty() {
        return Err(Error::InvalidInput("no pooled data to smooth".into()));
    }
    let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (SMOOTH_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SMOOTH_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let inv = 0.5 / (bandwidth * bandwidth);
    let values = grid
        .iter()
        .map(|&g| {
            // shift exponents by the nearest point so narrow kernels cannot underflow to 0/0
            let d_min = pts.iter().map(|p| (p.0 - g).powi(2)).fold(f64::INFINITY, f64::min);
            let (num, den) = pts.iter().fold((0.0, 0.0), |(num, den), &(x, y)| {
                let w = (-((x - g).powi(2) - d_min) * inv).exp();
                (num + w * y, den + w)
            });
            num / den
        })
        .collect();
    Ok((grid, values))
}

/// Background level: the minimum of the pooled smooth.
pub fn estimate_background(ds: &Dataset, bandwidth: f64) -> Result<f64> {
    let (_, values) = smooth_pooled(ds, bandwidth)?;
    Ok(values.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Subtracts `background`, clamps negatives to zero when `clamp` is set, and
/// divides by the maximum of the background-subtracted pooled smooth. Single
/// points above the smoothed peak stay above 1.
pub fn standardize(ds: &Dataset, background: f64, bandwidth: f64, clamp: bool) -> Result<Dataset> {
    let (_, values) = smooth_pooled(ds, bandwidth)?;
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let peak = top - background;
    // excess at rounding level of the data counts as flat
    if !(peak > 1e-12 * top.abs().max(background.abs())) || !peak.is_finite() {
        return Err(Error::DegenerateData(format!(
            "smoothed curve does not rise above the background {background} (peak excess {peak})"
        )));
    }
    let mut out = ds.clone();
    for t in &mut out.tubes {
        t.intensities.iter_mut().for_each(|y| *y = subtract(*y, background, clamp) / peak);
    }
    out.provenance.record(format!(
        "subtracted background {}{}, scaled by 1/{} (bandwidth {})",
        format_sig(background, 6),
        if clamp { ", clamped negatives to 0" } else { "" },
        format_sig(peak, 6),
        format_sig(bandwidth, 6)
    ));
    Ok(out)
}

fn subtract(y: f64, background: f64, clamp: bool) -> f64 {
    if clamp {
        (y - background).max(0.0)
    } else {
        y - background
    }
}

/// Sliding-window median filter: drops points further than
/// `threshold` robust sds (`1.4826 MAD`) from the median of the intensities
/// within `half_window` of their position in the same tube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierFilter {
    pub half_window: f64,
    pub threshold: f64,
}

impl Default for OutlierFilter {
    fn default() -> Self {
        OutlierFilter { half_window: 1.0, threshold: 5.0 }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn remove_outliers(ds: &Dataset, filter: &OutlierFilter) -> Result<Dataset> {
    if !(filter.half_window > 0.0) || !(filter.threshold > 0.0) {
        return Err(Error::InvalidInput(format!("outlier filter needs positive window and threshold, got {filter:?}")));
    }
    let mut out = ds.clone();
    let mut dropped = 0usize;
    for t in &mut out.tubes {
        let keep: Vec<bool> = (0..t.len())
            .map(|i| {
                let mut window: Vec<f64> = t
                    .positions
                    .iter()
                    .zip(&t.intensities)
                    .filter(|(x, _)| (*x - t.positions[i]).abs() <= filter.half_window)
                    .map(|(_, y)| *y)
                    .collect();
                let med = median(&mut window);
                let mut dev: Vec<f64> = window.iter().map(|y| (y - med).abs()).collect();
                let mad = median(&mut dev);
                mad == 0.0 || (t.intensities[i] - med).abs() <= filter.threshold * MAD_TO_SD * mad
            })
            .collect();
        let (positions, intensities) =
            t.positions.iter().zip(&t.intensities).zip(&keep).filter(|(_, k)| **k).map(|((x, y), _)| (*x, *y)).unzip();
        dropped += keep.iter().filter(|k| !**k).count();
        t.positions = positions;
        t.intensities = intensities;
        t.validate()?;
    }
    out.provenance
        .record(format!("removed {dropped} outliers (>{} robust sd within ±{})", filter.threshold, filter.half_window));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub quantile_normalize: bool,
    pub outliers: Option<OutlierFilter>,
    pub background: bool,
    pub standardize: bool,
    /// Set negative values to zero after background subtraction. Off by
    /// default: on noisy data it lifts the flat tails by about `0.4 σ` and
    /// biases `μ̂` low.
    pub clamp_negative: bool,
    /// Smoother bandwidth; defaults to [`default_bandwidth`].
    pub bandwidth: Option<f64>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            quantile_normalize: true,
            outliers: None,
            background: true,
            standardize: true,
            clamp_negative: false,
            bandwidth: None,
        }
    }
}

impl PreprocessOptions {
    pub fn none() -> Self {
        PreprocessOptions {
            quantile_normalize: false,
            outliers: None,
            background: false,
            standardize: false,
            clamp_negative: false,
            bandwidth: None,
        }
    }
}

/// Quantile normalization, outlier removal, then background subtraction and
/// scaling, each when enabled. Without background subtraction the data are
/// scaled against a zero background.
pub fn preprocess(ds: &Dataset, opts: &PreprocessOptions) -> Result<Dataset> {
    let mut out = ds.clone();
    if opts.quantile_normalize {
        out = quantile_normalize(&out)?;
    }
    if let Some(f) = &opts.outliers {
        out = remove_outliers(&out, f)?;
    }
    if opts.background || opts.standardize {
        let bandwidth = opts.bandwidth.unwrap_or_else(|| default_bandwidth(&out));
        let background = if opts.background { estimate_background(&out, bandwidth)? } else { 0.0 };
        if opts.standardize {
            out = standardize(&out, background, bandwidth, opts.clamp_negative)?;
        } else {
            for t in &mut out.tubes {
                t.intensities.iter_mut().for_each(|y| *y = subtract(*y, background, opts.clamp_negative));
            }
            out.provenance.record(format!(
                "subtracted background {}{} (bandwidth {})",
                format_sig(background, 6),
                if opts.clamp_negative { ", clamped negatives to 0" } else { "" },
                format_sig(bandwidth, 6)
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// One CNLS fit to all tubes concatenated.
    CnlsPooled,
    CnlsPerTube,
    Cmm,
    Creml,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub level: f64,
    pub cnls: CnlsOptions,
    /// CMM: drop tubes whose CNLS fit fails.
    pub exclude_failed: bool,
    pub creml_tol: f64,
    pub creml_max_outer: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        let creml = CremlOptions::default();
        FitOptions {
            level: 0.95,
            cnls: CnlsOptions::default(),
            exclude_failed: false,
            creml_tol: creml.tol,
            creml_max_outer: creml.max_outer,
        }
    }
}

/// A single CNLS fit, per tube or pooled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeEstimate {
    pub tube_id: String,
    pub n: usize,
    pub mu: f64,
    pub lambda: f64,
    pub k_nf: f64,
    pub k_pf: f64,
    pub sigma: f64,
    pub intervals: Option<ParamIntervals>,
    pub converged: bool,
    pub at_boundary: bool,
}

impl TubeEstimate {
    fn from_fit(tube_id: &str, fit: &CnlsFit, level: f64) -> Self {
        TubeEstimate {
            tube_id: tube_id.to_string(),
            n: fit.n,
            mu: fit.natural.mu,
            lambda: fit.natural.lambda,
            k_nf: fit.model.k_nf,
            k_pf: fit.model.k_pf,
            sigma: fit.sigma,
            intervals: cnls_confidence(fit, level).ok(),
            converged: fit.converged,
            at_boundary: fit.at_boundary,
        }
    }
}

/// Per-tube estimate from a mixed fit: CNLS estimates for CMM, BLUPs for
/// CREML.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubePrediction {
    pub tube_id: String,
    pub mu: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationEstimate {
    pub m: usize,
    pub mu: f64,
    pub lambda: f64,
    pub k_nf: f64,
    pub k_pf: f64,
    /// Within-tube residual sd.
    pub sigma: f64,
    pub sigma_mu: f64,
    pub sigma_lambda: f64,
    /// Between-tube correlation of `(μ, λ)`; NaN when a variance is zero.
    pub rho: f64,
    pub sigma11: f64,
    pub sigma12: f64,
    pub sigma22: f64,
    pub intervals: Option<ParamIntervals>,
    pub per_tube: Vec<TubePrediction>,
    pub excluded: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    pub boundary: bool,
}

impl PopulationEstimate {
    fn from_fit(fit: &MixedFit, intervals: Option<ParamIntervals>) -> Self {
        let s = &fit.sigma_between;
        PopulationEstimate {
            m: fit.m(),
            mu: fit.theta.mu,
            lambda: fit.theta.lambda,
            k_nf: fit.model.k_nf,
            k_pf: fit.model.k_pf,
            sigma: fit.sigma2.sqrt(),
            sigma_mu: s.a11.max(0.0).sqrt(),
            sigma_lambda: s.a22.max(0.0).sqrt(),
            rho: s.correlation(),
            sigma11: s.a11,
            sigma12: s.a12,
            sigma22: s.a22,
            intervals,
            per_tube: fit
                .tube_ids
                .iter()
                .zip(&fit.per_tube)
                .map(|(id, p)| TubePrediction { tube_id: id.clone(), mu: p.mu, lambda: p.lambda })
                .collect(),
            excluded: fit.excluded.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            boundary: fit.boundary,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub method: FitMethod,
    pub constants: ModelConstants,
    pub level: f64,
    pub source: Option<String>,
    pub preprocessing: Vec<String>,
    /// CNLS fits: one per tube, or a single pooled fit.
    pub tubes: Vec<TubeEstimate>,
    pub population: Option<PopulationEstimate>,
}

impl FitReport {
    /// All fits converged.
    pub fn converged(&self) -> bool {
        self.tubes.iter().all(|t| t.converged) && self.population.as_ref().is_none_or(|p| p.converged)
    }
}

/// Row of `fitted_curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tube_id: String,
    pub x: f64,
    #[serde(rename = "R_hat")]
    pub r_hat: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub report: FitReport,
    pub curves: Vec<CurvePoint>,
}

impl FitOutput {
    /// Writes `tube_id,x,R_hat` rows, numbers to 6 significant digits.
    pub fn write_curves_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tube_id", "x", "R_hat"])?;
        for p in &self.curves {
            w.write_record([p.tube_id.as_str(), &format_sig(p.x, 6), &format_sig(p.r_hat, 6)])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn curve_at(tube_id: &str, n: &NaturalParams, xs: &[f64], gs: &GroundState) -> Vec<CurvePoint> {
    xs.iter().map(|&x| CurvePoint { tube_id: tube_id.to_string(), x, r_hat: eval_r(n, gs, x) }).collect()
}

fn span_grid(ds: &Dataset) -> Vec<f64> {
    let lo = ds.pooled().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = ds.pooled().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let step = (hi - lo) / (CURVE_GRID_POINTS - 1) as f64;
    (0..CURVE_GRID_POINTS).map(|i| lo + step * i as f64).collect()
}

/// Runs `method` on a preprocessed dataset. Curves are evaluated at each
/// tube's positions; pooled and population curves (ids `pooled` and
/// `population`) on an even grid over the data span.
pub fn fit_report(
    ds: &Dataset,
    c: &ModelConstants,
    gs: &GroundState,
    method: FitMethod,
    opts: &FitOptions,
) -> Result<FitOutput> {
    let mut curves = Vec::new();
    let mut tubes = Vec::new();
    let mut population = None;
    match method {
        FitMethod::CnlsPooled => {
            let pooled = ds.concatenated("pooled")?;
            let fit = cnls_fit(&pooled, c, gs, &opts.cnls)?;
            curves.extend(curve_at("pooled", &fit.natural, &span_grid(ds), gs));
            tubes.push(TubeEstimate::from_fit("pooled", &fit, opts.level));
        }
        FitMethod::CnlsPerTube => {
            for t in &ds.tubes {
                let fit = cnls_fit(t, c, gs, &opts.cnls).map_err(|e| e.in_tube(&t.tube_id))?;
                curves.extend(curve_at(&t.tube_id, &fit.natural, &t.positions, gs));
                tubes.push(TubeEstimate::from_fit(&t.tube_id, &fit, opts.level));
            }
        }
        FitMethod::Cmm | FitMethod::Creml => {
            let cmm_opts = CmmOptions { cnls: opts.cnls.clone(), exclude_failed: opts.exclude_failed, parallel: true };
            let fit = if method == FitMethod::Cmm {
                cmm_fit(&ds.tubes, c, gs, &cmm_opts)?
            } else {
                let creml_opts =
                    CremlOptions { start: None, tol: opts.creml_tol, max_outer: opts.creml_max_outer, cmm: cmm_opts };
                creml_fit(&ds.tubes, c, gs, &creml_opts)?
            };
            let q = CiQuantile::StudentT((fit.m() - 1) as f64);
            let intervals = match cmm_population_ci_with(&fit, gs, c, opts.level, q) {
                Ok(ci) => Some(ci),
                Err(e) => {
                    log::warn!("population intervals unavailable: {e}");
                    None
                }
            };
            for (id, p) in fit.tube_ids.iter().zip(&fit.per_tube) {
                let t = ds.tubes.iter().find(|t| &t.tube_id == id).expect("fit only reports known tubes");
                curves.extend(curve_at(id, p, &t.positions, gs));
            }
            curves.extend(curve_at("population", &fit.theta, &span_grid(ds), gs));
            population = Some(PopulationEstimate::from_fit(&fit, intervals));
        }
    }
    let report = FitReport {
        method,
        constants: *c,
        level: opts.level,
        source: ds.provenance.source.clone(),
        preprocessing: ds.provenance.steps().to_vec(),
        tubes,
        population,
    };
    Ok(FitOutput { report, curves })
}
