use std::path::{Path, PathBuf};

use polarity::estimators::{CnlsOptions, MixedMethod};
use polarity::pipeline::{
    fit_report, preprocess, read_tubes_csv, FitMethod, FitOptions, FitReport, OutlierFilter, PreprocessOptions,
};
use polarity::simulation::{run_mc_mixed, run_mc_single, write_reports_csv, SimConfig, SimReport};
use polarity::steady_state::{discriminant, forward_solve, lambda_crit, solve_lambda_roots};
use polarity::{solve_ground_state, Branch, GroundState, ModelConstants, ModelParams};
use serde::Serialize;

use crate::config::{pick, FileConfig};
use crate::error::CliError;
use crate::report::{sig, GroundStateInfo, Report};
use crate::{ConstantsArgs, FitArgs, ForwardArgs, GroundStateArgs, SimulateArgs, SolveArgs};

/// Recorded in reports of deterministic commands when no seed is given.
const DEFAULT_SEED: u64 = 20_240_501;
const DEFAULT_HALF_WIDTH: f64 = 30.0;
const DEFAULT_GS_STEP: f64 = 0.01;
const TOOL: &str = env!("CARGO_PKG_NAME");
const VERSION: &str = env!("CARGO_PKG_VERSION");

fn constants(a: &ConstantsArgs, file: &FileConfig, default: ModelConstants) -> Result<ModelConstants, CliError> {
    let f = &file.constants;
    Ok(ModelConstants::new(
        pick(a.alpha, f.alpha, default.alpha),
        pick(a.diffusion, f.diffusion, default.diffusion),
        pick(a.r_tot, f.r_tot, default.r_tot),
        pick(a.l0, f.l0, default.l0),
    )?)
}

#[derive(Debug, Clone, Serialize)]
struct GroundStateSettings {
    alpha: f64,
    half_width: f64,
    step: f64,
}

impl GroundStateSettings {
    fn resolve(alpha: f64, a: &GroundStateArgs, file: &FileConfig) -> Self {
        GroundStateSettings {
            alpha,
            half_width: pick(a.half_width, file.ground_state.half_width, DEFAULT_HALF_WIDTH),
            step: pick(a.gs_step, file.ground_state.step, DEFAULT_GS_STEP),
        }
    }

    fn solve(&self) -> Result<GroundState, CliError> {
        Ok(solve_ground_state(self.alpha, self.half_width, self.step)?)
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

#[derive(Debug, Serialize)]
struct SolveConfig {
    ground_state: GroundStateSettings,
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SolveResult {
    sigma0_at_0: f64,
    l1_norm: f64,
    half_max_position: f64,
}

pub fn solve(a: &SolveArgs, file: &FileConfig, seed: Option<u64>) -> Result<(), CliError> {
    let settings = GroundStateSettings {
        alpha: pick(a.alpha, file.constants.alpha, 1.2),
        half_width: pick(a.half_width, file.ground_state.half_width, DEFAULT_HALF_WIDTH),
        step: pick(a.step, file.ground_state.step, DEFAULT_GS_STEP),
    };
    let gs = settings.solve()?;
    let result =
        SolveResult { sigma0_at_0: gs.eval(0.0), l1_norm: gs.l1_norm(), half_max_position: gs.half_max_position() };
    println!("sigma0(0) = {}", sig(result.sigma0_at_0));
    println!("|sigma0|_1 = {}", sig(result.l1_norm));
    println!("half-max position = {}", sig(result.half_max_position));
    if let Some(out) = &a.out {
        gs.write_csv(create(out)?)?;
    }
    if let Some(path) = &a.report {
        let config = SolveConfig { ground_state: settings, out: a.out.clone() };
        report("solve-ground-state", seed, &config, &gs, &result).write(path)?;
    }
    Ok(())
}

fn report<'a, C: Serialize, R: Serialize>(
    command: &'static str,
    seed: Option<u64>,
    config: &'a C,
    gs: &GroundState,
    result: &'a R,
) -> Report<'a, C, R> {
    Report {
        tool: TOOL,
        version: VERSION,
        command,
        seed: seed.unwrap_or(DEFAULT_SEED),
        config,
        ground_state: GroundStateInfo::of(gs),
        result,
    }
}

#[derive(Debug, Serialize)]
struct ForwardConfig {
    constants: ModelConstants,
    ground_state: GroundStateSettings,
    params: ModelParams,
    branch: Branch,
    grid_step: f64,
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ForwardResult {
    discriminant: f64,
    lambda_crit: f64,
    roots: Vec<f64>,
    lambda: Option<f64>,
    mu: Option<f64>,
    lambda_prime: Option<f64>,
    max_r: Option<f64>,
    ide_residual: Option<f64>,
}

pub fn forward(a: &ForwardArgs, file: &FileConfig, seed: Option<u64>) -> Result<(), CliError> {
    let c = constants(&a.constants, file, ModelConstants::simulation())?;
    let f = &file.forward;
    let params = ModelParams::new(pick(a.k_nf, f.k_nf, 0.1), pick(a.k_pf, f.k_pf, 0.1125))?;
    let branch: Branch = pick(a.branch.clone(), f.branch.clone(), "larger".into()).parse()?;
    let grid_step = pick(a.grid_step, f.grid_step, 0.01);
    let out = a.out.clone().or(f.out.clone());
    let settings = GroundStateSettings::resolve(c.alpha, &a.ground_state, file);
    let gs = settings.solve()?;
    let l1 = gs.l1_norm();

    let disc = discriminant(&params, &c, l1);
    let mut result = ForwardResult {
        discriminant: disc,
        lambda_crit: lambda_crit(&params, &c, l1),
        roots: solve_lambda_roots(&params, &c, l1, 1e-14),
        lambda: None,
        mu: None,
        lambda_prime: None,
        max_r: None,
        ide_residual: None,
    };
    println!("Lambda = {}", sig(result.discriminant));
    println!("lambda_c = {}", sig(result.lambda_crit));
    println!("roots = [{}]", result.roots.iter().map(|r| sig(*r)).collect::<Vec<_>>().join(", "));

    let solved = if result.roots.is_empty() {
        Err(CliError::NoSteadyState(format!("discriminant {} > 0", sig(disc))))
    } else {
        let profile = forward_solve(&params, &c, &gs, branch, grid_step)?;
        result.lambda = Some(profile.natural.lambda);
        result.mu = Some(profile.natural.mu);
        result.lambda_prime = Some(profile.lambda_prime);
        result.max_r = Some(profile.max_value());
        result.ide_residual = Some(profile.ide_residual(&params, &c)?);
        let label = match branch {
            Branch::Larger => "larger",
            Branch::Smaller => "smaller",
        };
        println!("lambda ({label} root) = {}", sig(profile.natural.lambda));
        println!("mu = {}", sig(profile.natural.mu));
        println!("lambda' = {}", sig(profile.lambda_prime));
        println!("max R = {}", sig(profile.max_value()));
        if let Some(path) = &out {
            profile.write_csv(create(path)?)?;
        }
        Ok(())
    };
    if let Some(path) = &a.report {
        let config = ForwardConfig { constants: c, ground_state: settings, params, branch, grid_step, out };
        report("forward", seed, &config, &gs, &result).write(path)?;
    }
    solved
}

fn parse_method(s: &str) -> Result<FitMethod, CliError> {
    match s {
        "cnls" | "cnls-per-tube" => Ok(FitMethod::CnlsPerTube),
        "cnls-pooled" => Ok(FitMethod::CnlsPooled),
        "cmm" => Ok(FitMethod::Cmm),
        "creml" => Ok(FitMethod::Creml),
        other => Err(CliError::Config(format!("unknown method '{other}' (expected cnls|cnls-pooled|cmm|creml)"))),
    }
}

#[derive(Debug, Serialize)]
struct FitConfigResolved {
    input: PathBuf,
    method: FitMethod,
    start: Option<&'static str>,
    constants: ModelConstants,
    window_checked: bool,
    ground_state: GroundStateSettings,
    level: f64,
    preprocess: PreprocessOptions,
    exclude_failed: bool,
    creml_tol: f64,
    creml_max_outer: usize,
    out_dir: PathBuf,
}

fn print_fit(r: &FitReport) {
    for t in &r.tubes {
        println!(
            "{}: n = {}, mu = {}, lambda = {}, k_nf = {}, k_pf = {}, sigma = {}{}",
            t.tube_id,
            t.n,
            sig(t.mu),
            sig(t.lambda),
            sig(t.k_nf),
            sig(t.k_pf),
            sig(t.sigma),
            if t.converged { "" } else { " (not converged)" }
        );
    }
    if let Some(p) = &r.population {
        println!(
            "population (m = {}): mu = {}, lambda = {}, k_nf = {}, k_pf = {}, sigma = {}",
            p.m,
            sig(p.mu),
            sig(p.lambda),
            sig(p.k_nf),
            sig(p.k_pf),
            sig(p.sigma)
        );
        println!(
            "between-tube: sd(mu) = {}, sd(lambda) = {}, rho = {}; iterations = {}{}",
            sig(p.sigma_mu),
            sig(p.sigma_lambda),
            sig(p.rho),
            p.iterations,
            if p.converged { "" } else { " (not converged)" }
        );
        for t in &p.per_tube {
            println!("  {}: mu = {}, lambda = {}", t.tube_id, sig(t.mu), sig(t.lambda));
        }
        if let Some(ci) = &p.intervals {
            for (name, iv) in [("mu", ci.mu), ("lambda", ci.lambda), ("k_nf", ci.k_nf), ("k_pf", ci.k_pf)] {
                println!("  {name}: {} [{}, {}]", sig(iv.estimate), sig(iv.lower), sig(iv.upper));
            }
        }
    }
}

pub fn fit(a: &FitArgs, file: &FileConfig, seed: Option<u64>) -> Result<(), CliError> {
    let f = &file.fit;
    let input = a
        .input
        .clone()
        .or(f.input.clone())
        .ok_or_else(|| CliError::Config("no input file (positional argument or [fit] input)".into()))?;
    let c = constants(&a.constants, file, ModelConstants::pollen_data())?;
    let window_checked = a.constants.l0.or(file.constants.l0).is_some();
    let ds = read_tubes_csv(&input, window_checked.then_some(c.l0))?;

    let default_method = if ds.m() > 1 { "creml" } else { "cnls" };
    let method = parse_method(&pick(a.method.clone(), f.method.clone(), default_method.into()))?;
    match (&a.start, method) {
        (None, _) => {}
        (Some(s), FitMethod::Creml) if s == "cmm" => {}
        (Some(s), FitMethod::Creml) => return Err(CliError::Config(format!("unknown CREML start '{s}' (only cmm)"))),
        (Some(_), _) => return Err(CliError::Config("--start applies to --method creml only".into())),
    }

    let p = &file.preprocess;
    let flag = |flag: bool, file: Option<bool>| flag || file.unwrap_or(false);
    let outliers = flag(a.remove_outliers, p.remove_outliers).then(|| {
        let d = OutlierFilter::default();
        OutlierFilter {
            half_window: p.outlier_half_window.unwrap_or(d.half_window),
            threshold: p.outlier_threshold.unwrap_or(d.threshold),
        }
    });
    let pre = PreprocessOptions {
        quantile_normalize: flag(a.quantile_normalize, p.quantile_normalize),
        outliers,
        background: flag(a.background, p.background),
        standardize: flag(a.standardize, p.standardize),
        clamp_negative: flag(a.clamp_negative, p.clamp_negative),
        bandwidth: a.bandwidth.or(p.bandwidth),
    };
    let defaults = FitOptions::default();
    let opts = FitOptions {
        level: pick(a.level, f.level, defaults.level),
        cnls: CnlsOptions::default(),
        exclude_failed: flag(a.exclude_failed, f.exclude_failed),
        creml_tol: f.tol.unwrap_or(defaults.creml_tol),
        creml_max_outer: f.max_outer.unwrap_or(defaults.creml_max_outer),
    };
    let out_dir = a.out_dir.clone().or(f.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;

    let settings = GroundStateSettings::resolve(c.alpha, &a.ground_state, file);
    let gs = settings.solve()?;
    let data = preprocess(&ds, &pre)?;
    data.write_csv(create(&out_dir.join("preprocessed.csv"))?)?;
    let out = fit_report(&data, &c, &gs, method, &opts)?;
    out.write_curves_csv(create(&out_dir.join("fitted_curves.csv"))?)?;
    print_fit(&out.report);

    let config = FitConfigResolved {
        input,
        method,
        start: (method == FitMethod::Creml).then_some("cmm"),
        constants: c,
        window_checked,
        ground_state: settings,
        level: opts.level,
        preprocess: pre,
        exclude_failed: opts.exclude_failed,
        creml_tol: opts.creml_tol,
        creml_max_outer: opts.creml_max_outer,
        out_dir: out_dir.clone(),
    };
    report("fit", seed, &config, &gs, &out.report).write(&out_dir.join("report.json"))?;
    if !out.report.converged() {
        return Err(CliError::NotConverged("estimator did not converge; outputs were written".into()));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulateConfigResolved {
    preset: String,
    methods: Vec<String>,
    simulation: SimConfig,
    ground_state: GroundStateSettings,
    out: Option<PathBuf>,
}

fn preset_config(preset: &str, case: Option<u8>) -> Result<(String, SimConfig), CliError> {
    let population = |case: u8| -> Result<(String, SimConfig), CliError> {
        Ok((format!("table2-case{case}"), SimConfig::table2(case)?))
    };
    match (preset, case) {
        ("table1", None) => Ok(("table1".into(), SimConfig::table1(4.0))),
        ("table1", Some(_)) => Err(CliError::Config("--case applies to population presets only".into())),
        ("table2", case) => population(case.unwrap_or(1)),
        ("table2-case1", None | Some(1)) => population(1),
        ("table2-case2", None | Some(2)) => population(2),
        ("table2-case1" | "table2-case2", Some(c)) => {
            Err(CliError::Config(format!("--case {c} conflicts with --preset {preset}")))
        }
        (other, _) => Err(CliError::Config(format!(
            "unknown preset '{other}' (expected table1|table2|table2-case1|table2-case2)"
        ))),
    }
}

pub fn simulate(a: &SimulateArgs, file: &FileConfig, seed: Option<u64>) -> Result<(), CliError> {
    let s = &file.simulate;
    let preset = pick(a.preset.clone(), s.preset.clone(), "table1".into());
    let (preset, mut cfg) = preset_config(&preset, a.case.or(s.case))?;
    if let Some(v) = a.sigma.or(s.sigma) {
        cfg.sigma = v;
    }
    if let Some(v) = a.replicates.or(s.replicates) {
        cfg.replicates = v;
    }
    if let Some(v) = a.level.or(s.level) {
        cfg.level = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    let population = cfg.m > 1;
    let method = pick(a.method.clone(), s.method.clone(), if population { "both" } else { "cnls" }.into());
    let methods: Vec<MixedMethod> = match (population, method.as_str()) {
        (false, "cnls") => Vec::new(),
        (false, other) => {
            return Err(CliError::Config(format!("preset {preset} is single-tube; method must be cnls, got '{other}'")))
        }
        (true, "cmm") => vec![MixedMethod::Cmm],
        (true, "creml") => vec![MixedMethod::Creml],
        (true, "both") => vec![MixedMethod::Cmm, MixedMethod::Creml],
        (true, other) => {
            return Err(CliError::Config(format!("unknown population method '{other}' (expected cmm|creml|both)")))
        }
    };

    let settings = GroundStateSettings::resolve(cfg.constants.alpha, &a.ground_state, file);
    let gs = settings.solve()?;
    let reports: Vec<SimReport> = if population {
        methods.iter().map(|m| run_mc_mixed(&cfg, &gs, *m)).collect::<Result<_, _>>()?
    } else {
        vec![run_mc_single(&cfg, &gs)?]
    };

    let mut table = Vec::new();
    write_reports_csv(&reports, &mut table)?;
    print!("{}", String::from_utf8_lossy(&table));
    for r in &reports {
        println!(
            "# {}: {} replicates, {} failed, {} not converged",
            r.method, r.replicates, r.failures, r.nonconverged
        );
    }
    let out = a.out.clone().or(s.out.clone());
    if let Some(path) = &out {
        std::fs::write(path, &table).map_err(|e| CliError::io(path, e))?;
    }
    if let Some(path) = &a.report {
        let seed = cfg.seed;
        let config = SimulateConfigResolved {
            preset,
            methods: if population {
                methods.iter().map(|m| format!("{m:?}").to_lowercase()).collect()
            } else {
                vec!["cnls".into()]
            },
            simulation: cfg,
            ground_state: settings,
            out,
        };
        report("simulate", Some(seed), &config, &gs, &reports).write(path)?;
    }
    Ok(())
}
