//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

#![allow(clippy::needless_range_loop)]

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polarity::elliptic::{closed_form_ground_state, solve_ground_state, GroundState};
use polarity::estimators::{delta_matrix_a, k_matrix, MixedMethod, TubeData};
use polarity::numerics::psd_project;
use polarity::pipeline::{
    fit_report, preprocess, quantile_normalize, Dataset, FitMethod, FitOptions, PreprocessOptions,
};
use polarity::simulation::{gen_population, run_mc_mixed, run_mc_single, Design, SimConfig, SimReport};
use polarity::steady_state::{
    discriminant, eval_r, forward_solve, g_value, grad_r, lambda_crit, model_to_natural, model_to_natural_l1,
    natural_to_model, Branch, ModelConstants, ModelParams, NaturalParams,
};
use polarity::SymMat2;

/// Up to 6 decimals without trailing zeros.
fn short(v: f64) -> String {
    let s = format!("{v:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Outcome {
    checks: Vec<(String, bool)>,
}

impl Outcome {
    fn new() -> Self {
        Outcome { checks: Vec::new() }
    }

    fn check(&mut self, label: impl Into<String>, ok: bool) {
        self.checks.push((label.into(), ok));
    }

    fn within(&mut self, name: &str, value: f64, lo: f64, hi: f64) {
        self.check(format!("{name} = {value:.6} in [{}, {}]", short(lo), short(hi)), value >= lo && value <= hi);
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }

    fn summary(&self) -> String {
        self.checks
            .iter()
            .map(|(l, ok)| if *ok { l.clone() } else { format!("FAILED {l}") })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

fn criterion_1() -> (Outcome, GroundState) {
    let mut o = Outcome::new();
    let t = Instant::now();
    let gs = solve_ground_state(1.2, 30.0, 0.01).expect("ground state");
    let elapsed = t.elapsed();
    let mut max_err: f64 = 0.0;
    for i in 0..=3000 {
        let x = -15.0 + 0.01 * i as f64;
        max_err = max_err.max((gs.eval(x) - closed_form_ground_state(1.2, x)).abs());
    }
    o.check(format!("max|σ₀ - sech profile| = {max_err:.2e} < 1e-3"), max_err < 1e-3);
    o.within("σ₀(0)", gs.eval(0.0), 1.6105 - 1e-3, 1.6105 + 1e-3);
    o.within("‖σ₀‖₁", gs.l1_norm(), 13.09 - 0.05, 13.09 + 0.05);
    o.check(format!("runtime {:.3} s < 1 s", elapsed.as_secs_f64()), elapsed < Duration::from_secs(1));
    (o, gs)
}

fn criterion_2(gs: &GroundState) -> Outcome {
    let mut o = Outcome::new();
    let c = ModelConstants::simulation();
    let p = ModelParams { k_nf: 0.1, k_pf: 0.1125 };
    let t = Instant::now();
    let n = model_to_natural(&p, &c, gs, Branch::Larger).expect("steady state");
    let profile = forward_solve(&p, &c, gs, Branch::Larger, 0.01).expect("forward solve");
    let elapsed = t.elapsed();
    o.within("λ", n.lambda, 34.188 - 0.01, 34.188 + 0.01);
    o.within("max R", profile.max_value(), 55.06 - 0.1, 55.06 + 0.1);
    let g = g_value(n.lambda, &p, &c, gs.l1_norm()).abs();
    o.check(format!("|g(λ)| = {g:.2e} < 1e-8"), g < 1e-8);
    let resid = profile.ide_residual(&p, &c).expect("residual");
    o.check(format!("IDE residual {resid:.2e} < 1e-3·max R"), resid < 1e-3 * profile.max_value());
    o.check(format!("runtime {:.3} s < 1 s", elapsed.as_secs_f64()), elapsed < Duration::from_secs(1));
    o
}

fn param<'a>(r: &'a SimReport, name: &str) -> &'a polarity::simulation::ParamSummary {
    r.param(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn criterion_3(gs: &GroundState) -> Outcome {
    let mut o = Outcome::new();
    let cfg = SimConfig { replicates: 500, ..SimConfig::table1(4.0) };
    let t = Instant::now();
    let r = run_mc_single(&cfg, gs).expect("Monte Carlo");
    let elapsed = t.elapsed();
    let k_nf = param(&r, "k_nf");
    o.check(format!("|bias(k_nf)| = {:.2e} < 0.001", k_nf.bias.abs()), k_nf.bias.abs() < 0.001);
    o.within("sd(k_nf)", k_nf.sd, 0.0022, 0.0034);
    o.within("sd(λ)", param(&r, "lambda").sd, 0.32, 0.48);
    for (name, target) in [("k_nf", 0.0028), ("k_pf", 0.0023), ("mu", 0.0140), ("lambda", 0.4071)] {
        let sd_t = param(&r, name).sd_theory.unwrap_or(f64::NAN);
        o.within(&format!("sd*({name})"), sd_t, 0.9 * target, 1.1 * target);
    }
    for name in ["k_nf", "k_pf", "mu", "lambda"] {
        o.within(&format!("coverage({name})"), param(&r, name).coverage.unwrap_or(f64::NAN), 0.92, 0.975);
    }
    o.check(format!("failures = {}", r.failures), r.failures == 0);
    o.check(format!("runtime {:.1} s <= 600 s", elapsed.as_secs_f64()), elapsed <= Duration::from_secs(600));
    o
}

fn criterion_4(gs: &GroundState) -> Outcome {
    let mut o = Outcome::new();
    let cfg = SimConfig { replicates: 500, ..SimConfig::table1(16.0) };
    let r = run_mc_single(&cfg, gs).expect("Monte Carlo");
    o.within("sd(λ)", param(&r, "lambda").sd, 1.2, 1.9);
    for name in ["k_nf", "k_pf", "mu", "lambda"] {
        o.within(&format!("coverage({name})"), param(&r, name).coverage.unwrap_or(f64::NAN), 0.92, 0.98);
    }
    o
}

fn criterion_5(gs: &GroundState) -> Outcome {
    let mut o = Outcome::new();
    let cfg = SimConfig { replicates: 200, ..SimConfig::table2(2).unwrap() };
    let t = Instant::now();
    let cmm = run_mc_mixed(&cfg, gs, MixedMethod::Cmm).expect("CMM Monte Carlo");
    let creml = run_mc_mixed(&cfg, gs, MixedMethod::Creml).expect("CREML Monte Carlo");
    let elapsed = t.elapsed();
    o.within("CMM sd(μ)", param(&cmm, "mu").sd, 0.75 * 0.0607, 1.25 * 0.0607);
    o.within("CREML sd(μ)", param(&creml, "mu").sd, 0.75 * 0.0606, 1.25 * 0.0606);
    for name in ["k_nf", "k_pf", "mu", "lambda"] {
        o.within(&format!("CMM coverage({name})"), param(&cmm, name).coverage.unwrap_or(f64::NAN), 0.91, 0.98);
    }
    o.check(format!("failures = {} + {}", cmm.failures, creml.failures), cmm.failures + creml.failures == 0);
    o.check(format!("runtime {:.1} s <= 900 s", elapsed.as_secs_f64()), elapsed <= Duration::from_secs(900));
    o
}

fn criterion_6(gs: &GroundState) -> Outcome {
    let mut o = Outcome::new();
    let cfg = SimConfig { replicates: 200, ..SimConfig::table2(1).unwrap() };
    let cmm = run_mc_mixed(&cfg, gs, MixedMethod::Cmm).expect("CMM Monte Carlo");
    let creml = run_mc_mixed(&cfg, gs, MixedMethod::Creml).expect("CREML Monte Carlo");
    let (b_cmm, b_creml) = (param(&cmm, "Sigma22").bias, param(&creml, "Sigma22").bias);
    let (s_cmm, s_creml) = (param(&cmm, "Sigma22").sd, param(&creml, "Sigma22").sd);
    o.check(format!("bias(Σ22) CMM {b_cmm:.4} vs CREML {b_creml:.4}, need CMM > CREML"), b_cmm > b_creml);
    o.check(format!("sd(Σ22) CREML {s_creml:.4} vs CMM {s_cmm:.4}, need CREML < CMM"), s_creml < s_cmm);
    o
}

fn rel_err(approx: f64, exact: f64, floor: f64) -> f64 {
    (approx - exact).abs() / exact.abs().max(floor)
}

fn random_feasible(rng: &mut ChaCha8Rng, c: &ModelConstants, l1: f64) -> NaturalParams {
    let mu = rng.random_range(0.3..2.0);
    let lambda = rng.random_range(0.02..0.98) * mu * c.r_tot / l1;
    NaturalParams::new(mu, lambda)
}

fn criterion_7(gs: &GroundState) -> Outcome {
    let mut o = Outcome::new();
    let c = ModelConstants::simulation();
    let l1 = gs.l1_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // (a) conversion round trip
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = random_feasible(&mut rng, &c, l1);
        let p = natural_to_model(&n, &c, l1).expect("feasible point converts");
        let lc = lambda_crit(&p, &c, l1);
        let branch = if n.lambda > lc { Branch::Larger } else { Branch::Smaller };
        let back = model_to_natural_l1(&p, &c, l1, branch).expect("steady state exists");
        worst = worst.max(rel_err(back.mu, n.mu, 0.0)).max(rel_err(back.lambda, n.lambda, 0.0));
    }
    o.check(format!("(a) round trip max rel err {worst:.2e} < 1e-9"), worst < 1e-9);

    // (b) g(λ_c) = Λ
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let p = ModelParams { k_nf: rng.random_range(0.01..1.0), k_pf: rng.random_range(0.01..1.0) };
        let lam = discriminant(&p, &c, l1);
        worst = worst.max((g_value(lambda_crit(&p, &c, l1), &p, &c, l1) - lam).abs() / lam.abs().max(1.0));
    }
    o.check(format!("(b) |g(λ_c) - Λ| max {worst:.2e} < 1e-10"), worst < 1e-10);

    // (c) gradients against central differences
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = random_feasible(&mut rng, &c, l1);
        let x = rng.random_range(-12.0..12.0);
        let g = grad_r(&n, gs, x);
        let h = 1e-6;
        let d_mu = (eval_r(&NaturalParams::new(n.mu + h, n.lambda), gs, x)
            - eval_r(&NaturalParams::new(n.mu - h, n.lambda), gs, x))
            / (2.0 * h);
        let d_la = (eval_r(&NaturalParams::new(n.mu, n.lambda + h), gs, x)
            - eval_r(&NaturalParams::new(n.mu, n.lambda - h), gs, x))
            / (2.0 * h);
        let scale = g[0].abs().max(g[1].abs());
        worst = worst.max(rel_err(d_mu, g[0], 1e-3 * scale)).max(rel_err(d_la, g[1], 1e-3 * scale));

        let a = delta_matrix_a(&n, &c, l1).expect("delta matrix");
        let conv = |m: NaturalParams| natural_to_model(&m, &c, l1).expect("feasible");
        let hm = 1e-6 * n.mu;
        let hl = 1e-6 * n.lambda;
        let (pm, mm) = (conv(NaturalParams::new(n.mu + hm, n.lambda)), conv(NaturalParams::new(n.mu - hm, n.lambda)));
        let (pl, ml) = (conv(NaturalParams::new(n.mu, n.lambda + hl)), conv(NaturalParams::new(n.mu, n.lambda - hl)));
        let fd = [
            [(pm.k_nf - mm.k_nf) / (2.0 * hm), (pm.k_pf - mm.k_pf) / (2.0 * hm)],
            [(pl.k_nf - ml.k_nf) / (2.0 * hl), (pl.k_pf - ml.k_pf) / (2.0 * hl)],
        ];
        for i in 0..2 {
            for j in 0..2 {
                let scale = a.0[i][0].abs().max(a.0[i][1].abs());
                worst = worst.max(rel_err(fd[i][j], a.0[i][j], 1e-3 * scale));
            }
        }
    }
    o.check(format!("(c) gradient and delta matrix max rel err {worst:.2e} < 1e-4"), worst < 1e-4);

    // (d) K positive definite on random designs
    let mut min_det = f64::INFINITY;
    for _ in 0..200 {
        let n = random_feasible(&mut rng, &c, l1);
        let k = rng.random_range(2..30);
        let xs: Vec<f64> = (0..k).map(|_| rng.random_range(-15.0..15.0)).collect();
        min_det = min_det.min(k_matrix(&n, gs, &xs).det());
    }
    o.check(format!("(d) min det(K) = {min_det:.3e} > 0"), min_det > 0.0);

    // (e) PSD projection
    let mut min_eig = f64::INFINITY;
    for _ in 0..1000 {
        let m =
            SymMat2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        min_eig = min_eig.min(psd_project(m).min_eigenvalue());
    }
    o.check(format!("(e) min eigenvalue after projection {min_eig:.2e} >= -1e-12"), min_eig >= -1e-12);

    // (f) quantile normalization
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(2..8);
        let xs: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let tubes = (0..m)
            .map(|i| {
                let ys = (0..40).map(|_| rng.random_range(-50.0..50.0)).collect();
                TubeData::new(format!("t{i}"), xs.clone(), ys).expect("valid tube")
            })
            .collect();
        let q = quantile_normalize(&Dataset::new(tubes, None).expect("dataset")).expect("normalize");
        let sorted = |v: &[f64]| {
            let mut s = v.to_vec();
            s.sort_by(f64::total_cmp);
            s
        };
        let reference = sorted(&q.tubes[0].intensities);
        for t in &q.tubes {
            for (a, b) in sorted(&t.intensities).iter().zip(&reference) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    o.check(format!("(f) sorted vectors differ by at most {worst:.2e} <= 1e-12"), worst <= 1e-12);

    // (g) identical seeds give identical reports, whatever the thread count
    let cfg = SimConfig { replicates: 24, ..SimConfig::table1(4.0) };
    let csv_with_threads = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        let report = pool.install(|| run_mc_single(&cfg, gs)).expect("Monte Carlo");
        let mut buf = Vec::new();
        report.write_csv(&mut buf).expect("csv");
        buf
    };
    let (one, again, four) = (csv_with_threads(1), csv_with_threads(1), csv_with_threads(4));
    o.check("(g) SimReport bytes identical across runs and thread counts", one == again && one == four);
    o
}

fn criterion_8(gs: &GroundState) -> Outcome {
    let mut o = Outcome::new();
    let c = ModelConstants::pollen_data();
    let theta = NaturalParams::new(0.9648, 0.6487);
    let (sd_mu, sd_lambda, rho) = (0.0709, 0.0258, 0.838);
    let sigma_between = SymMat2::new(sd_mu * sd_mu, rho * sd_mu * sd_lambda, sd_lambda * sd_lambda);
    let (m, n) = (12, 173);
    let xs: Vec<f64> = (0..n).map(|i| -10.36 + 20.72 * i as f64 / (n - 1) as f64).collect();
    let pre = PreprocessOptions::default();
    let fit = |d: &Dataset, method| fit_report(d, &c, gs, method, &FitOptions::default());

    // preprocessing rescales and shifts the data, so the target is the
    // generator pushed through the same preprocessing without noise
    let clean: Vec<TubeData> = (0..m)
        .map(|i| {
            TubeData::new(format!("tube{}", i + 1), xs.clone(), xs.iter().map(|&x| eval_r(&theta, gs, x)).collect())
        })
        .collect::<Result<_, _>>()
        .expect("clean tubes");
    let clean = preprocess(&Dataset::new(clean, None).expect("dataset"), &pre).expect("preprocess");
    let target = fit(&clean, FitMethod::CnlsPooled).expect("target fit").report.tubes[0].clone();
    o.check(format!("target (μ, λ) = ({:.4}, {:.4})", target.mu, target.lambda), true);

    let mut rng = ChaCha8Rng::seed_from_u64(SimConfig::table1(4.0).seed);
    let design = Design::Explicit { positions: xs };
    let pop = gen_population(&theta, &sigma_between, 0.2267, m, &design, gs, &c, &mut rng).expect("population");
    let data = preprocess(&Dataset::new(pop.tubes, None).expect("dataset"), &pre).expect("preprocess");

    match fit(&data, FitMethod::CnlsPerTube) {
        Ok(out) => {
            let k: Vec<f64> = out.report.tubes.iter().map(|t| t.k_nf).collect();
            let (lo, hi) = k.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &v| (a.0.min(v), a.1.max(v)));
            o.check(format!("per-tube CNLS k_nf in [{lo:.4}, {hi:.4}]"), true);
        }
        Err(e) => o.check(format!("per-tube CNLS failed: {e}"), false),
    }
    let mut estimates = Vec::new();
    for (name, method) in [("CMM", FitMethod::Cmm), ("CREML", FitMethod::Creml)] {
        let pop = match fit(&data, method).map(|out| out.report.population) {
            Ok(Some(p)) => p,
            Ok(None) => unreachable!("mixed fits report a population"),
            Err(e) => {
                o.check(format!("{name} failed: {e}"), false);
                continue;
            }
        };
        let Some(ci) = pop.intervals.as_ref() else {
            o.check(format!("{name} has no plug-in standard errors"), false);
            continue;
        };
        let z_mu = (pop.mu - target.mu) / ci.mu.se;
        let z_lambda = (pop.lambda - target.lambda) / ci.lambda.se;
        o.check(format!("{name} μ̂ = {:.4} (se {:.4}, z {z_mu:.2})", pop.mu, ci.mu.se), z_mu.abs() <= 3.0);
        o.check(
            format!("{name} λ̂ = {:.4} (se {:.4}, z {z_lambda:.2})", pop.lambda, ci.lambda.se),
            z_lambda.abs() <= 3.0,
        );
        o.check(format!("{name} converged"), pop.converged);
        estimates.push((pop.mu, pop.lambda));
    }
    if let [cmm, creml] = estimates.as_slice() {
        let d_mu = rel_err(cmm.0, creml.0, 0.0);
        let d_lambda = rel_err(cmm.1, creml.1, 0.0);
        o.check(format!("CMM vs CREML μ differ {:.2}% <= 5%", 100.0 * d_mu), d_mu <= 0.05);
        o.check(format!("CMM vs CREML λ differ {:.2}% <= 5%", 100.0 * d_lambda), d_lambda <= 0.05);
    }
    match fit(&data, FitMethod::CnlsPooled) {
        Ok(out) => o.check(
            format!("pooled CNLS μ̂ = {:.4}, λ̂ = {:.4}", out.report.tubes[0].mu, out.report.tubes[0].lambda),
            true,
        ),
        Err(e) => o.check(format!("pooled CNLS failed: {e}"), false),
    }
    o
}

fn report(id: &str, title: &str, o: &Outcome, failed: &mut Vec<String>) {
    let status = if o.passed() { "PASS" } else { "FAIL" };
    println!("{status} criterion {id} ({title}): {}", o.summary());
    if !o.passed() {
        failed.push(id.to_string());
    }
}

fn main() {
    let mut failed = Vec::new();
    let (o1, gs) = criterion_1();
    report("1", "ground state", &o1, &mut failed);
    report("2", "forward solve", &criterion_2(&gs), &mut failed);
    report("3", "single tube, sigma = 4", &criterion_3(&gs), &mut failed);
    report("4", "single tube, sigma = 16", &criterion_4(&gs), &mut failed);
    report("5", "population case 2", &criterion_5(&gs), &mut failed);
    report("6", "population case 1 variance components", &criterion_6(&gs), &mut failed);
    report("7", "property suite", &criterion_7(&gs), &mut failed);
    report("8", "closed-loop measured-data analogue", &criterion_8(&gs), &mut failed);
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
