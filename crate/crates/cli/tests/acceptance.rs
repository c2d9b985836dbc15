//! Acceptance suite. Each test checks one numbered release criterion end to
//! end against the library and the binary, and prints one
//! `ACCEPT C<n>: PASS|FAIL (...)` line; run with `--nocapture` to see every
//! verdict. Tolerances are pinned next to the checks they guard.

use std::path::Path;
use std::process::Command;

use lagsim_core::analysis::{
    comm_bound_with_iterations, gamma_thresholds, per_worker_upload_bound, solve_reference, strong_convexity,
    HeterogeneityProfile,
};
use lagsim_core::datagen::{gen_synthetic, SyntheticSpec};
use lagsim_core::engine::{
    build_workers, init_round, run, step_gd, step_lag_wk, Method, RunConfig, RunError, RunOutput,
};
use lagsim_core::losses::{GlobalSmoothness, LossModel, SmoothnessCert};
use lagsim_core::numeric::{sq_norm, ModelVector};
use lagsim_core::triggers::{schedule_theorem1, TriggerParams};

const EPS: f64 = 1e-8;
const DATA_SEED: u64 = 7;
const WORKERS: usize = 9;
const DEPTH: usize = 10;

fn verdict(criterion: usize, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPT C{criterion}: {word} ({detail})");
    assert!(pass, "acceptance criterion {criterion} failed: {detail}");
}

/// Nine square-loss shards whose smoothness constants grow geometrically.
fn square9() -> Vec<LossModel> {
    gen_synthetic(&SyntheticSpec::increasing_square(WORKERS, 50, 50, DATA_SEED))
        .expect("synthetic square data should generate")
}

/// Nine logistic shards sharing one smoothness target.
fn logistic9() -> Vec<LossModel> {
    gen_synthetic(&SyntheticSpec::uniform_logistic(WORKERS, 50, 50, DATA_SEED))
        .expect("synthetic logistic data should generate")
}

struct Setup {
    models: Vec<LossModel>,
    cert: SmoothnessCert,
    reference: f64,
}

fn setup(models: Vec<LossModel>) -> Setup {
    let cert = SmoothnessCert::certify(&models, GlobalSmoothness::SummedGram).expect("certificates should exist");
    let reference = solve_reference(&models).expect("reference optimum should solve").objective;
    Setup { models, cert, reference }
}

fn run_one(
    s: &Setup,
    method: Method,
    params: TriggerParams,
    eps: f64,
    max_iters: usize,
    reference: f64,
    beta: Option<Vec<f64>>,
    assert_lemmas: bool,
) -> Result<RunOutput, RunError> {
    let theta1 = ModelVector::zeros(s.models[0].dim());
    let mut workers = build_workers(s.models.clone(), &s.cert, &theta1)?;
    let config = RunConfig {
        method,
        trigger: params,
        max_iters,
        target_eps: eps,
        reference_optimum: reference,
        seed: 7,
        assert_lemmas,
        global_smoothness: Some(s.cert.global()),
        lyapunov_beta: beta,
    };
    run(&config, &mut workers, &theta1)
}

fn lcg_next(state: &mut u64) -> u64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    *state
}

fn unit_interval(state: &mut u64) -> f64 {
    (lcg_next(state) >> 11) as f64 / (1u64 << 53) as f64
}

fn rand_vec(dim: usize, scale: f64, state: &mut u64) -> ModelVector {
    ModelVector::new((0..dim).map(|_| scale * (2.0 * unit_interval(state) - 1.0)).collect())
        .expect("entries are finite by construction")
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[test]
fn c01_gradients_match_finite_differences() {
    let mut worst = 0.0f64;
    let mut instances = 0usize;
    let mut state = 0x51ab5eu64;
    for seed in 0..4u64 {
        let specs = [
            SyntheticSpec::increasing_square(3, 10, 6, 100 + seed),
            SyntheticSpec::uniform_logistic(3, 10, 6, 200 + seed),
        ];
        for spec in specs {
            for model in gen_synthetic(&spec).expect("synthetic data should generate") {
                let theta = rand_vec(model.dim(), 1.0, &mut state);
                let grad = model.loss_grad(&theta).expect("gradient should evaluate");
                let mut fd = vec![0.0; model.dim()];
                for (i, slot) in fd.iter_mut().enumerate() {
                    let h = 1e-6 * theta.as_slice()[i].abs().max(1.0);
                    let mut plus = theta.as_slice().to_vec();
                    let mut minus = theta.as_slice().to_vec();
                    plus[i] += h;
                    minus[i] -= h;
                    let hi = model.loss_value(&ModelVector::new(plus).unwrap()).unwrap();
                    let lo = model.loss_value(&ModelVector::new(minus).unwrap()).unwrap();
                    *slot = (hi - lo) / (2.0 * h);
                }
                let fd = ModelVector::new(fd).unwrap();
                let rel = sq_norm(&fd.sub(&grad).unwrap()).sqrt() / sq_norm(&grad).sqrt().max(1e-9);
                worst = worst.max(rel);
                instances += 1;
            }
        }
    }
    let pass = instances >= 20 && worst < 1e-5;
    verdict(1, pass, &format!("{instances} instances, worst relative gradient error {worst:.3e}, limit 1e-5"));
}

#[test]
fn c02_certified_smoothness_bounds_gradient_changes() {
    const SLACK: f64 = 1.0 + 1e-9;
    let mut worst_local = 0.0f64;
    let mut worst_global = 0.0f64;
    let mut state = 0xc2u64;
    for models in [square9(), logistic9()] {
        let cert = SmoothnessCert::certify(&models, GlobalSmoothness::SummedGram).unwrap();
        let dim = models[0].dim();
        for (m, model) in models.iter().enumerate() {
            for _ in 0..100 {
                let x = rand_vec(dim, 2.0, &mut state);
                let y = rand_vec(dim, 2.0, &mut state);
                let dg = model.loss_grad(&x).unwrap().sub(&model.loss_grad(&y).unwrap()).unwrap();
                let dx = x.sub(&y).unwrap();
                let ratio = sq_norm(&dg).sqrt() / (cert.worker(m) * sq_norm(&dx).sqrt());
                worst_local = worst_local.max(ratio);
            }
        }
        for _ in 0..100 {
            let x = rand_vec(dim, 2.0, &mut state);
            let y = rand_vec(dim, 2.0, &mut state);
            let mut dg = ModelVector::zeros(dim);
            for model in &models {
                dg.add_assign_vec(&model.loss_grad(&x).unwrap().sub(&model.loss_grad(&y).unwrap()).unwrap())
                    .unwrap();
            }
            let dx = x.sub(&y).unwrap();
            let ratio = sq_norm(&dg).sqrt() / (cert.global() * sq_norm(&dx).sqrt());
            worst_global = worst_global.max(ratio);
        }
    }
    let pass = worst_local <= SLACK && worst_global <= SLACK;
    verdict(
        2,
        pass,
        &format!("100 pairs per model, worst per-worker ratio {worst_local:.12}, worst global ratio {worst_global:.12}, slack 1+1e-9"),
    );
}

#[test]
fn c03_full_descent_converges_at_its_predicted_linear_rate() {
    let s = setup(square9());
    let l = s.cert.global();
    let mu = strong_convexity(&s.models)
        .expect("curvature probe should run")
        .expect("pooled square problem should be strongly convex");
    let kappa = l / mu;
    let params = TriggerParams::uniform(0.0, DEPTH, 1.0 / l, WORKERS).unwrap();
    let out = run_one(&s, Method::Gd, params, EPS, 20_000, s.reference, None, false).expect("gd should run");

    // guaranteed per-step contraction: descent lemma plus quadratic growth
    // give e_{k+1} <= (1 - 1/kappa) e_k; slack covers rounding near the floor
    let envelope = 1.0 - 1.0 / kappa;
    let envelope_ok = out
        .trace
        .rows
        .windows(2)
        .all(|pair| pair[1].objective_error <= envelope * pair[0].objective_error * (1.0 + 1e-9) + 1e-13);

    // on a quadratic the slowest mode contracts the error by (1 - 1/kappa)^2
    // per round, so the log-error slope must settle on twice the envelope rate
    let rows = &out.trace.rows;
    let tail: Vec<(f64, f64)> = rows[rows.len() / 2..]
        .iter()
        .filter(|r| r.objective_error > 0.0)
        .map(|r| (r.iteration as f64, r.objective_error.ln()))
        .collect();
    let slope = ols_slope(&tail);
    let predicted = 2.0 * envelope.ln();
    let ratio = slope / predicted;

    let pass = out.converged && envelope_ok && (ratio - 1.0).abs() <= 0.2;
    verdict(
        3,
        pass,
        &format!(
            "converged in {} rounds, per-step envelope held {envelope_ok}, tail slope {slope:.4} vs predicted {predicted:.4} (ratio {ratio:.3}, band 20%)",
            rows.len() - 1
        ),
    );
}

#[test]
fn c04_zero_threshold_lazy_run_tracks_full_descent() {
    let s = setup(square9());
    let alpha = 1.0 / s.cert.global();
    let params = TriggerParams::uniform(0.0, DEPTH, alpha, WORKERS).unwrap();
    let theta1 = ModelVector::zeros(50);
    let mut w_gd = build_workers(s.models.clone(), &s.cert, &theta1).unwrap();
    let mut w_wk = build_workers(s.models.clone(), &s.cert, &theta1).unwrap();
    let (mut s_gd, _) = init_round(&mut w_gd, &theta1, Method::Gd, DEPTH).unwrap();
    let (mut s_wk, _) = init_round(&mut w_wk, &theta1, Method::LagWk, DEPTH).unwrap();

    let mut worst = 0.0f64;
    for _ in 0..60 {
        step_gd(&mut s_gd, &mut w_gd, alpha).unwrap();
        step_lag_wk(&mut s_wk, &mut w_wk, &params).unwrap();
        let gap = s_gd
            .theta()
            .as_slice()
            .iter()
            .zip(s_wk.theta().as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(gap);
    }
    verdict(4, worst <= 1e-12, &format!("60 rounds, max coordinate gap {worst:.3e}, limit 1e-12"));
}

#[test]
fn c05_scheduled_lazy_runs_pass_every_descent_check() {
    let s = setup(square9());
    let schedule = schedule_theorem1(1.0 / (2.0 * DEPTH as f64), DEPTH, s.cert.global()).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for method in [Method::LagWk, Method::LagPs] {
        let params = TriggerParams::new(schedule.xi.clone(), schedule.alpha, WORKERS).unwrap();
        match run_one(&s, method, params, EPS, 20_000, s.reference, Some(schedule.beta.clone()), true) {
            Ok(out) if out.converged => parts.push(format!("{} clean in {} rounds", method.name(), out.trace.rows.len() - 1)),
            Ok(_) => {
                pass = false;
                parts.push(format!("{} hit the iteration cap", method.name()));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{} failed: {e}", method.name()));
            }
        }
    }
    verdict(5, pass, &format!("checked rounds with tolerance 1e-9: {}", parts.join(", ")));
}

#[test]
fn c06_low_curvature_workers_upload_rarely() {
    let s = setup(square9());
    let l = s.cert.global();
    let params = TriggerParams::uniform(0.1, DEPTH, 1.0 / l, WORKERS).unwrap();
    // reference -1 keeps the error positive so the run spans the full horizon
    let out = run_one(&s, Method::LagWk, params.clone(), 0.0, 1000, -1.0, None, false).expect("lazy run should finish");
    let k = out.ledger.entries().len() - 1;
    let counts = out.ledger.per_worker_uploads(WORKERS);

    let profile = HeterogeneityProfile::new(s.cert.per_worker(), l).unwrap();
    let gammas = gamma_thresholds(&params, l).unwrap();
    let mut bounded = 0usize;
    let mut violations = 0usize;
    for (m, &count) in counts.iter().enumerate() {
        if let Some(bound) = per_worker_upload_bound(&profile, &gammas, m, k) {
            bounded += 1;
            if count > bound {
                violations += 1;
            }
        }
    }
    let low: f64 = counts[..3].iter().sum::<usize>() as f64 / 3.0;
    let high: f64 = counts[6..].iter().sum::<usize>() as f64 / 3.0;
    let pattern = counts[0] < counts[WORKERS - 1] && low < high;

    let pass = k == 1000 && bounded >= 1 && violations == 0 && pattern;
    verdict(
        6,
        pass,
        &format!("uploads over {k} rounds {counts:?}, {bounded} workers under an a-priori bound, {violations} violations, low-curvature mean {low:.1} vs high {high:.1}"),
    );
}

#[test]
fn c07_lazy_triggers_cut_uploads_well_below_full_descent() {
    let s = setup(square9());
    let alpha = 1.0 / s.cert.global();
    let gd = run_one(&s, Method::Gd, TriggerParams::uniform(0.0, DEPTH, alpha, WORKERS).unwrap(), EPS, 20_000, s.reference, None, false)
        .expect("gd should run");
    let wk = run_one(&s, Method::LagWk, TriggerParams::uniform(0.1, DEPTH, alpha, WORKERS).unwrap(), EPS, 20_000, s.reference, None, false)
        .expect("lag-wk should run");
    let ps = run_one(&s, Method::LagPs, TriggerParams::uniform(1.0, DEPTH, alpha, WORKERS).unwrap(), EPS, 20_000, s.reference, None, false)
        .expect("lag-ps should run");

    let (g, w, p) = (gd.ledger.cum_uploads(), wk.ledger.cum_uploads(), ps.ledger.cum_uploads());
    let ratio = w as f64 / g as f64;
    let pass = gd.converged && wk.converged && ps.converged && w < p && p < g && ratio <= 0.25;
    verdict(7, pass, &format!("uploads wk {w} < ps {p} < gd {g}, wk/gd {ratio:.3}, limit 0.25"));
}

#[test]
fn c08_lazy_iteration_counts_stay_near_full_descent() {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, models) in [("increasing-square", square9()), ("uniform-logistic", logistic9())] {
        let s = setup(models);
        let alpha = 1.0 / s.cert.global();
        let gd = run_one(&s, Method::Gd, TriggerParams::uniform(0.0, DEPTH, alpha, WORKERS).unwrap(), EPS, 20_000, s.reference, None, false)
            .expect("gd should run");
        let wk = run_one(&s, Method::LagWk, TriggerParams::uniform(0.1, DEPTH, alpha, WORKERS).unwrap(), EPS, 20_000, s.reference, None, false)
            .expect("lag-wk should run");
        match (gd.trace.iterations_to_reach(EPS), wk.trace.iterations_to_reach(EPS)) {
            (Some(gi), Some(wi)) => {
                if wi as f64 > 1.5 * gi as f64 {
                    pass = false;
                }
                parts.push(format!("{label}: wk {wi} vs gd {gi}"));
            }
            _ => {
                pass = false;
                parts.push(format!("{label}: a method missed the target"));
            }
        }
    }
    verdict(8, pass, &format!("{} (limit 1.5x)", parts.join(", ")));
}

#[test]
fn c09_incremental_baselines_upload_exactly_once_per_round() {
    let s = setup(square9());
    let alpha = 1.0 / (WORKERS as f64 * s.cert.global());
    let params = TriggerParams::uniform(0.0, DEPTH, alpha, WORKERS).unwrap();

    let cyc = run_one(&s, Method::CycIag, params.clone(), 0.0, 1000, -1.0, None, false).expect("cyclic run");
    let cyclic_ok = cyc.ledger.entries()[1..]
        .iter()
        .all(|e| e.uploads.len() == 1 && e.uploads[0] == ((e.iteration - 1) % WORKERS) + 1);

    let num = run_one(&s, Method::NumIag, params, 0.0, 10_000, -1.0, None, false).expect("sampled run");
    let single_ok = num.ledger.entries()[1..].iter().all(|e| e.uploads.len() == 1);
    let draws = num.ledger.entries().len() - 1;
    let counts = num.ledger.per_worker_uploads(WORKERS);
    let total_l: f64 = s.cert.per_worker().iter().sum();
    let mut worst_sigmas = 0.0f64;
    for (m, &count) in counts.iter().enumerate() {
        let p = s.cert.worker(m) / total_l;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        worst_sigmas = worst_sigmas.max(((count - 1) as f64 - expected).abs() / sigma);
    }

    let pass = cyclic_ok && single_ok && draws == 10_000 && worst_sigmas <= 3.0;
    verdict(
        9,
        pass,
        &format!("cyclic order held {cyclic_ok}, single upload held {single_ok}, worst selection deviation {worst_sigmas:.2} sigma over {draws} draws, limit 3"),
    );
}

#[test]
fn c10_measured_uploads_respect_the_apriori_bound() {
    let s = setup(square9());
    let l = s.cert.global();
    let schedule = schedule_theorem1(1.0 / (2.0 * DEPTH as f64), DEPTH, l).unwrap();
    let profile = HeterogeneityProfile::new(s.cert.per_worker(), l).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for method in [Method::LagWk, Method::LagPs] {
        let params = TriggerParams::new(schedule.xi.clone(), schedule.alpha, WORKERS).unwrap();
        let out = run_one(&s, method, params.clone(), EPS, 20_000, s.reference, None, false).expect("scheduled run");
        let k = out.ledger.entries().len() - 1;
        let measured = out.ledger.uploads_without_init();
        let bound = comm_bound_with_iterations(&profile, &params, l, k).unwrap();
        if (measured as f64) > bound {
            pass = false;
        }
        parts.push(format!("{}: {measured} <= {bound:.1} over {k} rounds", method.name()));
    }
    verdict(10, pass, &parts.join(", "));
}

#[test]
fn c11_identical_invocations_write_identical_bytes() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic_square.toml");
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    for out_dir in [&first, &second] {
        let status = Command::new(env!("CARGO_BIN_EXE_lagsim"))
            .arg(&config)
            .arg("--output-dir")
            .arg(out_dir)
            .status()
            .expect("binary should spawn");
        assert!(status.success(), "run into {} should succeed", out_dir.display());
    }

    let names = |dir: &Path| -> Vec<String> {
        let mut v: Vec<String> = std::fs::read_dir(dir)
            .expect("output dir should list")
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let a = names(&first);
    let b = names(&second);
    let mut identical = a == b;
    let mut compared = 0usize;
    if identical {
        for name in &a {
            compared += 1;
            if std::fs::read(first.join(name)).unwrap() != std::fs::read(second.join(name)).unwrap() {
                identical = false;
                break;
            }
        }
    }
    verdict(11, identical, &format!("{compared} files compared byte for byte across two runs"));
}
