//! Acceptance gate. Runs every criterion in sequence (so the runtime budgets are
//! measured without interference) and prints one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use fvsim::coupling::{estimate_kappa, KappaConfig};
use fvsim::experiments::{run_experiment, Experiment, ExperimentReport, RunConfig};
use fvsim::validate::{
    check_metric_axioms, constant_kill_flow_gap, driftless_qsd_gap, transport_gap, worker_count_outputs,
    zero_kill_ks_pvalues,
};
use fvsim::{CosineFamily, ModelSpec, RngStream, StepParams};

struct Outcome {
    passed: bool,
    detail: String,
}

fn criterion(id: u32, name: &str, budget: Option<Duration>, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = run();
    let elapsed = start.elapsed();
    let in_budget = budget.is_none_or(|b| elapsed <= b);
    let passed = out.passed && in_budget;
    let budget_note = budget.map(|b| format!(", budget {}s", b.as_secs())).unwrap_or_default();
    println!(
        "criterion {id} {name}: {} | {} | {:.1}s{budget_note}",
        if passed { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    passed
}

fn failed_checks(r: &ExperimentReport) -> Vec<String> {
    r.checks.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect()
}

fn oracle_equivalence() -> Outcome {
    let cfg = RunConfig::quick(Experiment::PropagationOfChaos);
    let r = run_experiment(&cfg).expect("propagation of chaos");
    let err = r.metric("error_at_max_n");
    let slope = r.metric("slope");
    Outcome {
        passed: err <= 0.03 && (slope + 0.5).abs() <= 0.15,
        detail: format!(
            "E[W1] at N={} is {err:.5} (<= 0.03), slope {slope:.4} (target -0.5 +- 0.15), {} replicates",
            cfg.particles.last().unwrap(),
            cfg.replicates
        ),
    }
}

fn degenerate_reductions() -> Outcome {
    let pv = zero_kill_ks_pvalues(2000, 20_240_601).expect("ks");
    let flow = constant_kill_flow_gap(512, 40).expect("flow");
    let qsd = driftless_qsd_gap(512).expect("qsd");
    let ks_ok = pv.iter().all(|v| *v > 0.01);
    Outcome {
        passed: ks_ok && flow <= 1e-12 && qsd <= 1e-10,
        detail: format!(
            "min KS p-value {:.4} over {} marginals (> 0.01), constant-lambda flow gap {flow:.2e} (<= 1e-12), driftless QSD gap {qsd:.2e} (<= 1e-10)",
            pv.iter().copied().fold(1.0, f64::min),
            pv.len()
        ),
    }
}

fn transport_exactness() -> Outcome {
    let gap = transport_gap(500, 100, 20_240_601).expect("transport");
    let axioms = check_metric_axioms(2000, 20_240_601).expect("axioms");
    Outcome {
        passed: gap <= 1e-9 && axioms.passed,
        detail: format!("max |w1_circle - lp| {gap:.2e} over 500 pairs (<= 1e-9); {}", axioms.detail),
    }
}

fn contraction_uniform_in_n() -> Outcome {
    let gamma = 0.05;
    let params = StepParams::new(ModelSpec::builtin(CosineFamily::demo()).unwrap(), gamma).unwrap();
    let stream = RngStream::new(20_240_601);
    let small = estimate_kappa(&params, &KappaConfig::new(100, gamma, 1), &stream).expect("kappa N=100");
    let large = estimate_kappa(&params, &KappaConfig::new(1000, gamma, 1), &stream).expect("kappa N=1000");
    let ratio = small.rate / large.rate;
    let ok = |f: &fvsim::coupling::RateFit| f.rate > 0.0 && f.r_squared > 0.9;
    Outcome {
        passed: ok(&small) && ok(&large) && (0.5..=2.0).contains(&ratio),
        detail: format!(
            "kappa(100) {:.3} +- {:.3} (R^2 {:.4}), kappa(1000) {:.3} +- {:.3} (R^2 {:.4}), ratio {ratio:.3} in [0.5, 2]",
            small.rate, small.ci_half_width, small.r_squared, large.rate, large.ci_half_width, large.r_squared
        ),
    }
}

fn gamma_bias() -> Outcome {
    let r = run_experiment(&RunConfig::quick(Experiment::GammaBias)).expect("gamma bias");
    let dec = r.check("bias_strictly_decreasing").unwrap();
    let order = r.metric("order");
    Outcome {
        passed: dec.passed && order >= 0.4,
        detail: format!("{}; fitted order {order:.4} (>= 0.4)", dec.detail),
    }
}

fn combined_bound() -> Outcome {
    let r = run_experiment(&RunConfig::quick(Experiment::TheoremMain)).expect("theorem main");
    let names = ["three_term_fit", "gamma_axis_matches_gamma_bias", "n_axis_matches_propagation_of_chaos"];
    let passed = names.iter().all(|n| r.check(n).is_some_and(|c| c.passed));
    let failures = failed_checks(&r);
    Outcome {
        passed,
        detail: format!(
            "R^2 {:.4}, coefficients (sqrt gamma {:.4}, alpha {:.4}, exp {:.4}), kappa {:.3}; {}",
            r.metric("r_squared"),
            r.metric("coef_sqrt_gamma"),
            r.metric("coef_alpha"),
            r.metric("coef_exp"),
            r.metric("kappa"),
            if failures.is_empty() { "marginal axes consistent".into() } else { failures.join("; ") }
        ),
    }
}

fn csv_in_pool(threads: usize, cfg: &RunConfig) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let mut buf = Vec::new();
        run_experiment(cfg).unwrap().write_csv(&mut buf).unwrap();
        buf
    })
}

fn determinism() -> Outcome {
    let cfg = RunConfig {
        particles: vec![100, 400],
        replicates: 10,
        times: vec![0.5],
        kappa_replicates: 200,
        ..RunConfig::quick(Experiment::LongTime)
    };
    let a = csv_in_pool(1, &cfg);
    let b = csv_in_pool(4, &cfg);
    let c = csv_in_pool(2, &cfg);
    let (snap1, snap4) = worker_count_outputs(4, 7).unwrap();
    Outcome {
        passed: a == b && a == c && snap1 == snap4,
        detail: format!(
            "long_time records.csv ({} bytes) identical across 1/2/4 workers: {}; chain snapshot identical: {}",
            a.len(),
            a == b && a == c,
            snap1 == snap4
        ),
    }
}

fn main() {
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let results = [
        criterion(1, "oracle equivalence", min(3), oracle_equivalence),
        criterion(2, "degenerate reductions", min(1), degenerate_reductions),
        criterion(3, "transport exactness", min(1), transport_exactness),
        criterion(4, "contraction uniform in N", min(5), contraction_uniform_in_n),
        criterion(5, "gamma bias", min(1), gamma_bias),
        criterion(6, "combined bound", min(10), combined_bound),
        criterion(7, "determinism", None, determinism),
    ];
    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
