//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! Runs under `cargo test`; the MNIST criteria need the IDX files in
//! `data/mnist` (or `$DIFFGATE_DATA_DIR`).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffgate::gates::{self, UtilityMap};
use diffgate::model::{build_model, ModelSpec};
use diffgate::train::{
    self, check_grad, mc_validate, CheckGradOptions, McConfig, TrainConfig, TrainOutcome,
};
use diffgate::Tensor;

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn load_config(name: &str) -> TrainConfig {
    TrainConfig::load(&repo_path(&format!("configs/{name}"))).expect("config parses")
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Straight-line scalar gate transform used as the oracle.
fn reference_gates(s: &[f64], beta: f64, zeta: f64, utility: UtilityMap) -> Vec<f64> {
    let n = s.len();
    let mut u = vec![0.0; n];
    match utility {
        UtilityMap::Sigmoid => {
            for i in 0..n {
                u[i] = 1.0 / (1.0 + (-s[i]).exp());
            }
        }
        UtilityMap::Softmax => {
            let mut m = s[0];
            for &v in s {
                if v > m {
                    m = v;
                }
            }
            let mut total = 0.0;
            for i in 0..n {
                u[i] = (s[i] - m).exp();
                total += u[i];
            }
            for v in &mut u {
                *v /= total;
            }
        }
    }
    let mut r = vec![0.0; n];
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..n {
        let d = u[i] - beta;
        if d > 0.0 {
            r[i] = d;
            sum += d;
            count += 1;
        }
    }
    let mut z = vec![0.0; n];
    let scale = (-zeta).exp();
    for i in 0..n {
        if r[i] > 0.0 {
            z[i] = (r[i] - sum / count as f64) * scale + 1.0;
        }
    }
    z
}

fn random_utility(rng: &mut ChaCha8Rng) -> UtilityMap {
    if rng.random_bool(0.5) {
        UtilityMap::Sigmoid
    } else {
        UtilityMap::Softmax
    }
}

fn gate_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=24);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let utility = random_utility(&mut rng);
        let beta = if utility == UtilityMap::Softmax {
            rng.random_range(0.005..0.6)
        } else {
            rng.random_range(0.01..0.99)
        };
        let zeta = rng.random_range(0.0..6.0);
        let got = gates::gate_transform(&s, beta, zeta, utility)
            .expect("valid")
            .z;
        let want = reference_gates(&s, beta, zeta, utility);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    let hand = gates::gate_transform(&[2.0, -2.0, 0.5], 0.3, 0.0, UtilityMap::Sigmoid)
        .expect("valid")
        .z;
    let hand_err = hand
        .iter()
        .zip([1.129169, 0.0, 0.870831])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    outcome(
        worst <= 1e-12 && hand_err <= 1e-6,
        format!("max diff {worst:.2e} over 1000 configs; hand example err {hand_err:.1e}"),
    )
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

fn unit_mean_and_variance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_mean, mut worst_ratio) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < 1000 {
        let n = rng.random_range(3..=24);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let utility = random_utility(&mut rng);
        let beta = match utility {
            UtilityMap::Softmax => rng.random_range(0.001..0.2),
            UtilityMap::Sigmoid => rng.random_range(0.05..0.95),
        };
        let zeta = rng.random_range(0.0..4.0);
        let a = gates::gate_transform(&s, beta, zeta, utility).expect("valid");
        if a.n_active < 2 {
            continue;
        }
        let active = |z: &[f64]| -> Vec<f64> {
            z.iter()
                .zip(&a.active_mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .collect()
        };
        let za = active(&a.z);
        let var_a = sample_variance(&za);
        if var_a == 0.0 {
            continue;
        }
        // Identical rectified values carry no variance to scale.
        let b =
            gates::gate_transform(&s, beta, zeta + std::f64::consts::LN_2, utility).expect("valid");
        let var_b = sample_variance(&active(&b.z));
        worst_mean = worst_mean.max((za.iter().sum::<f64>() / za.len() as f64 - 1.0).abs());
        worst_ratio = worst_ratio.max(((var_a / var_b) - 4.0).abs() / 4.0);
        done += 1;
    }
    outcome(
        worst_mean <= 1e-12 && worst_ratio < 1e-9,
        format!("max |mean - 1| {worst_mean:.2e}; max variance-ratio rel err {worst_ratio:.2e}"),
    )
}

fn gradient_suite() -> Outcome {
    let cfg = load_config("blobs_check.toml");
    let opts = CheckGradOptions::default();
    let init = check_grad(&cfg, &opts).expect("check runs");

    // Also after some training, when gates have moved apart and some are off.
    let (trainset, testset) = cfg.data.load(&cfg.base_dir).expect("blobs");
    let mut model = build_model(&cfg.model.spec().unwrap(), cfg.seeds.init).unwrap();
    let mut topts = train::TrainOptions::from(&cfg);
    topts.epochs = 5;
    train::fit(&mut model, &trainset, &testset, &topts, &mut |_| Ok(())).expect("fit");
    let trained = train::check_grad_model(&model, &trainset.take(opts.batch), &opts).unwrap();

    let utilities: Vec<&str> = model.partitions.iter().map(|p| p.utility.name()).collect();
    let passed = init.passed && trained.passed;
    outcome(
        passed,
        format!(
            "max rel err {:.2e} at init / {:.2e} trained ({} + {} coordinates, {} + {} near kinks, utilities {:?})",
            init.max_rel_err,
            trained.max_rel_err,
            init.checked,
            trained.checked,
            init.excluded_kink,
            trained.excluded_kink,
            utilities
        ),
    )
}

fn random_mc_config(rng: &mut ChaCha8Rng, utility: UtilityMap) -> McConfig {
    let n = rng.random_range(2..=5);
    McConfig {
        mu: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        sigma: rng.random_range(0.3..2.0),
        beta: match utility {
            UtilityMap::Sigmoid => rng.random_range(0.1..0.9),
            UtilityMap::Softmax => rng.random_range(0.02..0.45),
        },
        zeta: rng.random_range(0.0..3.0),
        utility,
    }
}

fn mc_suite() -> (Outcome, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut claims = 0;
    let mut failed = Vec::new();
    let mut reports = Vec::new();
    for utility in [UtilityMap::Sigmoid, UtilityMap::Softmax] {
        for i in 0..10 {
            let cfg = random_mc_config(&mut rng, utility);
            let r = mc_validate(&cfg, 100_000, 1000 + i).expect("valid config");
            claims += r.claims.len();
            for c in r.claims.iter().filter(|c| !c.passed) {
                failed.push(format!(
                    "{} config {i} {}: observed {:.5} expected {:.5} tol {:.1e}",
                    utility.name(),
                    c.name,
                    c.observed,
                    c.expected,
                    c.tolerance
                ));
            }
            reports.push(serde_json::to_string(&r).unwrap());
        }
    }
    let detail = if failed.is_empty() {
        format!("{claims} claims over 20 configs within 3 SE")
    } else {
        format!(
            "{} of {claims} claims failed: {}",
            failed.len(),
            failed.join("; ")
        )
    };
    (outcome(failed.is_empty(), detail), reports)
}

fn prune_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cfg = gates::PartitionConfig::default();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for (name, spec, dims) in [
        (
            "mlp",
            ModelSpec::mlp(&[784, 300, 100, 10], Some(cfg)),
            vec![784],
        ),
        ("lenet5", ModelSpec::lenet5(Some([cfg; 4])), vec![1, 28, 28]),
    ] {
        let mut model = build_model(&spec, 9).unwrap();
        // Push 40% of the gates below threshold, move the rest apart.
        for p in &mut model.partitions {
            for m in &mut p.mu {
                *m = if rng.random_bool(0.4) {
                    -3.0
                } else {
                    rng.random_range(0.0..2.0)
                };
            }
        }
        let total: usize = model.partitions.iter().map(|p| p.size()).sum();
        let active: usize = model.eval_gates().iter().map(|o| o.n_active).sum();
        let exported = model.prune_export().expect("export");
        let per: usize = dims.iter().product();
        let mut shape = vec![100];
        shape.extend(&dims);
        let x = Tensor::new(
            shape,
            (0..100 * per).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let d = model
            .predict(&x)
            .unwrap()
            .max_abs_diff(&exported.predict(&x).unwrap());
        worst = worst.max(d);
        detail.push(format!(
            "{name}: {:.0}% disabled, {} -> {} params, max diff {d:.1e}",
            100.0 * (total - active) as f64 / total as f64,
            model.parameter_count(),
            exported.parameter_count()
        ));
    }
    outcome(worst < 1e-9, detail.join("; "))
}

fn run_config(cfg: &TrainConfig) -> TrainOutcome {
    train::train(cfg, None).expect("training runs")
}

fn fingerprint(o: &TrainOutcome) -> String {
    o.report.epochs_jsonl() + &o.report.summary_json()
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome, Duration, Option<Duration>)> = Vec::new();
    let mut timed =
        |name: &'static str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
            let start = Instant::now();
            let out = f();
            let took = start.elapsed();
            let within = limit.is_none_or(|l| took <= l);
            let out = Outcome {
                passed: out.passed && within,
                detail: out.detail,
            };
            println!(
                "{} {name}: {} [{:.2} s]",
                if out.passed { "PASS" } else { "FAIL" },
                out.detail,
                took.as_secs_f64()
            );
            results.push((name, out, took, limit));
        };

    timed(
        "gate-transform oracle",
        Some(Duration::from_secs(1)),
        &mut gate_oracle,
    );
    timed(
        "unit mean and variance control",
        Some(Duration::from_secs(1)),
        &mut unit_mean_and_variance,
    );
    timed(
        "gradient suite",
        Some(Duration::from_secs(30)),
        &mut gradient_suite,
    );
    let mut mc_reports = Vec::new();
    timed(
        "monte-carlo probabilities",
        Some(Duration::from_secs(60)),
        &mut || {
            let (o, r) = mc_suite();
            mc_reports = r;
            o
        },
    );
    timed("prune-export equivalence", None, &mut prune_equivalence);

    let data_ok =
        diffgate::data::load_mnist_dir(&diffgate::data::data_dir(&repo_path("data/mnist"))).is_ok();
    let desk = load_config("mlp_desk.toml");
    let mut desk_run = None;
    timed(
        "desk-scale training",
        Some(Duration::from_secs(600)),
        &mut || {
            if !data_ok {
                return outcome(false, "MNIST IDX files not found".into());
            }
            let o = run_config(&desk);
            let last = o.report.epochs.last().expect("epochs");
            let total: usize = last.partitions.iter().map(|p| p.size).sum();
            let active = last.total_active();
            let passed = last.test_error_pct <= 8.0 && active as f64 <= 0.7 * total as f64;
            let detail = format!(
            "test error {:.2}% (<= 8%), active {active}/{total} = {:.1}% (<= 70%), architecture {}",
            last.test_error_pct,
            100.0 * active as f64 / total as f64,
            last.architecture
        );
            desk_run = Some(o);
            outcome(passed, detail)
        },
    );
    timed("unregularized model selection", None, &mut || {
        if !data_ok {
            return outcome(false, "MNIST IDX files not found".into());
        }
        let gated = run_config(&load_config("mlp_desk_unregularized.toml"));
        let plain = run_config(&load_config("mlp_desk_baseline.toml"));
        let a = gated.report.epochs.last().unwrap();
        let b = plain.report.epochs.last().unwrap();
        let gap = a.test_error_pct - b.test_error_pct;
        outcome(
            gap.abs() <= 0.5,
            format!(
                "gated λ=0 {:.2}% vs ungated {:.2}% (gap {gap:+.2} pp, <= 0.5), gated architecture {}",
                a.test_error_pct, b.test_error_pct, a.architecture
            ),
        )
    });
    timed("determinism", None, &mut || {
        let mut same = Vec::new();
        let blobs = load_config("blobs_check.toml");
        let g1 = check_grad(&blobs, &CheckGradOptions::default()).unwrap();
        let g2 = check_grad(&blobs, &CheckGradOptions::default()).unwrap();
        same.push(("check-grad", g1 == g2));
        let (_, again) = mc_suite();
        same.push(("monte-carlo", again == mc_reports));
        let b1 = run_config(&blobs);
        let b2 = run_config(&blobs);
        same.push(("blobs training", fingerprint(&b1) == fingerprint(&b2)));
        if let Some(first) = &desk_run {
            let second = run_config(&desk);
            same.push(("desk training", fingerprint(first) == fingerprint(&second)));
        }
        let passed = same.iter().all(|(_, s)| *s) && desk_run.is_some();
        let detail = same
            .iter()
            .map(|(n, s)| format!("{n} {}", if *s { "identical" } else { "DIFFERS" }))
            .collect::<Vec<_>>()
            .join(", ");
        outcome(passed, detail)
    });

    let failed = results.iter().filter(|(_, o, ..)| !o.passed).count();
    for (name, _, took, limit) in &results {
        if limit.is_some_and(|l| *took > l) {
            println!(
                "  {name}: exceeded time limit of {} s",
                limit.unwrap().as_secs()
            );
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
