//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use resup::cotrain::{run_training, TrainConfig, Variant};
use resup::datagen::{corrupt_symmetric, gen_blobs, BlobSpec};
use resup::harness::{run_experiment, Aggregate, Report};
use resup::nnet::{backward_joint, forward_batch, init_classifier, ClassifierParams, NetState};
use resup::noise_model::{beta_pdf, fit_bmm, FitConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn em_recovery() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (clean, noisy) = (Beta::new(8.0, 2.0).unwrap(), Beta::new(2.0, 6.0).unwrap());
    let values: Vec<f64> =
        (0..10_000).map(|_| if rng.random::<f64>() < 0.6 { clean.sample(&mut rng) } else { noisy.sample(&mut rng) }).collect();
    let start = Instant::now();
    let fit = match fit_bmm(&values, &FitConfig::default()) {
        Ok(fit) => fit,
        Err(e) => return verdict(false, format!("fit failed: {e}")),
    };
    let elapsed = start.elapsed();
    let m = &fit.mixture;
    let (mc, mn, dc) = (m.clean().mean(), m.noisy().mean(), m.clean_mixing());
    let pass = (mc - 0.80).abs() <= 0.03 && (mn - 0.25).abs() <= 0.03 && (dc - 0.6).abs() <= 0.05 && elapsed < Duration::from_secs(1);
    verdict(pass, format!("clean mean {mc:.4}, noisy mean {mn:.4}, delta_clean {dc:.4}, fit {:.3}s", elapsed.as_secs_f64()))
}

/// Adaptive Simpson on `[a, b]`.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 60)
}

/// `int_0^1 pdf(s) ds` with `s = sin^2(t)`, which removes the endpoint
/// singularities for shapes >= 1/2. The arc is split in two so each half has
/// only one delicate endpoint.
fn pdf_integral(alpha: f64, beta: f64) -> f64 {
    let g = |t: f64| {
        let s = t.sin().powi(2);
        if s <= 0.0 || s >= 1.0 {
            return 0.0;
        }
        beta_pdf(s, alpha, beta).unwrap() * (2.0 * t).sin()
    };
    let quarter = std::f64::consts::FRAC_PI_4;
    simpson(&g, 0.0, quarter, 1e-11) + simpson(&g, quarter, 2.0 * quarter, 1e-11)
}

fn pdf_normalization() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = (0.0f64, 0.0, 0.0);
    for _ in 0..50 {
        let (a, b) = (rng.random_range(0.5..=20.0), rng.random_range(0.5..=20.0));
        let err = (pdf_integral(a, b) - 1.0).abs();
        if err > worst.0 {
            worst = (err, a, b);
        }
    }
    verdict(worst.0 <= 1e-6, format!("max |integral - 1| = {:.2e} at alpha={:.3}, beta={:.3}", worst.0, worst.1, worst.2))
}

fn em_ascent() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = FitConfig { max_iters: 100, tol: 0.0, ..FitConfig::default() };
    let (mut fitted, mut degenerate, mut worst_drop) = (0, 0, 0.0f64);
    for _ in 0..100 {
        let shape = |rng: &mut ChaCha8Rng| Beta::new(rng.random_range(0.5..20.0), rng.random_range(0.5..20.0)).unwrap();
        let (c0, c1) = (shape(&mut rng), shape(&mut rng));
        let mix: f64 = rng.random_range(0.1..0.9);
        let n = rng.random_range(200..3000);
        let values: Vec<f64> =
            (0..n).map(|_| if rng.random::<f64>() < mix { c0.sample(&mut rng) } else { c1.sample(&mut rng) }).collect();
        match fit_bmm(&values, &cfg) {
            Ok(fit) => {
                fitted += 1;
                for w in fit.log_likelihood_trace.windows(2) {
                    worst_drop = worst_drop.max(w[0] - w[1]);
                }
            }
            Err(_) => degenerate += 1,
        }
    }
    verdict(
        worst_drop <= 1e-9 && fitted >= 50,
        format!("{fitted} fits ({degenerate} degenerate), largest per-iteration decrease {worst_drop:.2e}"),
    )
}

/// Reference forward pass and joint objective written independently of the library.
fn reference_objective(
    nets: [&ClassifierParams; 2],
    x: &Array2<f64>,
    labels: &[usize],
    w: [&[f64]; 2],
    lambda: f64,
) -> f64 {
    let probs: Vec<Array2<f64>> = nets
        .iter()
        .map(|net| {
            let mut h = x.clone();
            let last = net.weights.len() - 1;
            for (l, (wm, b)) in net.weights.iter().zip(&net.biases).enumerate() {
                h = h.dot(wm) + b;
                if l < last {
                    h.mapv_inplace(|v| v.max(0.0));
                }
            }
            for mut row in h.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            h
        })
        .collect();
    let (batch, classes) = probs[0].dim();
    let mut ce = 0.0;
    let mut co = 0.0;
    for i in 0..batch {
        // net 1's CE is scaled by net 2's weight and vice versa
        ce += w[1][i] * -probs[0][[i, labels[i]]].max(1e-12).ln() + w[0][i] * -probs[1][[i, labels[i]]].max(1e-12).ln();
        co += (0..classes).map(|k| (probs[0][[i, k]] - probs[1][[i, k]]).powi(2)).sum::<f64>() / classes as f64;
    }
    ce / batch as f64 + lambda * co / batch as f64
}

fn flat_mut(net: &mut ClassifierParams, mut idx: usize) -> &mut f64 {
    for l in 0..net.weights.len() {
        let n = net.weights[l].len();
        if idx < n {
            let c = net.weights[l].ncols();
            return &mut net.weights[l][[idx / c, idx % c]];
        }
        idx -= n;
        if idx < net.biases[l].len() {
            return &mut net.biases[l][idx];
        }
        idx -= net.biases[l].len();
    }
    unreachable!()
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let shapes: [&[usize]; 5] = [&[10, 16, 8, 4], &[6, 5, 3], &[4, 4], &[10, 16, 4], &[3, 8, 8, 2]];
    let (mut worst, mut networks) = (0.0f64, 0);
    let h = 1e-6;
    for trial in 0..24 {
        let dims = shapes[trial % shapes.len()];
        let lambda = if trial % 2 == 0 { 0.0 } else { 5.0 };
        let (d, c, b) = (dims[0], *dims.last().unwrap(), 8);
        let net1 = init_classifier(dims, rng.random()).unwrap();
        let net2 = init_classifier(dims, rng.random()).unwrap();
        let x = Array2::from_shape_fn((b, d), |_| StandardNormal.sample(&mut rng));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let w1: Vec<f64> = (0..b).map(|_| rng.random()).collect();
        let w2: Vec<f64> = (0..b).map(|_| rng.random()).collect();

        let f1 = forward_batch(&net1, x.view()).unwrap();
        let f2 = forward_batch(&net2, x.view()).unwrap();
        let (g1, g2) = backward_joint(
            NetState { params: &net1, forward: &f1 },
            NetState { params: &net2, forward: &f2 },
            &labels,
            &w1,
            &w2,
            lambda,
        )
        .unwrap();
        for (which, analytic) in [g1.flatten(), g2.flatten()].into_iter().enumerate() {
            for (idx, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let (mut p1, mut p2) = (net1.clone(), net2.clone());
                    *flat_mut(if which == 0 { &mut p1 } else { &mut p2 }, idx) += delta;
                    reference_objective([&p1, &p2], &x, &labels, [&w1, &w2], lambda)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
        }
        networks += 1;
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && networks >= 20 && elapsed < Duration::from_secs(30),
        format!("{networks} network pairs, max relative error {worst:.2e}, {:.2}s", elapsed.as_secs_f64()),
    )
}

type Check = fn(&Benchmark) -> Result<Verdict, String>;

struct Benchmark {
    noisy: Report,
    clean: Report,
    elapsed: Duration,
}

const ABLATION: [Variant; 7] = [
    Variant::Standard,
    Variant::LossSingle,
    Variant::SimSingle,
    Variant::LossWeex,
    Variant::SimWeex,
    Variant::LossResup,
    Variant::Resup,
];

fn run_benchmark() -> Result<Benchmark, String> {
    let start = Instant::now();
    let noisy = run_experiment(&common::blobs_benchmark(0.3, ABLATION.to_vec())).map_err(|e| e.to_string())?;
    let clean =
        run_experiment(&common::blobs_benchmark(0.0, vec![Variant::Standard, Variant::Resup])).map_err(|e| e.to_string())?;
    Ok(Benchmark { noisy, clean, elapsed: start.elapsed() })
}

fn agg(report: &Report, v: Variant) -> Result<&Aggregate, String> {
    let a = report.aggregate(v).ok_or_else(|| format!("{v} missing"))?;
    if a.failed > 0 || a.replicates != 5 {
        return Err(format!("{v}: {} of {} replicates ran", a.replicates, a.replicates + a.failed));
    }
    Ok(a)
}

fn noise_robustness(b: &Benchmark) -> Result<Verdict, String> {
    let std_noisy = agg(&b.noisy, Variant::Standard)?.mean_accuracy;
    let resup_noisy = agg(&b.noisy, Variant::Resup)?.mean_accuracy;
    let std_clean = agg(&b.clean, Variant::Standard)?.mean_accuracy;
    let resup_clean = agg(&b.clean, Variant::Resup)?.mean_accuracy;
    let (std_drop, resup_drop) = (std_clean - std_noisy, resup_clean - resup_noisy);
    let pass = (0.90..=0.95).contains(&std_clean)
        && resup_noisy - std_noisy >= 0.05
        && resup_drop <= 0.5 * std_drop
        && b.elapsed < Duration::from_secs(600);
    Ok(verdict(
        pass,
        format!(
            "clean standard {:.2}%, noisy standard {:.2}%, noisy resup {:.2}% (gap {:+.2}); drops: resup {:.2} vs standard {:.2}; grid {:.0}s",
            100.0 * std_clean,
            100.0 * std_noisy,
            100.0 * resup_noisy,
            100.0 * (resup_noisy - std_noisy),
            100.0 * resup_drop,
            100.0 * std_drop,
            b.elapsed.as_secs_f64()
        ),
    ))
}

fn ablation_ordering(b: &Benchmark) -> Result<Verdict, String> {
    let acc = |v| agg(&b.noisy, v).map(|a| a.mean_accuracy);
    let pairs = [
        (Variant::Resup, Variant::SimWeex),
        (Variant::SimWeex, Variant::SimSingle),
        (Variant::SimSingle, Variant::Standard),
        (Variant::SimSingle, Variant::LossSingle),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (hi, lo) in pairs {
        let gap = acc(hi)? - acc(lo)?;
        pass &= gap >= -0.005;
        parts.push(format!("{hi} - {lo} = {:+.2}", 100.0 * gap));
    }
    let means: Vec<String> = ABLATION.iter().map(|&v| acc(v).map(|a| format!("{v} {:.2}", 100.0 * a))).collect::<Result<_, _>>()?;
    Ok(verdict(pass, format!("{}; means: {}", parts.join(", "), means.join(", "))))
}

fn weight_separation(b: &Benchmark) -> Result<Verdict, String> {
    let a = agg(&b.noisy, Variant::Resup)?;
    let (a1, a2) = (a.mean_weight_auc_net1.ok_or("no auc for net 1")?, a.mean_weight_auc_net2.ok_or("no auc for net 2")?);
    Ok(verdict(a1 >= 0.85 && a2 >= 0.85, format!("resup weight AUC net1 {a1:.4}, net2 {a2:.4}")))
}

fn reductions() -> Verdict {
    let all = gen_blobs(&BlobSpec { n: 500, classes: 4, dim: 6, separation: 3.0, seed: 5 }).unwrap();
    let (train, test) = all.split_at(400);
    let train = corrupt_symmetric(&train, 0.3, 6).unwrap();
    let cfg = TrainConfig {
        variant: Variant::Standard,
        epochs: 5,
        batch_size: 64,
        lr: 3e-3,
        lr_milestones: vec![3],
        hidden_dims: vec![16, 8],
        seed: 21,
        ..TrainConfig::default()
    };
    let run = run_training(&train, &test, &cfg).unwrap();
    let reference = common::independent_ce_training(&train, &test, &cfg);
    let params_equal =
        run.state.net1 == reference.nets[0] && run.state.net2.as_ref().is_some_and(|(n, _)| *n == reference.nets[1]);
    let acc_equal = run
        .epochs
        .iter()
        .zip(&reference.accuracies)
        .all(|(m, r)| m.test_accuracy_net1 == r[0] && m.test_accuracy_net2 == Some(r[1]));

    // unit weights with no consistency term: joint loss equals the sum of both CE means
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = 8;
        let p = |rng: &mut ChaCha8Rng| {
            let mut m = Array2::from_shape_fn((b, 4), |_| rng.random::<f64>() + 1e-3);
            for mut row in m.rows_mut() {
                let sum = row.sum();
                row /= sum;
            }
            m
        };
        let (p1, p2) = (p(&mut rng), p(&mut rng));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
        let l1 = resup::nnet::ce_losses(p1.view(), &labels).unwrap();
        let l2 = resup::nnet::ce_losses(p2.view(), &labels).unwrap();
        let ones = vec![1.0; b];
        let lwc = resup::cotrain::weighted_ce(&l1, &l2, &ones, &ones).unwrap();
        let lco = resup::cotrain::consistency_loss(p1.view(), p2.view()).unwrap();
        let joint = resup::cotrain::joint_loss(lwc, lco, 0.0);
        let baseline = l1.iter().sum::<f64>() / b as f64 + l2.iter().sum::<f64>() / b as f64;
        worst = worst.max((joint - baseline).abs());
    }
    verdict(
        params_equal && acc_equal && worst <= 1e-12,
        format!(
            "parameters bit-identical: {params_equal}, per-epoch accuracies identical: {acc_equal}, max |L_jo - (CE1 + CE2)| = {worst:.1e}"
        ),
    )
}

fn determinism() -> Verdict {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return verdict(false, e.to_string()),
    };
    let paths = [dir.path().join("a.json"), dir.path().join("b.json")];
    for p in &paths {
        let status = Command::new(env!("CARGO_BIN_EXE_resup"))
            .args([
                "train", "--variant", "resup", "--noise-rate", "0.3", "--n-train", "400", "--n-test", "100", "--epochs",
                "5", "--lr", "1e-3", "--seed", "7", "--out",
            ])
            .arg(p)
            .output();
        match status {
            Ok(o) if o.status.success() => {}
            Ok(o) => return verdict(false, format!("train failed: {}", String::from_utf8_lossy(&o.stderr))),
            Err(e) => return verdict(false, e.to_string()),
        }
    }
    let (a, b) = (std::fs::read(&paths[0]).unwrap_or_default(), std::fs::read(&paths[1]).unwrap_or_default());

    // grid results must not depend on the thread count
    let mut spec = common::blobs_benchmark(0.3, vec![Variant::Resup, Variant::SimSingle]);
    spec.data = resup::harness::DataSpec::Blobs { n_train: 300, n_test: 100, classes: 4, dim: 10, separation: 4.0, seed: 1 };
    spec.train.epochs = 3;
    spec.seeds = vec![0, 1, 2];
    let grid = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_experiment(&spec).unwrap().to_json().unwrap())
    };
    let (serial, parallel) = (grid(1), grid(4));
    verdict(
        !a.is_empty() && a == b && serial == parallel,
        format!(
            "train reports {} bytes, identical: {}; grid identical across 1 and 4 threads: {}",
            a.len(),
            a == b,
            serial == parallel
        ),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, start: Instant, v: Verdict| {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name}: {} ({:.1}s)", v.detail, start.elapsed().as_secs_f64());
        failures += usize::from(!v.pass);
    };

    let t = Instant::now();
    report(1, "em_recovery", t, em_recovery());
    let t = Instant::now();
    report(2, "pdf_normalization", t, pdf_normalization());
    let t = Instant::now();
    report(3, "em_ascent", t, em_ascent());
    let t = Instant::now();
    report(4, "gradient_check", t, gradient_check());

    let t = Instant::now();
    match run_benchmark() {
        Ok(bench) => {
            let checks: [(usize, &str, Check); 3] = [
                (5, "noise_robustness", noise_robustness),
                (6, "ablation_ordering", ablation_ordering),
                (7, "weight_separation", weight_separation),
            ];
            for (id, name, check) in checks {
                let v = check(&bench).unwrap_or_else(|e| verdict(false, e));
                report(id, name, t, v);
            }
        }
        Err(e) => {
            for (id, name) in [(5, "noise_robustness"), (6, "ablation_ordering"), (7, "weight_separation")] {
                report(id, name, t, verdict(false, format!("benchmark failed: {e}")));
            }
        }
    }

    let t = Instant::now();
    report(8, "reductions", t, reductions());
    let t = Instant::now();
    report(9, "determinism", t, determinism());

    println!("{} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
