//! Acceptance criteria, one PASS/FAIL line each. Runs with a plain `main`
//! so the lines are always printed; the process fails if any criterion does.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dktv::baselines::TvdmdLearner;
use dktv::experiments::cartpole::MpcExperiment;
use dktv::experiments::nh_sweep::NhSweepExperiment;
use dktv::experiments::quad::QuadExperiment;
use dktv::experiments::simple_ntvs::NtvsExperiment;
use dktv::experiments::{ExperimentConfig, NetSpec};
use dktv::linalg::hstack;
use dktv::net::{loss_gradient, loss_value, Activation, ObjectiveWeights, PriorMoments};
use dktv::par::Exec;
use dktv::pipeline::{partition_stream, OnlineLearner};
use dktv::regression::{fit_batch, recursive_update};
use dktv::{DataBatch, KoopmanMatrices, ObservableNet, RecursiveCache, TrainConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

/// Id, description, time limit in seconds, and the check itself.
type Check<'a> = (u32, &'static str, u64, Box<dyn FnOnce() -> Outcome + 'a>);

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"));
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn ntvs_config() -> NtvsExperiment {
    match config("simple_ntvs") {
        ExperimentConfig::SimpleNtvs(c) => c,
        other => panic!("unexpected {}", other.id()),
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn stacked(m: &KoopmanMatrices) -> Vec<&DMatrix<f64>> {
    vec![&m.a, &m.b, &m.c]
}

/// Recursive update over three batches against one fit on their
/// concatenation.
fn recursive_matches_concatenated_fit() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for seed in 0..10u64 {
        for (r, m) in [(4, 0), (6, 2), (4, 2), (6, 0)].into_iter().skip((seed % 2) as usize).step_by(2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + r as u64 + 7 * m as u64);
            let n = 3;
            let beta = r + m + 5;
            let batches: Vec<[DMatrix<f64>; 4]> = (0..3)
                .map(|_| [random(r, beta, &mut rng), random(r, beta, &mut rng), random(m, beta, &mut rng), random(n, beta, &mut rng)])
                .collect();
            let [g, gb, u, x] = &batches[0];
            let (mut mats, mut cache) = RecursiveCache::from_batch(g, gb, u, x).map_err(|e| e.to_string())?;
            for [g, gb, u, x] in &batches[1..] {
                (mats, cache) = recursive_update(&cache, &mats, g, gb, u, x).map_err(|e| e.to_string())?;
            }
            let cat = |i: usize| batches.iter().skip(1).fold(batches[0][i].clone(), |acc, b| hstack(&acc, &b[i]));
            let full = fit_batch(&cat(0), &cat(1), &cat(2), &cat(3)).map_err(|e| e.to_string())?;
            for (a, b) in stacked(&mats).into_iter().zip(stacked(&full)) {
                if !b.is_empty() {
                    worst = worst.max(rel_frobenius(a, b));
                }
            }
            cases += 1;
        }
    }
    Ok((worst < 1e-8, format!("{cases} runs of 3 batches, max relative error {worst:.2e}")))
}

fn central_difference(
    net: &ObservableNet,
    batch: &DataBatch,
    mats: &KoopmanMatrices,
    weights: &ObjectiveWeights,
    prior: Option<&PriorMoments<'_>>,
) -> Vec<f64> {
    let h = 1e-6;
    let mut probe = net.clone();
    (0..net.param_count())
        .map(|i| {
            let base = net.params()[i];
            probe.params_mut()[i] = base + h;
            let up = loss_value(&probe, batch, mats, weights, prior).unwrap().total;
            probe.params_mut()[i] = base - h;
            let dn = loss_value(&probe, batch, mats, weights, prior).unwrap().total;
            probe.params_mut()[i] = base;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Analytic objective gradient against central differences on random
/// networks, batches and models; every fourth case adds the norm penalty
/// through accumulated moments.
fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
        let n = rng.random_range(2..=4);
        let m = rng.random_range(0..=2);
        let hidden = rng.random_range(4..=10);
        let r = rng.random_range(n..=n + 3);
        let act = if case % 2 == 0 { Activation::Gaussian } else { Activation::Relu };
        let out = if case % 3 == 0 { Activation::Relu } else { Activation::Identity };
        let spec = NetSpec::new(&[(hidden, act), (r, out)]).with_passthrough(case % 5 == 4);
        let net = ObservableNet::random_arch(&spec.build(n), &mut rng).map_err(|e| e.to_string())?;
        let r = net.output_dim();
        let beta = r + m + 4;
        let batch = DataBatch::new(0, 0, random(n, beta, &mut rng), random(n, beta, &mut rng), random(m, beta, &mut rng))
            .map_err(|e| e.to_string())?;
        let mats = KoopmanMatrices {
            a: random(r, r, &mut rng) * 0.5,
            b: random(r, m, &mut rng) * 0.5,
            c: random(n, r, &mut rng) * 0.5,
        };
        let penalty = case % 4 == 3;
        let weights = ObjectiveWeights {
            w: rng.random_range(0.1..0.9),
            lambda_a: if penalty { 0.5 } else { 0.0 },
        };
        let prior_x = random(n, beta + 3, &mut rng);
        let prior_u = random(m, beta + 3, &mut rng);
        let g0 = net.forward_batch(&prior_x).map_err(|e| e.to_string())?;
        let chi0 = dktv::linalg::vstack(&g0, &prior_u);
        let cross = net.forward_batch(&random(n, beta + 3, &mut rng)).map_err(|e| e.to_string())? * chi0.transpose() * 4.0;
        let gram = &chi0 * chi0.transpose() + DMatrix::identity(r + m, r + m);
        let moments = PriorMoments {
            cross: &cross,
            gram: &gram,
        };
        let prior = penalty.then_some(&moments);
        let (_, grad) = loss_gradient(&net, &batch, &mats, &weights, prior).map_err(|e| e.to_string())?;
        let fd = central_difference(&net, &batch, &mats, &weights, prior);
        let diff: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
    }
    Ok((worst < 1e-6, format!("20 configurations, max relative error {worst:.2e}")))
}

/// Identity-lift recovery of a known linear system, and TVDMD against the
/// identity-lift, zero-epoch DKTV configuration.
fn exact_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, m, beta) = (3, 2, 15);
    let a0 = random(n, n, &mut rng) * 0.5;
    let b0 = random(n, m, &mut rng);
    let x = random(n, beta, &mut rng);
    let u = random(m, beta, &mut rng);
    let x_bar = &a0 * &x + &b0 * &u;
    let fit = fit_batch(&x, &x_bar, &u, &x).map_err(|e| e.to_string())?;
    let recovery = [(&fit.a, &a0), (&fit.b, &b0), (&fit.c, &DMatrix::identity(n, n))]
        .iter()
        .map(|(e, t)| (*e - *t).amax())
        .fold(0.0, f64::max);

    let exp = ntvs_config();
    let traj = exp.sample(6.0).map_err(|e| e.to_string())?;
    let batches = partition_stream(&traj.states, &traj.inputs, &exp.beta).map_err(|e| e.to_string())?;
    let train = TrainConfig {
        epochs: 0,
        initial_epochs: 0,
        accumulate: false,
        ..TrainConfig::default()
    };
    let mut dktv = OnlineLearner::with_net(&batches[0], ObservableNet::identity(2), train).map_err(|e| e.to_string())?;
    let mut tvdmd = TvdmdLearner::new(false);
    let mut gap: f64 = 0.0;
    for (i, b) in batches.iter().enumerate() {
        if i > 0 {
            dktv.step(b).map_err(|e| e.to_string())?;
        }
        let model = tvdmd.step(b).map_err(|e| e.to_string())?;
        gap = gap.max((&dktv.snapshot.matrices.a - &model.a_lin).amax());
    }
    Ok((
        recovery < 1e-10 && gap == 0.0,
        format!("recovery error {recovery:.2e}, TVDMD vs DKTV max difference {gap:.1e} over {} batches", batches.len()),
    ))
}

fn fast_variation(out: &Path) -> Outcome {
    let mut exp = ntvs_config();
    exp.gammas = vec![6.0];
    let limit = exp.threshold(6.0).ok_or("no committed threshold for gamma = 6")?.limit();
    let runs = exp.run(Exec::default()).map_err(|e| e.to_string())?;
    let mut ok = runs.len() == 5;
    let mut parts = Vec::new();
    for r in &runs {
        r.write_artifacts(out).map_err(|e| e.to_string())?;
        let s = r.summary();
        ok &= s.dktv_mean_error < s.tvdmd_mean_error && s.dktv_mean_error <= limit;
        parts.push(format!("s{} {:.3}/{:.3}", r.seed, s.dktv_mean_error, s.tvdmd_mean_error));
    }
    Ok((ok, format!("DKTV/TVDMD mean error {}; limit {limit:.3}", parts.join(", "))))
}

fn width_sweep() -> Outcome {
    let exp = match config("nh_sweep") {
        ExperimentConfig::NhSweep(c) => c,
        other => return Err(format!("unexpected {}", other.id())),
    };
    let run: dktv::experiments::nh_sweep::NhSweepRun =
        NhSweepExperiment::run(&exp, Exec::default()).map_err(|e| e.to_string())?;
    let (lo, hi) = (run.mean_error(8).ok_or("no n_h = 8")?, run.mean_error(64).ok_or("no n_h = 64")?);
    let same = run.points.iter().all(|p| p.data_hash == run.data_hash);
    Ok((hi < lo && same, format!("mean error {lo:.4} at n_h = 8, {hi:.4} at n_h = 64, shared data {same}")))
}

struct BoundTally {
    batches: usize,
    rank_deficient: usize,
    violated: usize,
    unexplained: usize,
    tightest: f64,
}

fn bound_tally(exp: &NtvsExperiment) -> Result<BoundTally, String> {
    let run = exp.run(Exec::default()).map_err(|e| e.to_string())?.remove(0);
    let r = &run.reports;
    Ok(BoundTally {
        batches: r.len(),
        rank_deficient: r.iter().filter(|b| b.breaches.rank_deficient).count(),
        violated: r.iter().filter(|b| b.violated).count(),
        unexplained: r.iter().filter(|b| b.violated && !b.breaches.any()).count(),
        tightest: r.iter().map(|b| b.max_observed() / (b.l_a + b.l_b + b.l_c)).fold(0.0, f64::max),
    })
}

/// The committed gamma = 0.8 run may only violate the bound on flagged
/// batches. Its piecewise-affine ReLU lift is rank deficient on most
/// batches, so dominance proper is checked on the same run with a smooth
/// output layer, where every rank check passes.
fn bound_dominance() -> Outcome {
    let mut exp = ntvs_config();
    exp.gammas = vec![0.8];
    exp.seeds = vec![0];
    exp.bound_reports = true;
    if exp.train.lambda_a <= 0.0 {
        return Err("the norm penalty is not active in the committed config".into());
    }
    let committed = bound_tally(&exp)?;
    let hidden = exp.net.layers[0];
    exp.net = NetSpec::new(&[(hidden.width, hidden.activation), (6, Activation::Gaussian)]);
    let smooth = bound_tally(&exp)?;
    let ok = committed.batches > 0
        && committed.unexplained == 0
        && smooth.batches > 0
        && smooth.rank_deficient == 0
        && smooth.violated == 0;
    let line = |name: &str, t: &BoundTally| {
        format!(
            "{name}: {} batches, {} rank deficient, {} violations ({} unflagged), max e/bound {:.3}",
            t.batches, t.rank_deficient, t.violated, t.unexplained, t.tightest
        )
    };
    Ok((ok, format!("{}; {}", line("committed lift", &committed), line("smooth output", &smooth))))
}

fn quad_loss(out: &Path) -> Outcome {
    let exp = match config("quad_predict") {
        ExperimentConfig::QuadPredict(c) => c,
        other => return Err(format!("unexpected {}", other.id())),
    };
    let runs = QuadExperiment::run(&exp, Exec::default()).map_err(|e| e.to_string())?;
    let mut ok = runs.len() == 3;
    let mut parts = Vec::new();
    for r in &runs {
        r.write_artifacts(out).map_err(|e| e.to_string())?;
        ok &= r.dktv_final_loss() < r.dnn_final_loss();
        parts.push(format!("s{} {:.2e}/{:.2e}", r.seed, r.dktv_final_loss(), r.dnn_final_loss()));
    }
    Ok((ok, format!("DKTV/DNN final loss {}", parts.join(", "))))
}

fn mpc_balance(out: &Path) -> Outcome {
    let exp = match config("mpc_cartpole") {
        ExperimentConfig::MpcCartpole(c) => c,
        other => return Err(format!("unexpected {}", other.id())),
    };
    if exp.net.lifted_dim(4) != 6 || exp.beta != 12 || exp.duration < 75.0 {
        return Err("committed config is not the 4 -> 6, beta = 12, 75 s setup".into());
    }
    let runs = MpcExperiment::run(&exp, Exec::default()).map_err(|e| e.to_string())?;
    let mut ok = runs.len() == 3;
    let mut parts = Vec::new();
    for r in &runs {
        r.write_artifacts(out).map_err(|e| e.to_string())?;
        let s = r.summary();
        ok &= s.balanced && s.max_abs_theta <= 0.2;
        parts.push(format!("s{} {:.3}", r.seed, s.max_abs_theta));
    }
    let mu = runs.first().map_or(f64::NAN, |r| r.summary().final_mu_c);
    Ok((ok, format!("max |theta| {} rad, mu_c reaches {mu:.3}", parts.join(", "))))
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .map(|e| (e.path().strip_prefix(root).unwrap().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    for (sub, f) in [
        ("ntvs", fast_variation as fn(&Path) -> Outcome),
        ("quad", quad_loss),
        ("mpc", mpc_balance),
    ] {
        f(&second.join(sub))?;
    }
    let (a, b) = (csv_files(first), csv_files(second));
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = a.keys().eq(b.keys());
    Ok((
        !a.is_empty() && same_set && differing.is_empty(),
        format!("{} CSV files compared, {} differ{}", a.len(), differing.len(), if same_set { "" } else { ", file sets differ" }),
    ))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let first = tempfile::tempdir().expect("temp dir");
    let second = tempfile::tempdir().expect("temp dir");
    let (ntvs, quad, mpc) = (first.path().join("ntvs"), first.path().join("quad"), first.path().join("mpc"));
    let criteria: Vec<Check<'_>> = vec![
        (1, "recursive update equals the concatenated fit", 5, Box::new(recursive_matches_concatenated_fit)),
        (2, "objective gradient matches finite differences", 10, Box::new(gradient_check)),
        (3, "exact recovery and TVDMD equivalence", 10, Box::new(exact_recovery)),
        (4, "fast variation: DKTV beats TVDMD on all seeds", 120, Box::new(move || fast_variation(&ntvs))),
        (5, "width sweep: error at n_h = 64 below n_h = 8", 300, Box::new(width_sweep)),
        (6, "observed error within L_a + L_b + L_c", 60, Box::new(bound_dominance)),
        (7, "quadcopter: DKTV final loss below single network", 180, Box::new(move || quad_loss(&quad))),
        (8, "cartpole MPC keeps |theta| <= 0.2 rad for 75 s", 180, Box::new(move || mpc_balance(&mpc))),
        (9, "re-runs of 4, 7 and 8 give identical CSVs", 600, Box::new(|| determinism(first.path(), second.path()))),
    ];
    let mut failed = 0;
    for (id, name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let (passed, detail) = match outcome {
            Ok((p, d)) => (p && in_time, d),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "criterion {id} {}: {name} | {detail} | {:.2} s (limit {limit} s)",
            if passed { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
