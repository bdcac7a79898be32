//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! The process exits non-zero when a check cannot run at all. A criterion that
//! runs and misses its threshold is reported as FAIL without failing the test
//! target; set `METAFIT_ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::Rng;

use metafit::checkpoint::Checkpoint;
use metafit::episodes::{check_disjoint, sample_episode, synth_pools, AugmentPolicy, Dataset, Episode};
use metafit::eval::{
    auc, default_neighbors, finetune_baseline, knn_feature_baseline, meta_test, EvalProtocol, Method,
};
use metafit::gradsuite::{run_suite, run_suite_with_fault, SuiteConfig, GRADIENT_TOLERANCE};
use metafit::metaloss::{da_task_loss_value, MetaConfig};
use metafit::nn::ArchSpec;
use metafit::rng::stream_rng;
use metafit::trainer::{pretrain, PretrainConfig, TrainEvent, TrainLogRecord, TrainSchedule, Trainer};
use metafit::ParamSet;

type Outcome = Result<(bool, String), String>;

struct Line {
    id: &'static str,
    title: &'static str,
    outcome: Outcome,
    elapsed: Duration,
    limit: Duration,
}

fn timed(id: &'static str, title: &'static str, limit_s: u64, f: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    let outcome = f();
    Line {
        id,
        title,
        outcome,
        elapsed: start.elapsed(),
        limit: Duration::from_secs(limit_s),
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Direct arithmetic for `L^η · (−ln max(ε, 1 − L))`.
fn da_oracle(l: f64, eta: f64, eps: f64) -> f64 {
    let log_term = if 1.0 - l <= eps {
        -eps.ln()
    } else {
        -(1.0 - l).ln()
    };
    l.powf(eta) * log_term
}

fn da_grid() -> Outcome {
    let eps = MetaConfig::default().epsilon;
    let mut worst = 0.0f64;
    let mut clamped = 0;
    for i in 0..=20 {
        let l = i as f64 / 10.0;
        for eta in [0.0, 1.0, 3.0, 5.0, 7.0] {
            let got = da_task_loss_value(l, eta, eps).map_err(err)?;
            worst = worst.max((got - da_oracle(l, eta, eps)).abs());
            if 1.0 - l <= eps {
                clamped += 1;
            }
        }
    }
    Ok((
        worst <= 1e-9,
        format!("105 grid points ({clamped} on the clamped branch), max |diff| {worst:.2e} (tol 1e-9)"),
    ))
}

fn down_weighting() -> Outcome {
    let eps = MetaConfig::default().epsilon;
    let mut rng = stream_rng(2, 0);
    let mut violations = 0;
    let mut cases = 0;
    for eta in [1.0, 3.0, 5.0, 7.0] {
        for _ in 0..10_000 {
            let (a, b): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let (l1, l2) = if a < b { (a, b) } else { (b, a) };
            if !(l1 > 0.0 && l1 < l2) {
                continue;
            }
            cases += 1;
            let ratio = da_task_loss_value(l1, eta, eps).map_err(err)?
                / da_task_loss_value(l2, eta, eps).map_err(err)?;
            // A NaN ratio counts as a violation.
            if ratio.partial_cmp(&(l1 / l2)) != Some(std::cmp::Ordering::Less) {
                violations += 1;
            }
        }
    }
    Ok((
        violations == 0 && cases >= 4 * 9_990,
        format!("{cases} pairs over eta in {{1,3,5,7}}, {violations} violations"),
    ))
}

fn gradient_fidelity() -> Outcome {
    let cfg = SuiteConfig::default();
    let report = run_suite(&cfg).map_err(err)?;
    let failing: Vec<String> = report.failures().iter().map(|c| c.name.clone()).collect();
    let through = report
        .get("difficulty_aware_through_adaptation")
        .map(|c| c.max_error)
        .unwrap_or(f64::INFINITY);
    let control = run_suite_with_fault(&cfg, "sigmoid").map_err(err)?;
    let caught = control.failures().iter().any(|c| c.name == "sigmoid");
    Ok((
        report.passed() && report.max_gradient_error() < GRADIENT_TOLERANCE && caught,
        format!(
            "{} checks, max relative error {:.2e} (tol 1e-4), second-order DA path {:.2e}, failing {:?}; \
             corrupted sigmoid backward caught: {caught}",
            report.checks.len(),
            report.max_gradient_error(),
            through,
            failing
        ),
    ))
}

fn episode_violations(ep: &Episode, data: &Dataset, k: usize, q: usize) -> usize {
    let mut bad = 0;
    let ids: HashSet<&str> = data.classes().iter().map(|c| c.id.as_str()).collect();
    if ep.classes[0] == ep.classes[1] || !ep.classes.iter().all(|c| ids.contains(c.as_str())) {
        bad += 1;
    }
    let support: HashSet<&str> = ep.support_sources.iter().map(String::as_str).collect();
    if support.len() != 2 * k || ep.query_sources.iter().any(|s| support.contains(s.as_str())) {
        bad += 1;
    }
    let query: HashSet<&str> = ep.query_sources.iter().map(String::as_str).collect();
    if query.len() != 2 * q {
        bad += 1;
    }
    for (labels, sources, n) in [
        (ep.support.labels.data(), &ep.support_sources, k),
        (ep.query.labels.data(), &ep.query_sources, q),
    ] {
        let ones = labels.iter().filter(|&&y| y == 1.0).count();
        let zeros = labels.iter().filter(|&&y| y == 0.0).count();
        if ones != n || zeros != n || labels.len() != 2 * n || sources.len() != 2 * n {
            bad += 1;
        }
        for (y, src) in labels.iter().zip(sources.iter()) {
            let class = &ep.classes[*y as usize];
            if !src.starts_with(&format!("{class}/")) {
                bad += 1;
            }
        }
    }
    bad
}

fn episode_invariants() -> Outcome {
    let (train, test) = synth_pools(4, 8, 3, 40, 8).map_err(err)?;
    check_disjoint(&train, &test).map_err(err)?;
    let train_ids: HashSet<&str> = train.classes().iter().map(|c| c.id.as_str()).collect();
    let mut violations = test
        .classes()
        .iter()
        .filter(|c| train_ids.contains(c.id.as_str()))
        .count();
    let mut rng = stream_rng(4, 1);
    let n = 10_000;
    for i in 0..n {
        let data = if i % 2 == 0 { &train } else { &test };
        let k = rng.random_range(1..=5);
        let q = rng.random_range(1..=15);
        let ep = sample_episode(data, k, q, &mut rng).map_err(err)?;
        violations += episode_violations(&ep, data, k, q);
        let other = if i % 2 == 0 { &test } else { &train };
        if ep
            .classes
            .iter()
            .any(|c| other.classes().iter().any(|p| &p.id == c))
        {
            violations += 1;
        }
    }
    Ok((violations == 0, format!("{n} episodes, {violations} violations")))
}

/// Exhaustive pair count with ties worth one half.
fn pair_count_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (s1, _) in scores.iter().zip(labels).filter(|(_, y)| **y == 1.0) {
        for (s0, _) in scores.iter().zip(labels).filter(|(_, y)| **y == 0.0) {
            pairs += 1;
            twice += if s1 > s0 {
                2
            } else if s1 == s0 {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn auc_oracle() -> Outcome {
    let mut rng = stream_rng(5, 0);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=20);
        let pos = rng.random_range(1..n);
        let mut labels: Vec<f64> = (0..n).map(|i| if i < pos { 1.0 } else { 0.0 }).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let levels = rng.random_range(2..=6);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect();
        let distinct: HashSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        if distinct.len() < n {
            with_ties += 1;
        }
        if auc(&scores, &labels).map_err(err)? != pair_count_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("1000 instances ({with_ties} with tied scores), {mismatches} inexact"),
    ))
}

struct Bench {
    spec: ArchSpec,
    train: Dataset,
    test: Dataset,
    config: MetaConfig,
    seed: u64,
}

impl Bench {
    fn new() -> Result<Bench, String> {
        let seed = 0;
        let (train, test) = synth_pools(seed, 8, 3, 40, 8).map_err(err)?;
        Ok(Bench {
            spec: ArchSpec::mlp(8, &[32, 32]),
            train,
            test,
            config: MetaConfig::default(),
            seed,
        })
    }

    /// 1000 iterations, the difficulty-aware objective switched on halfway for DAML.
    fn schedule(&self, daml: bool) -> TrainSchedule {
        TrainSchedule {
            total_iterations: 1000,
            da_activation_iteration: daml.then_some(500),
            lr_decay_iterations: vec![500, 833],
            seed: self.seed,
            ..TrainSchedule::default()
        }
    }

    fn train(&self, daml: bool) -> Result<ParamSet, String> {
        let schedule = self.schedule(daml);
        let policy = AugmentPolicy::default();
        let trainer = Trainer::new(&self.spec, &self.train, &self.config, &schedule, &policy).map_err(err)?;
        let end = trainer
            .run_to_end(trainer.init().map_err(err)?, |_| Ok(()))
            .map_err(err)?;
        Ok(end.params)
    }

    fn protocol(&self, method: Method, k: usize) -> EvalProtocol {
        EvalProtocol {
            method,
            k,
            q: 15,
            runs: 30,
            seed: self.seed,
        }
    }

    fn sweep(&self, params: &ParamSet, method: Method) -> Result<Vec<f64>, String> {
        [1, 3, 5]
            .iter()
            .map(|&k| {
                meta_test(
                    &self.spec,
                    params,
                    &self.test,
                    &self.config,
                    &self.protocol(method, k),
                )
                .map(|r| r.mean)
                .map_err(err)
            })
            .collect()
    }

    fn encoder(&self) -> Result<ParamSet, String> {
        let cfg = PretrainConfig {
            seed: self.seed,
            ..PretrainConfig::default()
        };
        pretrain(&self.spec, &self.train, &cfg).map_err(err)
    }
}

fn monotone(aucs: &[f64]) -> bool {
    aucs.windows(2).all(|w| w[1] >= w[0] - 0.02)
}

fn benchmark() -> Outcome {
    let bench = Bench::new()?;
    let daml = bench.sweep(&bench.train(true)?, Method::Daml)?;
    let maml = bench.sweep(&bench.train(false)?, Method::Maml)?;
    let encoder = bench.encoder()?;
    let knn = knn_feature_baseline(
        &bench.spec,
        &encoder,
        &bench.test,
        default_neighbors(5),
        &bench.protocol(Method::Knn, 5),
    )
    .map_err(err)?
    .mean;
    let (d5, m5) = (daml[2], maml[2]);
    let a = d5 >= 0.90;
    let b = d5 >= m5 - 0.02;
    let c = d5 - knn >= 0.05 && m5 - knn >= 0.05;
    let d = monotone(&daml) && monotone(&maml);
    let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
    Ok((
        a && b && c && d,
        format!(
            "(a) {} DAML k=5 {d5:.3} >= 0.90; (b) {} DAML {d5:.3} vs MAML {m5:.3} - 0.02; \
             (c) {} margins over KNN {knn:.3}: DAML {:+.3}, MAML {:+.3} (need >= 0.05); \
             (d) {} k=1,3,5 DAML {:.3}/{:.3}/{:.3} MAML {:.3}/{:.3}/{:.3}",
            mark(a),
            mark(b),
            mark(c),
            d5 - knn,
            m5 - knn,
            mark(d),
            daml[0],
            daml[1],
            daml[2],
            maml[0],
            maml[1],
            maml[2],
        ),
    ))
}

fn overfitting() -> Outcome {
    let bench = Bench::new()?;
    let init = bench.encoder()?;
    let policy = AugmentPolicy::default();
    let run = |k| {
        finetune_baseline(
            &bench.spec,
            &init,
            &bench.test,
            &bench.config,
            100,
            &policy,
            &bench.protocol(Method::Finetune, k),
        )
        .map_err(err)
    };
    let (one, five) = (run(1)?, run(5)?);
    let worst_loss = one
        .support_losses
        .as_ref()
        .ok_or("finetune report carries no support losses")?
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let gap = five.mean - one.mean;
    Ok((
        worst_loss < 0.01 && gap >= 0.05,
        format!(
            "k=1 worst final support loss {worst_loss:.2e} (< 0.01), query AUC k=1 {:.3} vs k=5 {:.3}, gap {gap:.3} (>= 0.05)",
            one.mean, five.mean
        ),
    ))
}

fn determinism() -> Outcome {
    let bench = Bench::new()?;
    let schedule = TrainSchedule {
        total_iterations: 120,
        da_activation_iteration: Some(60),
        lr_decay_iterations: vec![60, 100],
        checkpoint_every: 30,
        seed: 8,
        ..TrainSchedule::default()
    };
    let policy = AugmentPolicy::default();
    let trainer = Trainer::new(&bench.spec, &bench.train, &bench.config, &schedule, &policy).map_err(err)?;
    let full = |start: Checkpoint, until: usize| {
        let mut logs: Vec<TrainLogRecord> = Vec::new();
        let mut checkpoints: Vec<Vec<u8>> = Vec::new();
        let end = trainer
            .run(start, until, |ev| {
                match ev {
                    TrainEvent::Iteration(r) => logs.push(r.without_timing()),
                    TrainEvent::Checkpoint(c) => checkpoints.push(c.to_bytes()),
                    TrainEvent::Diverged { .. } => {}
                }
                Ok(())
            })
            .map_err(err)?;
        Ok::<_, String>((end, logs, checkpoints))
    };
    let (a, logs_a, ck_a) = full(trainer.init().map_err(err)?, 120)?;
    let (b, logs_b, ck_b) = full(trainer.init().map_err(err)?, 120)?;
    let repeat = a.to_bytes() == b.to_bytes() && ck_a == ck_b && logs_a == logs_b;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("mid.ckpt");
    let (mid, logs_first, _) = full(trainer.init().map_err(err)?, 60)?;
    mid.save(&path).map_err(err)?;
    let (resumed, logs_second, _) = full(Checkpoint::load(&path).map_err(err)?, 120)?;
    let joined: Vec<TrainLogRecord> = logs_first.into_iter().chain(logs_second).collect();
    let resume = resumed.to_bytes() == a.to_bytes() && joined == logs_a;
    Ok((
        repeat && resume,
        format!(
            "repeat run bit-identical: {repeat} ({} checkpoints, {} log records); resume at 60/120 bit-identical: {resume}",
            ck_a.len(),
            logs_a.len()
        ),
    ))
}

fn main() {
    let lines = vec![
        timed("1", "difficulty-aware loss oracle", 1, da_grid),
        timed("2", "down-weighting of easy tasks", 5, down_weighting),
        timed("3", "gradient fidelity", 60, gradient_fidelity),
        timed("4", "episodic protocol invariants", 30, episode_invariants),
        timed("5", "AUC oracle", 5, auc_oracle),
        timed("6", "end-to-end synthetic benchmark", 600, benchmark),
        timed("7", "fine-tuning overfits at k=1", 180, overfitting),
        timed("8", "determinism and resume", 600, determinism),
    ];
    let mut broken = false;
    let mut failed = 0;
    for line in &lines {
        let secs = line.elapsed.as_secs_f64();
        let in_time = line.elapsed <= line.limit;
        let (status, detail) = match &line.outcome {
            Ok((ok, detail)) => (if *ok && in_time { "PASS" } else { "FAIL" }, detail.clone()),
            Err(e) => {
                broken = true;
                ("FAIL", format!("could not run: {e}"))
            }
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "{status} criterion {} {}: {detail} [{secs:.2}s, limit {}s]",
            line.id,
            line.title,
            line.limit.as_secs()
        );
    }
    println!(
        "acceptance: {}/{} criteria pass",
        lines.len() - failed,
        lines.len()
    );
    let strict = std::env::var("METAFIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if broken || (strict && failed > 0) {
        std::process::exit(1);
    }
}
