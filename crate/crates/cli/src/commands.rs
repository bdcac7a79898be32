use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use metafit::checkpoint::Checkpoint;
use metafit::episodes::{
    augmentable, load_directory, synth_pools, write_tree, AugmentPolicy, Dataset, LoadOptions, Role,
};
use metafit::eval::{
    default_neighbors, finetune_baseline, knn_feature_baseline, meta_test, EvalProtocol, EvalReport, Method,
};
use metafit::gradsuite::{run_suite, run_suite_with_fault};
use metafit::nn::{ArchKind, ArchSpec};
use metafit::trainer::{pretrain, TrainEvent, TrainLogRecord, Trainer};
use metafit::Error;

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config_echo.toml";
pub const LOG_FILE: &str = "logs.jsonl";

pub fn write_echo(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.run.out_dir)
        .with_context(|| format!("creating {}", cfg.run.out_dir.display()))?;
    write_atomic(&cfg.run.out_dir.join(CONFIG_ECHO), cfg.to_toml().as_bytes())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub dim: usize,
    /// Sample count per class id.
    pub train: BTreeMap<String, usize>,
    pub test: BTreeMap<String, usize>,
}

fn class_counts(ds: &Dataset) -> BTreeMap<String, usize> {
    ds.classes()
        .iter()
        .map(|c| (c.id.clone(), c.samples.len()))
        .collect()
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.synth;
    let (train, test) = synth_pools(
        cfg.run.seed,
        s.n_train_classes,
        s.n_test_classes,
        s.samples_per_class,
        s.dim,
    )?;
    let root = &cfg.run.data_dir;
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    let ours = root.join(MANIFEST).exists();
    for dir in [&train_dir, &test_dir] {
        if !dir.exists() {
            continue;
        }
        if !ours {
            return Err(Error::Validation(format!(
                "{} exists and was not written by synth; refusing to overwrite",
                dir.display()
            ))
            .into());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let n = write_tree(&train, &train_dir)? + write_tree(&test, &test_dir)?;
    let manifest = Manifest {
        seed: cfg.run.seed,
        dim: s.dim,
        train: class_counts(&train),
        test: class_counts(&test),
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    write_atomic(&root.join(MANIFEST), text.as_bytes())?;
    println!(
        "synth: {} train classes, {} test classes, {n} files under {}",
        train.num_classes(),
        test.num_classes(),
        root.display()
    );
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str, role: Role) -> Result<Dataset> {
    let shape = &cfg.model.input_shape;
    let mut opts = LoadOptions {
        role,
        ..LoadOptions::default()
    };
    if cfg.model.arch == ArchKind::Conv4 {
        if let &[c, h, _] = shape.as_slice() {
            opts.channels = u8::try_from(c).map_err(|_| Error::Config(format!("{c} channels")))?;
            opts.image_size = u32::try_from(h).map_err(|_| Error::Config(format!("image side {h}")))?;
        }
    }
    let dir = cfg.run.data_dir.join(split);
    let ds = load_directory(&dir, &opts)?;
    if ds.sample_shape() != shape.as_slice() {
        return Err(Error::Validation(format!(
            "samples in {} have shape {:?} but model.input_shape is {:?}",
            dir.display(),
            ds.sample_shape(),
            shape
        ))
        .into());
    }
    Ok(ds)
}

fn log_line(cfg: &RunConfig, record: &TrainLogRecord) -> Result<String> {
    let record = if cfg.run.log_timing {
        record.clone()
    } else {
        record.without_timing()
    };
    Ok(serde_json::to_string(&record)? + "\n")
}

/// Drops log lines at or past `iteration`, including a torn final line.
fn truncate_log(path: &Path, iteration: usize) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())),
    };
    let kept: String = text
        .split_inclusive('\n')
        .filter(|line| line.ends_with('\n'))
        .filter(|line| serde_json::from_str::<TrainLogRecord>(line).is_ok_and(|r| r.iteration < iteration))
        .collect();
    write_atomic(path, kept.as_bytes())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.arch_spec();
    let data = load_split(cfg, "train", Role::MetaTrain)?;
    let ckpt_dir = cfg.checkpoint_dir();
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let final_path = ckpt_dir.join("final.ckpt");

    if matches!(cfg.run.method, Method::Finetune | Method::Knn) {
        let params = pretrain(&spec, &data, &cfg.pretrain_config())?;
        Checkpoint {
            arch: spec,
            params,
            optimizer: None,
            seed: cfg.run.seed,
            iteration: 0,
        }
        .save(&final_path)?;
        println!(
            "train: pretrained encoder ({} steps) saved to {}",
            cfg.eval.pretrain_steps,
            final_path.display()
        );
        return Ok(());
    }

    let schedule = cfg.train_schedule();
    let trainer = Trainer::new(&spec, &data, &cfg.meta, &schedule, &cfg.augment)?;
    let log_path = cfg.run.out_dir.join(LOG_FILE);
    let last_path = ckpt_dir.join("last.ckpt");
    let start = if cfg.run.resume && last_path.exists() {
        let state = Checkpoint::load(&last_path)?;
        truncate_log(&log_path, state.iteration as usize)?;
        println!("train: resuming at iteration {}", state.iteration);
        state
    } else {
        if cfg.run.resume {
            println!("train: no checkpoint to resume from; starting fresh");
        }
        write_atomic(&log_path, b"")?;
        trainer.init()?
    };
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;

    let mut io_error: Option<anyhow::Error> = None;
    let mut observe = |event: TrainEvent<'_>| -> metafit::Result<()> {
        let written = match event {
            TrainEvent::Iteration(record) => {
                log_line(cfg, record).and_then(|line| Ok(log.write_all(line.as_bytes())?))
            }
            TrainEvent::Checkpoint(state) => {
                let numbered = ckpt_dir.join(format!("iter_{:06}.ckpt", state.iteration));
                state.save(&numbered)?;
                state.save(&last_path)?;
                Ok(())
            }
            TrainEvent::Diverged {
                detail, last_good, ..
            } => {
                eprintln!("train: diverged at {detail}; state before it saved as last_good.ckpt");
                last_good.save(&ckpt_dir.join("last_good.ckpt"))?;
                Ok(())
            }
        };
        written.map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            Error::Validation(format!("writing training output: {msg}"))
        })
    };
    let result = trainer.run_to_end(start, &mut observe);
    if let Some(e) = io_error {
        return Err(e);
    }
    let state = result?;
    state.save(&final_path)?;
    println!(
        "train: {} iterations of {} complete, final checkpoint {}",
        state.iteration,
        cfg.run.method.name(),
        final_path.display()
    );
    Ok(())
}

fn evaluate(
    cfg: &RunConfig,
    spec: &ArchSpec,
    model: &Checkpoint,
    data: &Dataset,
    method: Method,
    policy: &AugmentPolicy,
    k: usize,
) -> Result<EvalReport> {
    let protocol = EvalProtocol {
        method,
        k,
        q: cfg.meta.q,
        runs: cfg.eval.runs,
        seed: cfg.run.seed,
    };
    let p = &model.params;
    Ok(match method {
        Method::Daml | Method::Maml => meta_test(spec, p, data, &cfg.meta, &protocol)?,
        Method::Finetune => {
            finetune_baseline(spec, p, data, &cfg.meta, cfg.eval.ft_steps, policy, &protocol)?
        }
        Method::Knn => {
            let n = cfg.eval.n_neighbors.unwrap_or_else(|| default_neighbors(k));
            knn_feature_baseline(spec, p, data, n, &protocol)?
        }
    })
}

fn load_model(cfg: &RunConfig, spec: &ArchSpec) -> Result<Checkpoint> {
    let path = cfg.model_checkpoint();
    let model = Checkpoint::load(&path).with_context(|| "run `metafit train` first or set --checkpoint")?;
    if model.arch != *spec {
        return Err(Error::Config(format!(
            "{} holds a {:?} model but [model] describes {:?}",
            path.display(),
            model.arch,
            spec
        ))
        .into());
    }
    Ok(model)
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(
        &dir.join(format!("{stem}.json")),
        (report.to_json() + "\n").as_bytes(),
    )?;
    write_atomic(&dir.join(format!("{stem}.csv")), report.to_csv().as_bytes())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.arch_spec();
    let data = load_split(cfg, "test", Role::MetaTest)?;
    let model = load_model(cfg, &spec)?;
    let method = cfg.run.method;
    let reports = cfg.reports_dir();
    let mut summary = String::from("method,k,runs,mean_auc,std_auc\n");
    for &k in &cfg.eval.k_sweep {
        let report = evaluate(cfg, &spec, &model, &data, method, &cfg.augment, k)?;
        write_report(&reports, &format!("{}_k{k}", method.name()), &report)?;
        println!(
            "eval: {} k={k} runs={} mean AUC {:.4} ± {:.4}",
            method.name(),
            report.aucs.len(),
            report.mean,
            report.std
        );
        summary += &format!(
            "{},{k},{},{},{}\n",
            method.name(),
            report.aucs.len(),
            report.mean,
            report.std
        );
    }
    write_atomic(
        &reports.join(format!("{}_summary.csv", method.name())),
        summary.as_bytes(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub eta: f64,
    pub augmentation: bool,
    pub k: usize,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Trains the difficulty-aware model once per (η, augmentation) cell and
/// meta-tests each at `meta.k`. Augmentation "on" is `[augment]`, or the
/// default policy if `[augment]` disables everything.
pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.arch_spec();
    let train_data = load_split(cfg, "train", Role::MetaTrain)?;
    let test_data = load_split(cfg, "test", Role::MetaTest)?;
    if !augmentable(train_data.sample_shape()) {
        eprintln!("ablate: samples are not images, so the augmentation on/off cells coincide");
    }
    let on = if cfg.augment.is_identity() {
        AugmentPolicy::default()
    } else {
        cfg.augment.clone()
    };
    let cells: Vec<(f64, bool)> = cfg
        .ablate
        .etas
        .iter()
        .flat_map(|&eta| [(eta, true), (eta, false)])
        .collect();
    let mut base = cfg.clone();
    base.run.method = Method::Daml;
    let schedule = base.train_schedule();
    let cell_dir = cfg.reports_dir().join("ablation");

    let reports: Vec<EvalReport> = cells
        .par_iter()
        .map(|&(eta, augmented)| -> Result<EvalReport> {
            let mut meta = cfg.meta.clone();
            meta.eta = eta;
            let policy = if augmented {
                on.clone()
            } else {
                AugmentPolicy::disabled()
            };
            let trainer = Trainer::new(&spec, &train_data, &meta, &schedule, &policy)?;
            let state = trainer.run_to_end(trainer.init()?, |_| Ok(()))?;
            let mut cell = base.clone();
            cell.meta = meta;
            evaluate(
                &cell,
                &spec,
                &state,
                &test_data,
                Method::Daml,
                &policy,
                cfg.meta.k,
            )
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cells.len());
    for (&(eta, augmentation), report) in cells.iter().zip(&reports) {
        let tag = if augmentation { "on" } else { "off" };
        write_report(&cell_dir, &format!("eta{eta}_aug{tag}"), report)?;
        println!(
            "ablate: eta={eta} aug={tag} mean AUC {:.4} ± {:.4}",
            report.mean, report.std
        );
        rows.push(AblationRow {
            eta,
            augmentation,
            k: report.protocol.k,
            runs: report.aucs.len(),
            mean: report.mean,
            std: report.std,
        });
    }
    let dir = cfg.reports_dir();
    let json = serde_json::to_string_pretty(&rows)? + "\n";
    write_atomic(&dir.join("ablation.json"), json.as_bytes())?;
    let mut csv = String::from("eta,augmentation,k,runs,mean_auc,std_auc\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.eta, r.augmentation, r.k, r.runs, r.mean, r.std
        );
    }
    write_atomic(&dir.join("ablation.csv"), csv.as_bytes())
}

/// Runs the autodiff self-check; `Ok(false)` means a check failed.
pub fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let suite = cfg.suite_config();
    let report = match &cfg.gradcheck.inject_fault {
        Some(op) => run_suite_with_fault(&suite, op)?,
        None => run_suite(&suite)?,
    };
    for c in &report.checks {
        println!(
            "{} {:<40} trials {:>4}  max error {:.3e}  tolerance {:.0e}",
            if c.passed() { "ok  " } else { "FAIL" },
            c.name,
            c.trials,
            c.max_error,
            c.tolerance
        );
    }
    println!("max relative gradient error: {:.3e}", report.max_gradient_error());
    let dir = cfg.reports_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(
        &dir.join("gradcheck.json"),
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    let failures: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
    if failures.is_empty() {
        println!("gradcheck: all {} checks pass", report.checks.len());
        Ok(true)
    } else {
        println!("gradcheck: FAILED: {}", failures.join(", "));
        Ok(false)
    }
}
