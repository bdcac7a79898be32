//! The meta-training loop.
//!
//! Each iteration samples `tasks_per_batch` episodes, adapts on each support
//! set, evaluates the query losses, and applies one optimizer step to the
//! meta objective. Before `da_activation_iteration` the objective is the plain
//! sum of task losses; from then on it is the difficulty-aware sum.
//!
//! All randomness of iteration `i` comes from stream `i` of a generator keyed
//! by the master seed, so a run resumed from a checkpoint replays exactly the
//! iterations an uninterrupted run would have executed.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Array, Graph, Mode, Tensor};
use crate::checkpoint::Checkpoint;
use crate::episodes::{augment_batch, sample_episode, AugmentPolicy, Dataset, Episode, Role};
use crate::error::{Error, Result};
use crate::metaloss::{meta_gradient, MetaConfig, Objective};
use crate::nn::{forward, init_params, ArchSpec};
use crate::optim::{meta_update, OptimizerKind, OptimizerState};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream_rng};

const EPISODE_PURPOSE: u64 = 0x7A11;
const PRETRAIN_PURPOSE: u64 = 0x9E7A;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_iterations: usize,
    /// First iteration that uses the difficulty-aware objective; `None` never does.
    pub da_activation_iteration: Option<usize>,
    pub lr_decay_iterations: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Emit a checkpoint after every this many completed iterations (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_iterations: 3000,
            da_activation_iteration: Some(1500),
            lr_decay_iterations: vec![1500, 2500],
            lr_decay_factor: 0.1,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.da_activation_iteration {
            if a > self.total_iterations {
                return Err(Error::Config(format!(
                    "da_activation_iteration {a} exceeds total_iterations {}",
                    self.total_iterations
                )));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0, 1), got {}",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }

    pub fn objective_at(&self, iteration: usize) -> Objective {
        match self.da_activation_iteration {
            Some(a) if iteration >= a => Objective::DifficultyAware,
            _ => Objective::Sum,
        }
    }
}

/// `α0 · factor^(number of milestones <= iteration)`.
pub fn lr_at(iteration: usize, schedule: &TrainSchedule, alpha0: f64) -> f64 {
    let decays = schedule
        .lr_decay_iterations
        .iter()
        .filter(|&&m| m <= iteration)
        .count();
    (0..decays).fold(alpha0, |a, _| a * schedule.lr_decay_factor)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub task_losses: Vec<f64>,
    pub meta_loss: f64,
    /// `"sum"` or `"difficulty_aware"`.
    pub objective: String,
    pub alpha: f64,
    pub wall_ms: f64,
}

impl TrainLogRecord {
    /// The record without its timing field, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainLogRecord {
        TrainLogRecord {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

pub enum TrainEvent<'a> {
    Iteration(&'a TrainLogRecord),
    Checkpoint(&'a Checkpoint),
    /// A non-finite loss stopped training; `last_good` is the state before the failing iteration.
    Diverged {
        iteration: usize,
        detail: String,
        last_good: &'a Checkpoint,
    },
}

pub struct Trainer<'a> {
    pub spec: &'a ArchSpec,
    pub dataset: &'a Dataset,
    pub config: &'a MetaConfig,
    pub schedule: &'a TrainSchedule,
    /// Applied to support and query images during meta-training.
    pub augment: &'a AugmentPolicy,
}

impl<'a> Trainer<'a> {
    pub fn new(
        spec: &'a ArchSpec,
        dataset: &'a Dataset,
        config: &'a MetaConfig,
        schedule: &'a TrainSchedule,
        augment: &'a AugmentPolicy,
    ) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        schedule.validate()?;
        augment.validate()?;
        dataset.require_role(Role::MetaTrain)?;
        dataset.validate_protocol(config.k, config.q)?;
        if dataset.sample_shape() != spec.input_shape.as_slice() {
            return Err(Error::shape("train", dataset.sample_shape(), &spec.input_shape));
        }
        Ok(Trainer {
            spec,
            dataset,
            config,
            schedule,
            augment,
        })
    }

    /// State before the first iteration.
    pub fn init(&self) -> Result<Checkpoint> {
        self.start_from(init_params(self.spec, self.schedule.seed)?)
    }

    /// State before the first iteration, from given initial parameters.
    pub fn start_from(&self, params: ParamSet) -> Result<Checkpoint> {
        Ok(Checkpoint {
            arch: self.spec.clone(),
            optimizer: Some(OptimizerState::new(self.config.optimizer, &params)),
            params,
            seed: self.schedule.seed,
            iteration: 0,
        })
    }

    /// The episodes of iteration `iteration`, augmented per the policy.
    pub fn episodes(&self, iteration: usize) -> Result<Vec<Episode>> {
        let mut rng = stream_rng(derive_seed(self.schedule.seed, EPISODE_PURPOSE), iteration as u64);
        (0..self.config.tasks_per_batch)
            .map(|_| {
                let mut ep = sample_episode(self.dataset, self.config.k, self.config.q, &mut rng)?;
                ep.support = augment_batch(&ep.support, self.augment, &mut rng)?;
                ep.query = augment_batch(&ep.query, self.augment, &mut rng)?;
                Ok(ep)
            })
            .collect()
    }

    fn step(&self, state: &Checkpoint) -> Result<(Checkpoint, TrainLogRecord)> {
        let started = Instant::now();
        let iteration = state.iteration as usize;
        let episodes = self.episodes(iteration)?;
        let objective = self.schedule.objective_at(iteration);
        let meta = meta_gradient(self.spec, &state.params, &episodes, self.config, objective)?;
        if !meta.grads.is_finite() {
            return Err(Error::Numeric("non-finite meta-gradient".into()));
        }
        let alpha = lr_at(iteration, self.schedule, self.config.alpha);
        let mut optimizer = state
            .optimizer
            .clone()
            .unwrap_or_else(|| OptimizerState::new(self.config.optimizer, &state.params));
        let params = meta_update(&state.params, &meta.grads, alpha, &mut optimizer)?;
        if !params.is_finite() {
            return Err(Error::Numeric("non-finite parameters after meta update".into()));
        }
        let record = TrainLogRecord {
            iteration,
            task_losses: meta.task_losses(),
            meta_loss: meta.meta_loss,
            objective: match objective {
                Objective::Sum => "sum".into(),
                Objective::DifficultyAware => "difficulty_aware".into(),
            },
            alpha,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        let next = Checkpoint {
            arch: state.arch.clone(),
            params,
            optimizer: Some(optimizer),
            seed: state.seed,
            iteration: state.iteration + 1,
        };
        Ok((next, record))
    }

    /// Runs from `start` until `until` iterations are complete (capped at the
    /// schedule total). Checkpoints are emitted on the cadence and at the end.
    pub fn run(
        &self,
        start: Checkpoint,
        until: usize,
        mut observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
    ) -> Result<Checkpoint> {
        if start.seed != self.schedule.seed || start.arch != *self.spec {
            return Err(Error::Usage(
                "checkpoint seed or architecture does not match this run".into(),
            ));
        }
        let until = until.min(self.schedule.total_iterations);
        let mut state = start;
        while (state.iteration as usize) < until {
            let iteration = state.iteration as usize;
            let (next, record) = match self.step(&state) {
                Ok(v) => v,
                Err(Error::Numeric(detail)) => {
                    let detail = format!("iteration {iteration}: {detail}");
                    observer(TrainEvent::Diverged {
                        iteration,
                        detail: detail.clone(),
                        last_good: &state,
                    })?;
                    return Err(Error::Numeric(detail));
                }
                Err(e) => return Err(e),
            };
            state = next;
            observer(TrainEvent::Iteration(&record))?;
            let done = state.iteration as usize;
            let every = self.schedule.checkpoint_every;
            if every > 0 && done.is_multiple_of(every) && done < until {
                observer(TrainEvent::Checkpoint(&state))?;
            }
        }
        observer(TrainEvent::Checkpoint(&state))?;
        Ok(state)
    }

    /// Runs from `start` to the end of the schedule.
    pub fn run_to_end(
        &self,
        start: Checkpoint,
        observer: impl FnMut(TrainEvent<'_>) -> Result<()>,
    ) -> Result<Checkpoint> {
        self.run(start, self.schedule.total_iterations, observer)
    }
}

/// Settings for conventional supervised pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            lr: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Mean multi-class cross-entropy of `logits [N, C]` against class indices.
pub fn softmax_cross_entropy(logits: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let &[n, c] = logits.shape() else {
        return Err(Error::Usage(format!(
            "expected [N, C] logits, got {:?}",
            logits.shape()
        )));
    };
    if classes.len() != n || classes.iter().any(|&y| y >= c) {
        return Err(Error::Usage(format!(
            "{} class indices for {n} rows of {c} logits",
            classes.len()
        )));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in classes.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let onehot = Tensor::from(Array::new(vec![n, c], onehot)?);
    logits
        .softmax()?
        .mul(&onehot)?
        .sum_axis(1)?
        .clamp_min(crate::metaloss::PROB_CLAMP)?
        .log()?
        .mean()?
        .neg()
}

/// Trains the body of `spec` as an ordinary classifier over all classes of
/// `dataset` (a temporary head with one logit per class), then attaches a
/// freshly initialized binary head. The result initializes the fine-tuning
/// baseline and embeds samples for the nearest-neighbour baseline.
pub fn pretrain(spec: &ArchSpec, dataset: &Dataset, config: &PretrainConfig) -> Result<ParamSet> {
    let (_, params) = pretrain_classifier(spec, dataset, config)?;
    let head = init_params(spec, config.seed)?;
    Ok(params
        .iter()
        .filter(|(name, _)| !name.starts_with("head."))
        .chain(head.iter().filter(|(name, _)| name.starts_with("head.")))
        .map(|(n, a)| (n.to_string(), a.clone()))
        .collect())
}

/// The multi-class model behind [`pretrain`], with its widened spec.
pub fn pretrain_classifier(
    spec: &ArchSpec,
    dataset: &Dataset,
    config: &PretrainConfig,
) -> Result<(ArchSpec, ParamSet)> {
    let wide = spec.with_classes(dataset.num_classes());
    let mut params = init_params(&wide, config.seed)?;
    if config.steps > 0 && (config.batch_size == 0 || !(config.lr > 0.0)) {
        return Err(Error::Config(
            "pretraining needs batch_size >= 1 and lr > 0".into(),
        ));
    }
    let pool: Vec<(&Array, usize)> = dataset
        .classes()
        .iter()
        .enumerate()
        .flat_map(|(c, class)| class.samples.iter().map(move |s| (&s.data, c)))
        .collect();
    let mut state = OptimizerState::new(OptimizerKind::Adam, &params);
    for step in 0..config.steps {
        let mut rng = stream_rng(derive_seed(config.seed, PRETRAIN_PURPOSE), step as u64);
        let picks = rand::seq::index::sample(&mut rng, pool.len(), config.batch_size.min(pool.len()));
        let samples: Vec<&Array> = picks.iter().map(|i| pool[i].0).collect();
        let labels: Vec<usize> = picks.iter().map(|i| pool[i].1).collect();
        let batch = crate::episodes::Batch::from_samples(&samples, &vec![0.0; samples.len()])?;
        let graph = Graph::new(Mode::FirstOrder);
        let vars = params.attach(&graph);
        let logits = forward(&wide, &vars, &Tensor::from(batch.inputs))?;
        let loss = softmax_cross_entropy(&logits, &labels)?;
        if !loss.item()?.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite pretraining loss at step {step}"
            )));
        }
        let grads = backward(&loss, &vars)?.values();
        params = meta_update(&params, &grads, config.lr, &mut state)?;
    }
    Ok((wide, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::synth_pools;
    use crate::metaloss::da_task_loss_value;

    #[test]
    fn lr_schedule_examples() {
        let s = TrainSchedule::default();
        assert_eq!(lr_at(0, &s, 0.001), 0.001);
        assert_eq!(lr_at(1499, &s, 0.001), 0.001);
        assert!((lr_at(2000, &s, 0.001) - 0.0001).abs() < 1e-18);
        assert!((lr_at(3000, &s, 0.001) - 0.00001).abs() < 1e-18);
    }

    #[test]
    fn schedule_validation() {
        let bad = TrainSchedule {
            da_activation_iteration: Some(4000),
            ..TrainSchedule::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainSchedule {
            lr_decay_factor: 1.0,
            ..TrainSchedule::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    fn setup(total: usize) -> (ArchSpec, Dataset, MetaConfig, TrainSchedule) {
        let (train, _) = synth_pools(3, 5, 2, 25, 4).unwrap();
        let spec = ArchSpec::mlp(4, &[8]);
        let config = MetaConfig {
            k: 2,
            q: 3,
            inner_steps: 2,
            alpha: 0.01,
            ..MetaConfig::default()
        };
        let schedule = TrainSchedule {
            total_iterations: total,
            da_activation_iteration: Some(total / 2),
            lr_decay_iterations: vec![total * 3 / 4],
            checkpoint_every: 4,
            seed: 17,
            ..TrainSchedule::default()
        };
        (spec, train, config, schedule)
    }

    fn collect(
        trainer: &Trainer,
        start: Checkpoint,
        until: usize,
    ) -> (Checkpoint, Vec<TrainLogRecord>, Vec<u64>) {
        let mut logs = Vec::new();
        let mut cks = Vec::new();
        let end = trainer
            .run(start, until, |ev| {
                match ev {
                    TrainEvent::Iteration(r) => logs.push(r.clone()),
                    TrainEvent::Checkpoint(c) => cks.push(c.iteration),
                    TrainEvent::Diverged { .. } => {}
                }
                Ok(())
            })
            .unwrap();
        (end, logs, cks)
    }

    #[test]
    fn zero_iterations_returns_init() {
        let (spec, ds, cfg, sched) = setup(0);
        let policy = AugmentPolicy::disabled();
        let t = Trainer::new(&spec, &ds, &cfg, &sched, &policy).unwrap();
        let (end, logs, cks) = collect(&t, t.init().unwrap(), 0);
        assert!(end.params.bit_eq(&init_params(&spec, 17).unwrap()));
        assert!(logs.is_empty());
        assert_eq!(cks, [0]);
    }

    #[test]
    fn episodes_per_iteration_follow_config() {
        let (spec, ds, cfg, sched) = setup(4);
        let policy = AugmentPolicy::disabled();
        let t = Trainer::new(&spec, &ds, &cfg, &sched, &policy).unwrap();
        let eps = t.episodes(0).unwrap();
        assert_eq!(eps.len(), 4);
        assert!(eps.iter().all(|e| e.support.len() == 4 && e.query.len() == 6));
    }

    #[test]
    fn logs_objective_switch_and_cadence() {
        let (spec, ds, cfg, sched) = setup(10);
        let policy = AugmentPolicy::disabled();
        let t = Trainer::new(&spec, &ds, &cfg, &sched, &policy).unwrap();
        let (_, logs, cks) = collect(&t, t.init().unwrap(), 10);
        assert_eq!(logs.len(), 10);
        assert_eq!(cks, [4, 8, 10]);
        for r in &logs {
            assert_eq!(r.task_losses.len(), cfg.tasks_per_batch);
            let expected: f64 = if r.iteration < 5 {
                assert_eq!(r.objective, "sum");
                r.task_losses.iter().sum()
            } else {
                assert_eq!(r.objective, "difficulty_aware");
                r.task_losses
                    .iter()
                    .map(|&l| da_task_loss_value(l, cfg.eta, cfg.epsilon).unwrap())
                    .sum()
            };
            assert!((r.meta_loss - expected).abs() < 1e-9);
            assert_eq!(r.alpha, lr_at(r.iteration, &sched, cfg.alpha));
        }
    }

    #[test]
    fn deterministic_and_resumable() {
        let (spec, ds, cfg, sched) = setup(8);
        let policy = AugmentPolicy::disabled();
        let t = Trainer::new(&spec, &ds, &cfg, &sched, &policy).unwrap();
        let (a, la, _) = collect(&t, t.init().unwrap(), 8);
        let (b, lb, _) = collect(&t, t.init().unwrap(), 8);
        assert!(a.bit_eq(&b));
        let strip = |l: &[TrainLogRecord]| l.iter().map(|r| r.without_timing()).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));

        let (mid, _, _) = collect(&t, t.init().unwrap(), 3);
        let reloaded = Checkpoint::from_bytes(&mid.to_bytes(), std::path::Path::new("mem")).unwrap();
        let (resumed, lr, _) = collect(&t, reloaded, 8);
        assert!(resumed.bit_eq(&a));
        assert_eq!(strip(&lr), strip(&la[3..]));
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let (spec, ds, cfg, sched) = setup(2);
        let policy = AugmentPolicy::disabled();
        let t = Trainer::new(&spec, &ds, &cfg, &sched, &policy).unwrap();
        let mut start = t.init().unwrap();
        start.seed += 1;
        assert!(matches!(t.run(start, 2, |_| Ok(())), Err(Error::Usage(_))));
    }

    #[test]
    fn divergence_reports_last_good_state() {
        let (spec, ds, mut cfg, sched) = setup(3);
        cfg.gamma = 1e300;
        let policy = AugmentPolicy::disabled();
        let t = Trainer::new(&spec, &ds, &cfg, &sched, &policy).unwrap();
        let mut last_good = None;
        let err = t
            .run(t.init().unwrap(), 3, |ev| {
                if let TrainEvent::Diverged { last_good: c, .. } = ev {
                    last_good = Some(c.iteration);
                }
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert_eq!(last_good, Some(0));
    }

    #[test]
    fn wrong_role_is_rejected() {
        let (spec, ds, cfg, sched) = setup(2);
        let ds = ds.with_role(Role::MetaTest);
        let policy = AugmentPolicy::disabled();
        assert!(Trainer::new(&spec, &ds, &cfg, &sched, &policy).is_err());
    }

    #[test]
    fn softmax_cross_entropy_matches_direct_formula() {
        let logits = Tensor::from(Array::new(vec![2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap());
        let got = softmax_cross_entropy(&logits, &[1, 2]).unwrap().item().unwrap();
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let expected = 0.5 * ((lse(&[1.0, 2.0, 0.5]) - 2.0) + (lse(&[-1.0, 0.0, 3.0]) - 3.0));
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn pretraining_learns_the_training_classes() {
        let (ds, _) = synth_pools(5, 4, 2, 30, 4).unwrap();
        let spec = ArchSpec::mlp(4, &[16]);
        let cfg = PretrainConfig {
            steps: 200,
            ..PretrainConfig::default()
        };
        let samples: Vec<&Array> = ds
            .classes()
            .iter()
            .flat_map(|c| c.samples.iter().map(|s| &s.data))
            .collect();
        let labels: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 30)).collect();
        let inputs = crate::episodes::Batch::from_samples(&samples, &vec![0.0; samples.len()])
            .unwrap()
            .inputs;
        let (wide, trained) = pretrain_classifier(&spec, &ds, &cfg).unwrap();
        let loss_of = |p: &ParamSet| {
            let logits = forward(&wide, &p.constants(), &Tensor::from(inputs.clone())).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().item().unwrap()
        };
        let before = loss_of(&init_params(&wide, cfg.seed).unwrap());
        let after = loss_of(&trained);
        assert!(after < 0.5 * before, "{before} -> {after}");

        let binary = pretrain(&spec, &ds, &cfg).unwrap();
        assert!(binary.same_layout(&init_params(&spec, 0).unwrap()));
        assert!(binary
            .get("layer0.weight")
            .unwrap()
            .bit_eq(trained.get("layer0.weight").unwrap()));
    }
}
