//! Task loss, inner-loop adaptation and the difficulty-aware meta objective.
//!
//! For a task with query loss `L` after adaptation, the difficulty-aware
//! loss is
//!
//! ```text
//! DA(L) = L^η · (−log max(ε, 1 − L))
//! ```
//!
//! Easy tasks (small `L`) are suppressed by the `L^η` factor while hard tasks
//! keep a large weight. The meta objective of a batch is the sum of `DA(L_i)`.
//! When `1 − L <= ε` the log term is the constant `−log ε` and only `L^η`
//! carries gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, grad, Array, Graph, Mode, Tensor};
use crate::episodes::{Batch, Episode};
use crate::error::{Error, Result};
use crate::nn::{forward, positive_probability, ArchSpec};
use crate::optim::OptimizerKind;
use crate::params::{ParamSet, ParamVars};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the log.
pub const PROB_CLAMP: f64 = 1e-12;

/// How per-sample cross-entropy terms are combined into a task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Meta objective over a batch of task losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `Σ L_i`.
    Sum,
    /// `Σ DA(L_i)`.
    DifficultyAware,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Exponent on the task loss in the difficulty-aware objective.
    pub eta: f64,
    /// Floor inside `log max(ε, 1 − L)`.
    pub epsilon: f64,
    /// Inner-loop learning rate.
    pub gamma: f64,
    /// Meta learning rate.
    pub alpha: f64,
    pub inner_steps: usize,
    /// Support samples per class.
    pub k: usize,
    /// Query samples per class.
    pub q: usize,
    pub tasks_per_batch: usize,
    /// Differentiate through the inner gradient steps.
    pub second_order: bool,
    pub reduction: Reduction,
    pub optimizer: OptimizerKind,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            eta: 5.0,
            epsilon: 1e-6,
            gamma: 0.1,
            alpha: 0.001,
            inner_steps: 5,
            k: 5,
            q: 15,
            tasks_per_batch: 4,
            second_order: true,
            reduction: Reduction::Mean,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(&format!("eta must be finite and >= 0, got {}", self.eta));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(&format!("epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(&format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(&format!("alpha must be positive, got {}", self.alpha));
        }
        for (name, v) in [
            ("inner_steps", self.inner_steps),
            ("k", self.k),
            ("q", self.q),
            ("tasks_per_batch", self.tasks_per_batch),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of class-1 probabilities against 0/1 labels.
pub fn cross_entropy(probs: &Tensor, labels: &Array) -> Result<Tensor> {
    cross_entropy_with(probs, labels, Reduction::Mean)
}

pub fn cross_entropy_with(probs: &Tensor, labels: &Array, reduction: Reduction) -> Result<Tensor> {
    if probs.numel() != labels.numel() {
        return Err(Error::Usage(format!(
            "cross_entropy: {} probabilities but {} labels",
            probs.numel(),
            labels.numel()
        )));
    }
    let p = probs.reshape(&[probs.numel()])?;
    let y = Tensor::from(labels.reshape(&[labels.numel()])?);
    let not_y = Tensor::from(labels.map(|v| 1.0 - v).reshape(&[labels.numel()])?);
    let log_f = p.clamp_min(PROB_CLAMP)?.log()?;
    let log_not_f = p.neg()?.shift(1.0)?.clamp_min(PROB_CLAMP)?.log()?;
    let total = y.mul(&log_f)?.add(&not_y.mul(&log_not_f)?)?.sum()?.neg()?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => total.scale(1.0 / labels.numel() as f64),
    }
}

/// Cross-entropy of the model's class-1 probabilities on `batch`.
pub fn task_loss(spec: &ArchSpec, params: &ParamVars, batch: &Batch, reduction: Reduction) -> Result<Tensor> {
    let logits = forward(spec, params, &Tensor::from(batch.inputs.clone()))?;
    cross_entropy_with(&positive_probability(&logits)?, &batch.labels, reduction)
}

/// `steps` full-batch gradient steps `φ ← φ − γ ∇φ L_support`.
///
/// With `second_order` and a [`Mode::HigherOrder`] graph the result stays
/// differentiable through the gradients; otherwise the gradients enter as
/// constants and only the identity path back to `params` remains.
pub fn inner_adapt(
    spec: &ArchSpec,
    params: &ParamVars,
    support: &Batch,
    gamma: f64,
    steps: usize,
    second_order: bool,
    reduction: Reduction,
) -> Result<ParamVars> {
    if steps == 0 {
        return Err(Error::Usage("inner adaptation needs at least one step".into()));
    }
    if gamma == 0.0 {
        return Ok(params.clone());
    }
    let mut phi = params.clone();
    for step in 0..steps {
        let loss = task_loss(spec, &phi, support, reduction)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite support loss {value} at adaptation step {step}"
            )));
        }
        let grads = backward(&loss, &phi)?;
        let mut next = ParamVars::new();
        for (name, p) in phi.iter() {
            let g = grads.require(name)?;
            let g = if second_order { g.clone() } else { g.detach() };
            next.insert(name, p.sub(&g.scale(gamma)?)?);
        }
        phi = next;
    }
    Ok(phi)
}

/// Adapted parameter values for one support set (nothing is kept differentiable).
pub fn adapt_params(
    spec: &ArchSpec,
    params: &ParamSet,
    support: &Batch,
    config: &MetaConfig,
) -> Result<ParamSet> {
    let graph = Graph::new(Mode::FirstOrder);
    let vars = params.attach(&graph);
    let adapted = inner_adapt(
        spec,
        &vars,
        support,
        config.gamma,
        config.inner_steps,
        false,
        config.reduction,
    )?;
    Ok(adapted.values())
}

fn check_da_args(eta: f64, epsilon: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Usage(format!("eta must be finite and >= 0, got {eta}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Usage(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    Ok(())
}

/// `L^η · (−log max(ε, 1 − L))` for a scalar task loss.
pub fn da_task_loss(loss: &Tensor, eta: f64, epsilon: f64) -> Result<Tensor> {
    check_da_args(eta, epsilon)?;
    let l = loss.item()?;
    if l.is_nan() || l < 0.0 {
        return Err(Error::Usage(format!("task loss must be >= 0, got {l}")));
    }
    let weight = loss.pow(eta)?;
    let one_minus = loss.neg()?.shift(1.0)?;
    let log_term = if one_minus.item()? <= epsilon {
        Tensor::scalar(-epsilon.ln())
    } else {
        one_minus.log()?.neg()?
    };
    weight.mul(&log_term)
}

/// [`da_task_loss`] on a plain number.
pub fn da_task_loss_value(loss: f64, eta: f64, epsilon: f64) -> Result<f64> {
    da_task_loss(&Tensor::scalar(loss), eta, epsilon)?.item()
}

/// `d DA / d L` at `loss`.
pub fn da_task_loss_slope(loss: f64, eta: f64, epsilon: f64) -> Result<f64> {
    let graph = Graph::new(Mode::FirstOrder);
    let l = graph.param(Array::scalar(loss));
    let da = da_task_loss(&l, eta, epsilon)?;
    grad(&da, &[&l])?[0].item()
}

/// Ordered sum of [`da_task_loss`] over a batch.
pub fn da_meta_loss(losses: &[Tensor], eta: f64, epsilon: f64) -> Result<Tensor> {
    let mut terms = losses.iter().map(|l| da_task_loss(l, eta, epsilon));
    let first = terms
        .next()
        .ok_or_else(|| Error::Usage("difficulty-aware meta loss of an empty batch".into()))??;
    terms.try_fold(first, |acc, t| acc.add(&t?))
}

/// Ordered sum of task losses.
pub fn sum_meta_loss(losses: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = losses
        .split_first()
        .ok_or_else(|| Error::Usage("meta loss of an empty batch".into()))?;
    rest.iter().try_fold(first.clone(), |acc, t| acc.add(t))
}

pub fn meta_loss(losses: &[Tensor], objective: Objective, config: &MetaConfig) -> Result<Tensor> {
    match objective {
        Objective::Sum => sum_meta_loss(losses),
        Objective::DifficultyAware => da_meta_loss(losses, config.eta, config.epsilon),
    }
}

/// Query loss of one task after adapting `params` on its support set.
pub fn adapted_query_loss(
    spec: &ArchSpec,
    params: &ParamVars,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<(Tensor, ParamVars)> {
    let adapted = inner_adapt(
        spec,
        params,
        &episode.support,
        config.gamma,
        config.inner_steps,
        config.second_order,
        config.reduction,
    )?;
    let loss = task_loss(spec, &adapted, &episode.query, config.reduction)?;
    Ok((loss, adapted))
}

/// The full meta objective of a batch on one graph (used for gradient checks).
pub fn meta_objective(
    spec: &ArchSpec,
    params: &ParamVars,
    episodes: &[Episode],
    config: &MetaConfig,
    objective: Objective,
) -> Result<Tensor> {
    let losses = episodes
        .iter()
        .map(|ep| adapted_query_loss(spec, params, ep, config).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    meta_loss(&losses, objective, config)
}

/// Per-task result of one meta-training step.
#[derive(Clone, Debug)]
pub struct TaskOutcome {
    /// Query loss after adaptation.
    pub task_loss: f64,
    /// `DA(task_loss)`.
    pub da_loss: f64,
    pub adapted: ParamSet,
}

#[derive(Clone, Debug)]
pub struct MetaStep {
    pub outcomes: Vec<TaskOutcome>,
    pub meta_loss: f64,
    /// Gradient of the meta objective with respect to the initial parameters.
    pub grads: ParamSet,
}

impl MetaStep {
    pub fn task_losses(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.task_loss).collect()
    }
}

fn task_gradient(
    spec: &ArchSpec,
    params: &ParamSet,
    episode: &Episode,
    config: &MetaConfig,
) -> Result<(f64, ParamSet, ParamSet)> {
    let mode = if config.second_order {
        Mode::HigherOrder
    } else {
        Mode::FirstOrder
    };
    let graph = Graph::new(mode);
    let vars = params.attach(&graph);
    let (loss, adapted) = adapted_query_loss(spec, &vars, episode, config)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite query loss {value}")));
    }
    let grads = backward(&loss, &vars)?;
    Ok((value, grads.values(), adapted.values()))
}

/// Meta-gradient of a batch of tasks.
///
/// Each task is differentiated on its own graph (tasks run in parallel).
/// The objective is a sum of per-task terms `h(L_i)`, so the batch gradient
/// is `Σ h'(L_i) ∇L_i`, reduced in task order.
pub fn meta_gradient(
    spec: &ArchSpec,
    params: &ParamSet,
    episodes: &[Episode],
    config: &MetaConfig,
    objective: Objective,
) -> Result<MetaStep> {
    if episodes.is_empty() {
        return Err(Error::Usage("meta-gradient of an empty batch".into()));
    }
    let per_task = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            task_gradient(spec, params, ep, config).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("task {i}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outcomes = Vec::with_capacity(per_task.len());
    let mut meta_loss = 0.0;
    let mut total: Option<ParamSet> = None;
    for (loss, g, adapted) in per_task {
        let da_loss = da_task_loss_value(loss, config.eta, config.epsilon)?;
        let (term, slope) = match objective {
            Objective::Sum => (loss, 1.0),
            Objective::DifficultyAware => (da_loss, da_task_loss_slope(loss, config.eta, config.epsilon)?),
        };
        meta_loss += term;
        total = Some(match total {
            None => g.map(|v| slope * v),
            Some(acc) => acc.zip_map(&g, |a, v| a + slope * v)?,
        });
        outcomes.push(TaskOutcome {
            task_loss: loss,
            da_loss,
            adapted,
        });
    }
    if !meta_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite meta loss {meta_loss}")));
    }
    Ok(MetaStep {
        outcomes,
        meta_loss,
        grads: total.expect("non-empty batch"),
    })
}
