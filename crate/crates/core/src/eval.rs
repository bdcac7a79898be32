//! Meta-test protocol, the AUC statistic and the two baselines.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, Array, Graph, Mode, Tensor};
use crate::episodes::{augment_batch, sample_episode, AugmentPolicy, Dataset, Episode, Role};
use crate::error::{Error, Result};
use crate::metaloss::{adapt_params, task_loss, MetaConfig};
use crate::nn::{features, predict, ArchSpec};
use crate::optim::{meta_update, OptimizerKind, OptimizerState};
use crate::params::ParamSet;
use crate::rng::{derive_seed, stream_rng, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Daml,
    Maml,
    Finetune,
    Knn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Daml => "daml",
            Method::Maml => "maml",
            Method::Finetune => "finetune",
            Method::Knn => "knn",
        }
    }
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half.
///
/// Computed from midranks in doubled integer units, so the result equals
/// exhaustive pair counting exactly.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(v) = scores.iter().find(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("auc: score {v}")));
    }
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Usage(format!("auc: label {y} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of 2 × midrank (1-based).
    let mut rank2_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled_midrank = (i + 1 + j) as u64;
        let tied_pos = order[i..j].iter().filter(|&&t| labels[t] == 1.0).count() as u64;
        rank2_sum += doubled_midrank * tied_pos;
        i = j;
    }
    let u2 = rank2_sum - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// Protocol echo stored with every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub method: Method,
    pub k: usize,
    pub q: usize,
    pub runs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single run).
    pub std: f64,
    /// Support-set loss after fine-tuning, per run (fine-tuning only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_losses: Option<Vec<f64>>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn new(protocol: EvalProtocol, aucs: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&aucs);
        EvalReport {
            protocol,
            aucs,
            mean,
            std,
            support_losses: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Validation(format!("report json: {e}")))
    }

    /// One row per run: `run,auc[,support_loss]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,auc");
        if self.support_losses.is_some() {
            out.push_str(",support_loss");
        }
        out.push('\n');
        for (i, a) in self.aucs.iter().enumerate() {
            let _ = write!(out, "{i},{a:?}");
            if let Some(l) = &self.support_losses {
                let _ = write!(out, ",{:?}", l[i]);
            }
            out.push('\n');
        }
        out
    }
}

fn with_run(run: usize, e: Error) -> Error {
    match e {
        Error::Protocol(m) => Error::Protocol(format!("run {run}: {m}")),
        Error::Metric(m) => Error::Metric(format!("run {run}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("run {run}: {m}")),
        other => other,
    }
}

const EPISODE_PURPOSE: u64 = 0xE7A1;

/// Episode and rng for one evaluation run. Every method sees the same
/// episode for a given `(seed, run)`.
fn run_episode(dataset: &Dataset, protocol: &EvalProtocol, run: usize) -> Result<(Episode, StreamRng)> {
    let mut rng = stream_rng(derive_seed(protocol.seed, EPISODE_PURPOSE), run as u64);
    let ep = sample_episode(dataset, protocol.k, protocol.q, &mut rng)?;
    Ok((ep, rng))
}

fn check_protocol(dataset: &Dataset, protocol: &EvalProtocol) -> Result<()> {
    dataset.require_role(Role::MetaTest)?;
    if protocol.runs == 0 {
        return Err(Error::Usage("evaluation needs at least one run".into()));
    }
    dataset.validate_protocol(protocol.k, protocol.q)
}

fn run_all<T: Send>(runs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    (0..runs)
        .into_par_iter()
        .map(|r| f(r).map_err(|e| with_run(r, e)))
        .collect()
}

/// Adapt on each run's support set, score the query set with the adapted
/// model's class-1 probability, and report the AUC per run.
pub fn meta_test(
    spec: &ArchSpec,
    params: &ParamSet,
    dataset: &Dataset,
    config: &MetaConfig,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    check_protocol(dataset, protocol)?;
    let aucs = run_all(protocol.runs, |run| {
        let (ep, _) = run_episode(dataset, protocol, run)?;
        let adapted = adapt_params(spec, params, &ep.support, config)?;
        let scores = predict(spec, &adapted, &ep.query.inputs)?;
        auc(scores.data(), ep.query.labels.data())
    })?;
    Ok(EvalReport::new(protocol.clone(), aucs))
}

/// Plain supervised training on the support set: Adam with learning rate
/// `config.gamma` for `ft_steps` full-batch steps, fresh augmentation each
/// step for image data.
pub fn finetune_baseline(
    spec: &ArchSpec,
    init: &ParamSet,
    dataset: &Dataset,
    config: &MetaConfig,
    ft_steps: usize,
    policy: &AugmentPolicy,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    check_protocol(dataset, protocol)?;
    if ft_steps == 0 {
        return Err(Error::Usage("fine-tuning needs at least one step".into()));
    }
    policy.validate()?;
    let results = run_all(protocol.runs, |run| {
        let (ep, mut rng) = run_episode(dataset, protocol, run)?;
        let mut params = init.clone();
        let mut state = OptimizerState::new(OptimizerKind::Adam, &params);
        for step in 0..ft_steps {
            let batch = augment_batch(&ep.support, policy, &mut rng)?;
            let graph = Graph::new(Mode::FirstOrder);
            let vars = params.attach(&graph);
            let loss = task_loss(spec, &vars, &batch, config.reduction)?;
            if !loss.item()?.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite fine-tuning loss at step {step}"
                )));
            }
            let grads = backward(&loss, &vars)?.values();
            params = meta_update(&params, &grads, config.gamma, &mut state)?;
        }
        let final_loss = task_loss(spec, &params.constants(), &ep.support, config.reduction)?.item()?;
        let scores = predict(spec, &params, &ep.query.inputs)?;
        Ok((auc(scores.data(), ep.query.labels.data())?, final_loss))
    })?;
    let (aucs, losses): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    let mut report = EvalReport::new(protocol.clone(), aucs);
    report.support_losses = Some(losses);
    Ok(report)
}

/// `min(5, 2k − 1)`: odd and no larger than the support set.
pub fn default_neighbors(k: usize) -> usize {
    5.min(2 * k.max(1) - 1)
}

/// Fraction of labels equal to 1 among the `n` nearest support points
/// (squared Euclidean distance, ties broken by support index).
pub fn knn_scores(support: &Array, labels: &[f64], query: &Array, n: usize) -> Result<Vec<f64>> {
    let rows = |a: &Array| -> Result<(usize, usize)> {
        match a.shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Usage(format!("knn expects [N, D] features, got {s:?}"))),
        }
    };
    let (ns, d) = rows(support)?;
    let (nq, dq) = rows(query)?;
    if d != dq {
        return Err(Error::shape("knn", support.shape(), query.shape()));
    }
    if n == 0 || n > ns || labels.len() != ns {
        return Err(Error::Usage(format!(
            "knn: {n} neighbours over {ns} support points with {} labels",
            labels.len()
        )));
    }
    let (s, q) = (support.data(), query.data());
    Ok((0..nq)
        .map(|i| {
            let qi = &q[i * d..(i + 1) * d];
            let mut dist: Vec<(f64, usize)> = (0..ns)
                .map(|j| {
                    let sj = &s[j * d..(j + 1) * d];
                    (qi.iter().zip(sj).map(|(a, b)| (a - b) * (a - b)).sum(), j)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dist[..n].iter().map(|&(_, j)| labels[j]).sum::<f64>() / n as f64
        })
        .collect())
}

/// Nearest-neighbour scoring in the encoder's penultimate feature space.
pub fn knn_feature_baseline(
    spec: &ArchSpec,
    encoder: &ParamSet,
    dataset: &Dataset,
    n_neighbors: usize,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    check_protocol(dataset, protocol)?;
    if n_neighbors.is_multiple_of(2) || n_neighbors > 2 * protocol.k {
        return Err(Error::Usage(format!(
            "n_neighbors must be odd and at most 2k = {}, got {n_neighbors}",
            2 * protocol.k
        )));
    }
    let embed = |x: &Array| -> Result<Array> {
        Ok(features(spec, &encoder.constants(), &Tensor::from(x.clone()))?.into_value())
    };
    let aucs = run_all(protocol.runs, |run| {
        let (ep, _) = run_episode(dataset, protocol, run)?;
        let scores = knn_scores(
            &embed(&ep.support.inputs)?,
            ep.support.labels.data(),
            &embed(&ep.query.inputs)?,
            n_neighbors,
        )?;
        auc(&scores, ep.query.labels.data())
    })?;
    Ok(EvalReport::new(protocol.clone(), aucs))
}
