//! Class-pool datasets and the 2-way k-shot episode sampler.
//!
//! A [`Dataset`] maps class ids to pools of samples. An [`Episode`] picks two
//! classes at random, labels them 0 and 1 in draw order, and splits `k + q`
//! fresh samples per class into a support set (first `k`) and a query set.

mod augment;
mod load;
mod npt;
mod synth;

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub use augment::{augment, flip_horizontal, flip_vertical, rotate, scale_crop, AugmentPolicy};
pub use load::{load_directory, write_tree, LoadOptions};
pub use npt::{read_npt, write_npt, NPT_MAGIC};
pub use synth::synth_pools;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    MetaTrain,
    MetaTest,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub data: Array,
    /// Unique identifier of where the sample came from (e.g. `class/file`).
    pub source: String,
}

#[derive(Clone, Debug)]
pub struct ClassPool {
    pub id: String,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    role: Role,
    classes: Vec<ClassPool>,
    sample_shape: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset; classes are kept sorted by id.
    pub fn new(role: Role, mut classes: Vec<ClassPool>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Validation("dataset has no classes".into()));
        }
        classes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut ids = HashSet::new();
        let mut sources = HashSet::new();
        let mut sample_shape: Option<Vec<usize>> = None;
        for class in &classes {
            if !ids.insert(class.id.as_str()) {
                return Err(Error::Validation(format!("duplicate class id `{}`", class.id)));
            }
            if class.samples.is_empty() {
                return Err(Error::Validation(format!("class `{}` has 0 samples", class.id)));
            }
            for s in &class.samples {
                if !sources.insert(s.source.as_str()) {
                    return Err(Error::Validation(format!("duplicate source id `{}`", s.source)));
                }
                match &sample_shape {
                    None => sample_shape = Some(s.data.shape().to_vec()),
                    Some(shape) if shape != s.data.shape() => {
                        return Err(Error::Validation(format!(
                            "sample `{}` has shape {:?}, expected {:?}",
                            s.source,
                            s.data.shape(),
                            shape
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Dataset {
            role,
            classes,
            sample_shape: sample_shape.unwrap_or_default(),
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn classes(&self) -> &[ClassPool] {
        &self.classes
    }

    pub fn class_ids(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.id.as_str())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(|c| c.samples.len()).sum()
    }

    /// Checks that episodes with `k` support and `q` query samples per class can be drawn.
    pub fn validate_protocol(&self, k: usize, q: usize) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Protocol(format!(
                "need at least 2 classes, dataset has {}",
                self.classes.len()
            )));
        }
        if k == 0 || q == 0 {
            return Err(Error::Protocol(format!(
                "k and q must be positive (k={k}, q={q})"
            )));
        }
        for class in &self.classes {
            if class.samples.len() < k + q {
                return Err(Error::Protocol(format!(
                    "class `{}` has {} samples, episodes need k + q = {}",
                    class.id,
                    class.samples.len(),
                    k + q
                )));
            }
        }
        Ok(())
    }

    pub fn require_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Usage(format!(
                "expected a {role:?} dataset, got {:?}",
                self.role
            )));
        }
        Ok(())
    }
}

/// Rejects a meta-train/meta-test pair that shares a class id.
pub fn check_disjoint(train: &Dataset, test: &Dataset) -> Result<()> {
    let train_ids: HashSet<&str> = train.class_ids().collect();
    let shared: Vec<&str> = test.class_ids().filter(|id| train_ids.contains(id)).collect();
    if !shared.is_empty() {
        return Err(Error::Validation(format!(
            "meta-train and meta-test share classes {shared:?}"
        )));
    }
    Ok(())
}

/// Stacked inputs `[N, ...sample_shape]` with labels `[N]` in {0, 1}.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Array,
    pub labels: Array,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples(samples: &[&Array], labels: &[f64]) -> Result<Batch> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Usage("empty batch".into()))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(samples.len() * first.numel());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::shape("batch", first.shape(), s.shape()));
            }
            data.extend_from_slice(s.data());
        }
        Ok(Batch {
            inputs: Array::new(shape, data)?,
            labels: Array::vector(labels.to_vec()),
        })
    }

    /// The `i`-th sample of the batch.
    pub fn sample(&self, i: usize) -> Result<Array> {
        let per: usize = self.inputs.shape()[1..].iter().product();
        Array::new(
            self.inputs.shape()[1..].to_vec(),
            self.inputs.data()[i * per..(i + 1) * per].to_vec(),
        )
    }

    /// Applies `f` to every sample, keeping labels.
    pub fn map_samples(&self, mut f: impl FnMut(&Array) -> Result<Array>) -> Result<Batch> {
        let samples = (0..self.len())
            .map(|i| f(&self.sample(i)?))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Array> = samples.iter().collect();
        Batch::from_samples(&refs, self.labels.data())
    }
}

/// Augments every image of `batch` with `policy`. Batches of non-image
/// samples (anything but `C×H×W`) are returned unchanged.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Batch, policy: &AugmentPolicy, rng: &mut R) -> Result<Batch> {
    if policy.is_identity() || !augmentable(&batch.inputs.shape()[1..]) {
        return Ok(batch.clone());
    }
    batch.map_samples(|x| augment(x, policy, rng))
}

/// Whether samples of this shape are images the augmenter accepts.
pub fn augmentable(sample_shape: &[usize]) -> bool {
    sample_shape.len() == 3
}

/// One binary task.
#[derive(Clone, Debug)]
pub struct Episode {
    /// Original ids of the classes labeled 0 and 1.
    pub classes: [String; 2],
    pub support: Batch,
    pub query: Batch,
    pub support_sources: Vec<String>,
    pub query_sources: Vec<String>,
}

impl Episode {
    pub fn k(&self) -> usize {
        self.support.len() / 2
    }

    pub fn q(&self) -> usize {
        self.query.len() / 2
    }
}

/// Draws one episode: a uniformly random ordered pair of distinct classes,
/// then `k + q` distinct samples from each (first `k` to the support set).
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Episode> {
    dataset.validate_protocol(k, q)?;
    let pair = index::sample(rng, dataset.num_classes(), 2);
    let chosen = [&dataset.classes[pair.index(0)], &dataset.classes[pair.index(1)]];

    let mut support: Vec<&Sample> = Vec::with_capacity(2 * k);
    let mut query: Vec<&Sample> = Vec::with_capacity(2 * q);
    for class in chosen {
        let picks = index::sample(rng, class.samples.len(), k + q);
        for (j, i) in picks.iter().enumerate() {
            if j < k {
                support.push(&class.samples[i]);
            } else {
                query.push(&class.samples[i]);
            }
        }
    }
    let labels = |per: usize| -> Vec<f64> { (0..2 * per).map(|i| if i < per { 0.0 } else { 1.0 }).collect() };
    fn data<'a>(set: &[&'a Sample]) -> Vec<&'a Array> {
        set.iter().map(|s| &s.data).collect()
    }
    Ok(Episode {
        classes: [chosen[0].id.clone(), chosen[1].id.clone()],
        support: Batch::from_samples(&data(&support), &labels(k))?,
        query: Batch::from_samples(&data(&query), &labels(q))?,
        support_sources: support.iter().map(|s| s.source.clone()).collect(),
        query_sources: query.iter().map(|s| s.source.clone()).collect(),
    })
}
