use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ClassPool, Dataset, Role, Sample};
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Class means have norm uniform in this range.
pub const MEAN_NORM_RANGE: (f64, f64) = (1.0, 3.0);
/// Per-axis standard deviations are uniform in this range.
pub const AXIS_SCALE_RANGE: (f64, f64) = (0.3, 1.0);
/// Means within one pool are redrawn until pairwise this far apart.
pub const MIN_MEAN_SEPARATION: f64 = 2.0;
const MAX_MEAN_DRAWS: usize = 10_000;

fn class_mean<R: Rng>(rng: &mut R, dim: usize, positive: bool) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let radius = rng.random_range(MEAN_NORM_RANGE.0..=MEAN_NORM_RANGE.1);
    for v in &mut dir {
        *v *= radius / norm;
    }
    dir[0] = if positive { dir[0].abs() } else { -dir[0].abs() };
    dir
}

fn pool<R: Rng>(
    rng: &mut R,
    prefix: &str,
    classes: usize,
    per_class: usize,
    dim: usize,
    positive: bool,
) -> Vec<ClassPool> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut draws = 0;
        let mean = loop {
            let m = class_mean(rng, dim, positive);
            draws += 1;
            let far = means.iter().all(|o| {
                o.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_MEAN_SEPARATION
            });
            if far || draws >= MAX_MEAN_DRAWS {
                break m;
            }
        };
        means.push(mean);
    }
    means
        .into_iter()
        .enumerate()
        .map(|(c, mean)| {
            let scale: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(AXIS_SCALE_RANGE.0..=AXIS_SCALE_RANGE.1))
                .collect();
            let id = format!("{prefix}{c:02}");
            let samples = (0..per_class)
                .map(|i| {
                    let data = (0..dim)
                        .map(|d| {
                            let z: f64 = StandardNormal.sample(rng);
                            // Stored at f32 precision so the on-disk export is lossless.
                            (mean[d] + scale[d] * z) as f32 as f64
                        })
                        .collect();
                    Sample {
                        data: Array::vector(data),
                        source: format!("{id}/{i:04}"),
                    }
                })
                .collect();
            ClassPool { id, samples }
        })
        .collect()
}

/// Gaussian class pools in `dim` dimensions. Meta-train class means lie in
/// the half-space `x0 >= 0`, meta-test means in `x0 <= 0`.
pub fn synth_pools(
    seed: u64,
    n_train_classes: usize,
    n_test_classes: usize,
    samples_per_class: usize,
    dim: usize,
) -> Result<(Dataset, Dataset)> {
    if dim < 2 {
        return Err(Error::Config(format!(
            "synthetic dim must be at least 2, got {dim}"
        )));
    }
    if n_train_classes == 0 || n_test_classes == 0 || samples_per_class == 0 {
        return Err(Error::Config(format!(
            "synthetic counts must be positive (train classes {n_train_classes}, \
             test classes {n_test_classes}, samples per class {samples_per_class})"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let train = pool(&mut rng, "train", n_train_classes, samples_per_class, dim, true);
    let test = pool(&mut rng, "test", n_test_classes, samples_per_class, dim, false);
    Ok((
        Dataset::new(Role::MetaTrain, train)?,
        Dataset::new(Role::MetaTest, test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::check_disjoint;

    /// Training AUC of a logistic regression fit by gradient descent.
    fn logistic_fit_auc(a: &ClassPool, b: &ClassPool) -> f64 {
        let xs: Vec<(&[f64], f64)> = a
            .samples
            .iter()
            .map(|s| (s.data.data(), 0.0))
            .chain(b.samples.iter().map(|s| (s.data.data(), 1.0)))
            .collect();
        let dim = xs[0].0.len();
        let (mut w, mut bias) = (vec![0.0; dim], 0.0);
        for _ in 0..2000 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, y) in &xs {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + bias;
                let r = 1.0 / (1.0 + (-z).exp()) - y;
                for d in 0..dim {
                    gw[d] += r * x[d];
                }
                gb += r;
            }
            let n = xs.len() as f64;
            for d in 0..dim {
                w[d] -= 0.5 * gw[d] / n;
            }
            bias -= 0.5 * gb / n;
        }
        let score = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (xp, yp) in &xs {
            for (xn, yn) in &xs {
                if *yp == 1.0 && *yn == 0.0 {
                    let (sp, sn) = (score(xp), score(xn));
                    wins += if sp > sn {
                        1.0
                    } else if sp == sn {
                        0.5
                    } else {
                        0.0
                    };
                    pairs += 1.0;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn counts_follow_arguments() {
        let (train, test) = synth_pools(1, 8, 3, 40, 2).unwrap();
        assert_eq!(train.num_classes(), 8);
        assert_eq!(test.num_classes(), 3);
        assert!(train
            .classes()
            .iter()
            .chain(test.classes())
            .all(|c| c.samples.len() == 40));
        assert_eq!(train.role(), Role::MetaTrain);
        assert_eq!(test.role(), Role::MetaTest);
        check_disjoint(&train, &test).unwrap();
    }

    #[test]
    fn deterministic_in_seed() {
        let (a, _) = synth_pools(9, 3, 2, 5, 4).unwrap();
        let (b, _) = synth_pools(9, 3, 2, 5, 4).unwrap();
        let (c, _) = synth_pools(10, 3, 2, 5, 4).unwrap();
        let flat = |d: &Dataset| -> Vec<u64> {
            d.classes()
                .iter()
                .flat_map(|c| {
                    c.samples
                        .iter()
                        .flat_map(|s| s.data.data().iter().map(|v| v.to_bits()))
                })
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn small_dim_and_zero_counts_are_config_errors() {
        assert!(matches!(synth_pools(1, 8, 3, 40, 1), Err(Error::Config(_))));
        assert!(matches!(synth_pools(1, 0, 3, 40, 4), Err(Error::Config(_))));
    }

    #[test]
    fn test_means_occupy_the_held_out_half_space() {
        let (train, test) = synth_pools(4, 8, 3, 200, 8).unwrap();
        let mean0 = |c: &ClassPool| c.samples.iter().map(|s| s.data.data()[0]).sum::<f64>() / 200.0;
        // Sample mean within ~4 standard errors of a non-negative / non-positive mean.
        assert!(train.classes().iter().all(|c| mean0(c) > -0.3));
        assert!(test.classes().iter().all(|c| mean0(c) < 0.3));
    }

    #[test]
    fn every_class_pair_is_linearly_separable() {
        for seed in 1..=20 {
            let (train, test) = synth_pools(seed, 8, 3, 40, 8).unwrap();
            for pools in [train.classes(), test.classes()] {
                for i in 0..pools.len() {
                    for j in i + 1..pools.len() {
                        let auc = logistic_fit_auc(&pools[i], &pools[j]);
                        assert!(
                            auc > 0.95,
                            "seed {seed}: {} vs {}: {auc}",
                            pools[i].id,
                            pools[j].id
                        );
                    }
                }
            }
        }
    }
}
