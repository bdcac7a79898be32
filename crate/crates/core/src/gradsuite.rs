//! The autodiff self-test: every primitive, the composed model losses and the
//! second-order adaptation path checked against central finite differences,
//! plus analytic second derivatives, linearity, the clamp gate and replay
//! determinism.
//!
//! The suite is single-threaded so that a fault injected on the calling thread
//! (see `with_fault`, behind the `fault-injection` feature) reaches every check.

use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{backward, grad, gradcheck, relative_error, Array, Graph, Mode, Tensor};
use crate::episodes::Batch;
use crate::error::{Error, Result};
use crate::metaloss::{da_task_loss, inner_adapt, task_loss, Reduction};
use crate::nn::{init_params, ArchSpec};
use crate::params::{ParamSet, ParamVars};
use crate::rng::{derive_seed, stream_rng, StreamRng};

/// Finite-difference agreement required of first derivatives.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Agreement required of higher-order gradients with closed-form second derivatives.
pub const SECOND_ORDER_TOLERANCE: f64 = 1e-6;
/// Element-wise agreement required by the linearity check.
pub const LINEARITY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Random trials per primitive and per analytic second derivative.
    pub trials: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            trials: 100,
            seed: 0,
            step: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Primitive,
    Composite,
    SecondOrder,
    Invariant,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub kind: CheckKind,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    /// Worst finite-difference relative error over the primitive and composite checks.
    pub fn max_gradient_error(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| matches!(c.kind, CheckKind::Primitive | CheckKind::Composite))
            .map(|c| c.max_error)
            .fold(0.0, f64::max)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type Objective = Box<dyn Fn(&ParamVars) -> Result<Tensor>>;

/// One randomized instance: the point to differentiate at and a scalar function of it.
struct Case {
    point: ParamSet,
    f: Objective,
}

fn normal(rng: &mut StreamRng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_array(rng: &mut StreamRng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::from_parts(shape.to_vec(), (0..n).map(|_| normal(rng)).collect())
}

/// Values with magnitude in `[lo, hi]` and random sign, shifted by `center`.
fn away_from(rng: &mut StreamRng, shape: &[usize], center: f64, lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            center + if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Array::from_parts(shape.to_vec(), data)
}

fn uniform_array(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn dims(rng: &mut StreamRng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

fn set(entries: Vec<(&str, Array)>) -> ParamSet {
    entries.into_iter().map(|(n, a)| (n.to_string(), a)).collect()
}

/// Builds a case whose root is `sum(op(inputs) ⊙ w)` for a random `w`, so every
/// output element gets a distinct upstream gradient.
fn projected(
    rng: &mut StreamRng,
    point: ParamSet,
    out_shape: &[usize],
    op: impl Fn(&ParamVars) -> Result<Tensor> + 'static,
) -> Case {
    let w = Tensor::from(normal_array(rng, out_shape));
    Case {
        point,
        f: Box::new(move |v| op(v)?.mul(&w)?.sum()),
    }
}

fn binary_case(
    rng: &mut StreamRng,
    b_gen: impl Fn(&mut StreamRng, &[usize]) -> Array,
    op: fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> Case {
    let shape = dims(rng, 2, 4);
    let a = normal_array(rng, &shape);
    let b_shape = if rng.random_bool(0.25) {
        vec![]
    } else {
        shape.clone()
    };
    let b = b_gen(rng, &b_shape);
    projected(rng, set(vec![("a", a), ("b", b)]), &shape, move |v| {
        op(v.require("a")?, v.require("b")?)
    })
}

fn unary_case(
    rng: &mut StreamRng,
    x: Array,
    op: impl Fn(&Tensor) -> Result<Tensor> + 'static,
) -> Result<Case> {
    let out = op(&Tensor::from(x.clone()))?;
    let shape = out.shape().to_vec();
    Ok(projected(rng, set(vec![("x", x)]), &shape, move |v| {
        op(v.require("x")?)
    }))
}

fn primitive_case(name: &str, rng: &mut StreamRng) -> Result<Case> {
    let case = match name {
        "add" => binary_case(rng, normal_array, Tensor::add),
        "sub" => binary_case(rng, normal_array, Tensor::sub),
        "mul" => binary_case(rng, normal_array, Tensor::mul),
        "div" => binary_case(rng, |r, s| away_from(r, s, 0.0, 0.5, 2.0), Tensor::div),
        "scale" => {
            let c = normal(rng);
            let shape = dims(rng, 2, 4);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, move |t| t.scale(c))?
        }
        "shift" => {
            let c = normal(rng);
            let shape = dims(rng, 2, 4);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, move |t| t.shift(c))?
        }
        "matmul" => {
            let (m, k, n) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let a = normal_array(rng, &[m, k]);
            let b = normal_array(rng, &[k, n]);
            projected(rng, set(vec![("a", a), ("b", b)]), &[m, n], |v| {
                v.require("a")?.matmul(v.require("b")?)
            })
        }
        "transpose" => {
            let shape = dims(rng, 2, 4);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, Tensor::transpose)?
        }
        "relu" => {
            let shape = dims(rng, 2, 4);
            let x = away_from(rng, &shape, 0.0, 0.05, 1.0);
            unary_case(rng, x, Tensor::relu)?
        }
        "clamp_min" => {
            let c = normal(rng) * 0.5;
            let shape = dims(rng, 2, 4);
            let x = away_from(rng, &shape, c, 0.05, 1.0);
            unary_case(rng, x, move |t| t.clamp_min(c))?
        }
        "sigmoid" => {
            let shape = dims(rng, 2, 4);
            let x = normal_array(rng, &shape).map(|v| 2.0 * v);
            unary_case(rng, x, Tensor::sigmoid)?
        }
        "exp" => {
            let shape = dims(rng, 2, 4);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, Tensor::exp)?
        }
        "log" => {
            let shape = dims(rng, 2, 4);
            let x = uniform_array(rng, &shape, 0.2, 3.0);
            unary_case(rng, x, Tensor::log)?
        }
        "pow" => {
            let p = *[-1.5, -0.5, 0.5, 2.0, 2.7, 3.0].choose(rng).expect("non-empty");
            let shape = dims(rng, 2, 4);
            let x = uniform_array(rng, &shape, 0.3, 2.0);
            unary_case(rng, x, move |t| t.pow(p))?
        }
        "sum" => {
            let shape = dims(rng, 3, 3);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, Tensor::sum)?
        }
        "mean" => {
            let shape = dims(rng, 3, 3);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, Tensor::mean)?
        }
        "sum_axis" => {
            let shape = dims(rng, 3, 3);
            let axis = rng.random_range(0..3);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, move |t| t.sum_axis(axis))?
        }
        "broadcast_axis" => {
            let mut shape = dims(rng, 3, 3);
            let axis = rng.random_range(0..3);
            shape[axis] = 1;
            let n = rng.random_range(1..=4);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, move |t| t.broadcast_axis(axis, n))?
        }
        "reshape" => {
            let shape = dims(rng, 2, 4);
            let flat = [shape.iter().product::<usize>()];
            let x = normal_array(rng, &shape);
            unary_case(rng, x, move |t| t.reshape(&flat))?
        }
        "permute" => {
            let shape = dims(rng, 3, 3);
            let mut perm = vec![0, 1, 2];
            perm.shuffle(rng);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, move |t| t.permute(&perm))?
        }
        "gather" => {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(1..=10);
            let index: Arc<[usize]> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let x = normal_array(rng, &[n]);
            unary_case(rng, x, move |t| t.gather(index.clone(), &[m]))?
        }
        "scatter_add" => {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(1..=10);
            let index: Arc<[usize]> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let x = normal_array(rng, &[m]);
            unary_case(rng, x, move |t| t.scatter_add(index.clone(), &[n]))?
        }
        "softmax" => {
            let shape = dims(rng, 2, 4);
            let x = normal_array(rng, &shape);
            unary_case(rng, x, Tensor::softmax)?
        }
        "conv2d" => {
            let (n, c, o) = (
                rng.random_range(1..=2),
                rng.random_range(1..=2),
                rng.random_range(1..=2),
            );
            let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
            let x = normal_array(rng, &[n, c, h, w]);
            let k = normal_array(rng, &[o, c, 3, 3]);
            let b = normal_array(rng, &[o]);
            projected(rng, set(vec![("x", x), ("w", k), ("b", b)]), &[n, o, h, w], |v| {
                v.require("x")?.conv2d(v.require("w")?, v.require("b")?)
            })
        }
        "maxpool2d" => {
            let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=2));
            let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
            // Distinct values spaced well beyond the difference step, so no window ties.
            let mut values: Vec<f64> = (0..n * c * h * w).map(|i| 0.1 * i as f64).collect();
            values.shuffle(rng);
            let x = Array::from_parts(vec![n, c, h, w], values);
            unary_case(rng, x, Tensor::maxpool2d)?
        }
        "batchnorm2d" => {
            // At least four values per channel: with two, the normalized output
            // hardly depends on the input and the gradient is all rounding.
            let (n, c) = (rng.random_range(2..=3), rng.random_range(1..=2));
            let (h, w) = (rng.random_range(2..=3), rng.random_range(1..=3));
            let x = normal_array(rng, &[n, c, h, w]);
            let g = uniform_array(rng, &[c], 0.5, 1.5);
            let b = normal_array(rng, &[c]);
            projected(
                rng,
                set(vec![("x", x), ("scale", g), ("shift", b)]),
                &[n, c, h, w],
                |v| {
                    v.require("x")?
                        .batchnorm2d(v.require("scale")?, v.require("shift")?)
                },
            )
        }
        other => return Err(Error::Usage(format!("no gradient check for primitive `{other}`"))),
    };
    Ok(case)
}

/// Names of the primitives covered by the suite.
pub const PRIMITIVES: [&str; 26] = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "matmul",
    "transpose",
    "relu",
    "clamp_min",
    "sigmoid",
    "exp",
    "log",
    "pow",
    "sum",
    "mean",
    "sum_axis",
    "broadcast_axis",
    "reshape",
    "permute",
    "gather",
    "scatter_add",
    "softmax",
    "conv2d",
    "maxpool2d",
    "batchnorm2d",
];

fn balanced_batch(rng: &mut StreamRng, per_class: usize, sample_shape: &[usize]) -> Result<Batch> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for label in [1.0, 0.0] {
        for _ in 0..per_class {
            let shift = if label == 1.0 { 0.5 } else { -0.5 };
            inputs.push(normal_array(rng, sample_shape).map(|v| v + shift));
            labels.push(label);
        }
    }
    let refs: Vec<&Array> = inputs.iter().collect();
    Batch::from_samples(&refs, &labels)
}

/// Initial parameters with the biases moved off zero. Zero biases can put a
/// ReLU input exactly on its kink (a sample whose previous layer is all off),
/// where no derivative exists to check.
fn generic_params(spec: &ArchSpec, rng: &mut StreamRng) -> Result<ParamSet> {
    let init = init_params(spec, rng.random())?;
    let mut out = ParamSet::new();
    for (name, a) in init.iter() {
        let a = if name.ends_with("bias") {
            normal_array(rng, a.shape()).map(|v| 0.1 * v)
        } else {
            a.clone()
        };
        out.insert(name, a);
    }
    Ok(out)
}

fn mlp_cross_entropy_case(rng: &mut StreamRng) -> Result<Case> {
    let spec = ArchSpec::mlp(4, &[5, 3]);
    let point = generic_params(&spec, rng)?;
    let batch = balanced_batch(rng, 3, &[4])?;
    Ok(Case {
        point,
        f: Box::new(move |v| task_loss(&spec, v, &batch, Reduction::Mean)),
    })
}

fn conv_cross_entropy_case(rng: &mut StreamRng) -> Result<Case> {
    let spec = ArchSpec::conv4(1, 16, 2);
    let all = init_params(&spec, rng.random())?;
    let batch = balanced_batch(rng, 2, &[1, 16, 16])?;
    // Batchnorm subtracts the conv bias right back out, so its true gradient is
    // zero and a difference quotient measures only rounding. Hold it fixed.
    let (mut point, mut fixed) = (ParamSet::new(), ParamVars::new());
    for (name, a) in all.iter() {
        if name.ends_with("conv.bias") {
            fixed.insert(name, Tensor::from(a.clone()));
        } else {
            point.insert(name, a.clone());
        }
    }
    Ok(Case {
        point,
        f: Box::new(move |v| {
            let mut full = v.clone();
            for (name, t) in fixed.iter() {
                full.insert(name, t.clone());
            }
            task_loss(&spec, &full, &batch, Reduction::Mean)
        }),
    })
}

/// Draws [`generic_params`] until the loss on `batch` is below 0.9. A badly
/// saturated model computes `1 − p` with so few significant digits that a
/// difference quotient of the loss is meaningless.
fn unsaturated_params(spec: &ArchSpec, batch: &Batch, rng: &mut StreamRng) -> Result<ParamSet> {
    for _ in 0..100 {
        let p = generic_params(spec, rng)?;
        if task_loss(spec, &p.constants(), batch, Reduction::Mean)?.item()? < 0.9 {
            return Ok(p);
        }
    }
    Err(Error::Numeric(
        "no unsaturated starting point in 100 draws".into(),
    ))
}

/// Difficulty-aware loss of the query set after one second-order inner step.
fn da_through_adaptation_case(rng: &mut StreamRng) -> Result<Case> {
    let spec = ArchSpec::mlp(4, &[8]);
    let support = balanced_batch(rng, 3, &[4])?;
    let query = balanced_batch(rng, 4, &[4])?;
    let point = unsaturated_params(&spec, &query, rng)?;
    debug_assert!(point.num_elements() <= 200);
    let eta = *[1.0, 3.0, 5.0].choose(rng).expect("non-empty");
    Ok(Case {
        point,
        f: Box::new(move |v| {
            let adapted = inner_adapt(&spec, v, &support, 0.5, 1, true, Reduction::Mean)?;
            da_task_loss(&task_loss(&spec, &adapted, &query, Reduction::Mean)?, eta, 1e-6)
        }),
    })
}

/// Difficulty-aware loss with the adapted parameters as the differentiation point.
fn da_at_adapted_case(rng: &mut StreamRng) -> Result<Case> {
    let spec = ArchSpec::mlp(4, &[8]);
    let query = balanced_batch(rng, 4, &[4])?;
    let point = unsaturated_params(&spec, &query, rng)?;
    let eta = *[1.0, 3.0, 5.0].choose(rng).expect("non-empty");
    Ok(Case {
        point,
        f: Box::new(move |v| da_task_loss(&task_loss(&spec, v, &query, Reduction::Mean)?, eta, 1e-6)),
    })
}

fn run_gradchecks(
    name: &str,
    kind: CheckKind,
    trials: usize,
    cfg: &SuiteConfig,
    salt: u64,
    mut make: impl FnMut(&mut StreamRng) -> Result<Case>,
) -> Result<Check> {
    let seed = derive_seed(cfg.seed, salt);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = stream_rng(seed, t as u64);
        let case = make(&mut rng)?;
        let err = gradcheck(&case.f, &case.point, cfg.step)?;
        worst = if err.is_nan() {
            f64::INFINITY
        } else {
            worst.max(err)
        };
    }
    Ok(Check {
        name: name.to_string(),
        kind,
        trials,
        max_error: worst,
        tolerance: GRADIENT_TOLERANCE,
    })
}

struct Analytic {
    name: &'static str,
    f: fn(&Tensor) -> Result<Tensor>,
    second: fn(f64) -> f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const ANALYTIC: [Analytic; 6] = [
    Analytic {
        name: "x^2.5",
        f: |x| x.pow(2.5),
        second: |x| 2.5 * 1.5 * x.powf(0.5),
    },
    Analytic {
        name: "x*exp(x)",
        f: |x| x.mul(&x.exp()?),
        second: |x| (x + 2.0) * x.exp(),
    },
    Analytic {
        name: "log(x)^2",
        f: |x| {
            let l = x.log()?;
            l.mul(&l)
        },
        second: |x| 2.0 * (1.0 - x.ln()) / (x * x),
    },
    Analytic {
        name: "sigmoid(x)",
        f: Tensor::sigmoid,
        second: |x| {
            let s = sigmoid(x);
            s * (1.0 - s) * (1.0 - 2.0 * s)
        },
    },
    Analytic {
        name: "x*sigmoid(x)+x^-1",
        f: |x| x.mul(&x.sigmoid()?)?.add(&x.pow(-1.0)?),
        second: |x| {
            let s = sigmoid(x);
            let d1 = s * (1.0 - s);
            2.0 * d1 + x * d1 * (1.0 - 2.0 * s) + 2.0 / (x * x * x)
        },
    },
    Analytic {
        name: "exp(x)*log(x)+x",
        f: |x| x.exp()?.mul(&x.log()?)?.add(x),
        second: |x| x.exp() * (x.ln() + 2.0 / x - 1.0 / (x * x)),
    },
];

/// Differentiates twice on a higher-order graph and compares with closed forms.
fn second_order_check(cfg: &SuiteConfig) -> Result<Check> {
    let seed = derive_seed(cfg.seed, 0x5EC0);
    let mut worst = 0.0f64;
    for (i, case) in ANALYTIC.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        for _ in 0..cfg.trials {
            let x0: f64 = rng.random_range(0.3..2.5);
            let graph = Graph::new(Mode::HigherOrder);
            let x = graph.param(Array::scalar(x0));
            let y = (case.f)(&x)?;
            let dy = grad(&y, &[&x])?.remove(0);
            let d2 = grad(&dy, &[&x])?.remove(0).item()?;
            let err = relative_error(d2, (case.second)(x0));
            if err.is_nan() {
                return Err(Error::Numeric(format!(
                    "second derivative of {} is NaN",
                    case.name
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(Check {
        name: "second_derivatives".into(),
        kind: CheckKind::SecondOrder,
        trials: cfg.trials * ANALYTIC.len(),
        max_error: worst,
        tolerance: SECOND_ORDER_TOLERANCE,
    })
}

fn gradient_of(f: &dyn Fn(&ParamVars) -> Result<Tensor>, point: &ParamSet) -> Result<ParamSet> {
    let graph = Graph::new(Mode::FirstOrder);
    let vars = point.attach(&graph);
    Ok(backward(&f(&vars)?, &vars)?.values())
}

/// `∇(a·f + b·g) = a·∇f + b·∇g` for two task losses of one MLP.
fn linearity_check(cfg: &SuiteConfig) -> Result<Check> {
    let seed = derive_seed(cfg.seed, 0x11AE);
    let trials = 20;
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = stream_rng(seed, t);
        let spec = ArchSpec::mlp(4, &[6]);
        let point = generic_params(&spec, &mut rng)?;
        let (b1, b2) = (
            balanced_batch(&mut rng, 3, &[4])?,
            balanced_batch(&mut rng, 3, &[4])?,
        );
        let (a, b) = (normal(&mut rng), normal(&mut rng));
        let f = |v: &ParamVars| task_loss(&spec, v, &b1, Reduction::Mean);
        let g = |v: &ParamVars| task_loss(&spec, v, &b2, Reduction::Mean);
        let combined = |v: &ParamVars| f(v)?.scale(a)?.add(&g(v)?.scale(b)?);
        let lhs = gradient_of(&combined, &point)?;
        let rhs = gradient_of(&f, &point)?.zip_map(&gradient_of(&g, &point)?, |x, y| a * x + b * y)?;
        let diff = lhs.zip_map(&rhs, |x, y| (x - y).abs() / x.abs().max(y.abs()).max(1.0))?;
        for (_, d) in diff.iter() {
            worst = d.data().iter().copied().fold(worst, f64::max);
        }
    }
    Ok(Check {
        name: "linearity".into(),
        kind: CheckKind::Invariant,
        trials: trials as usize,
        max_error: worst,
        tolerance: LINEARITY_TOLERANCE,
    })
}

/// Gradient of `clamp_min(c)` is exactly 1 above `c` and exactly 0 below it.
fn clamp_gate_check(cfg: &SuiteConfig) -> Result<Check> {
    let mut rng = stream_rng(derive_seed(cfg.seed, 0xC1A7), 0);
    let mut worst = 0.0f64;
    for _ in 0..cfg.trials {
        let c = normal(&mut rng);
        let x = away_from(&mut rng, &[8], c, 0.01, 2.0);
        let graph = Graph::new(Mode::FirstOrder);
        let t = graph.param(x.clone());
        let g = grad(&t.clamp_min(c)?.sum()?, &[&t])?.remove(0);
        for (&xi, &gi) in x.data().iter().zip(g.value().data()) {
            let want = if xi > c { 1.0 } else { 0.0 };
            worst = worst.max((gi - want).abs());
        }
    }
    Ok(Check {
        name: "clamp_min_gate".into(),
        kind: CheckKind::Invariant,
        trials: cfg.trials,
        max_error: worst,
        tolerance: f64::MIN_POSITIVE,
    })
}

/// Two evaluations of the second-order objective give bit-identical values and gradients.
fn replay_check(cfg: &SuiteConfig) -> Result<Check> {
    let mut rng = stream_rng(derive_seed(cfg.seed, 0x4E91), 0);
    let case = da_through_adaptation_case(&mut rng)?;
    let run = || -> Result<(u64, ParamSet)> {
        let graph = Graph::new(Mode::HigherOrder);
        let vars = case.point.attach(&graph);
        let root = (case.f)(&vars)?;
        Ok((root.item()?.to_bits(), backward(&root, &vars)?.values()))
    };
    let (v1, g1) = run()?;
    let (v2, g2) = run()?;
    let identical = v1 == v2 && g1.bit_eq(&g2);
    Ok(Check {
        name: "replay_determinism".into(),
        kind: CheckKind::Invariant,
        trials: 1,
        max_error: if identical { 0.0 } else { 1.0 },
        tolerance: f64::MIN_POSITIVE,
    })
}

/// Runs every check and reports each one; failures are reported, not returned as errors.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("gradient check needs at least one trial".into()));
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {}",
            cfg.step
        )));
    }
    let mut checks = Vec::new();
    for (i, name) in PRIMITIVES.iter().enumerate() {
        checks.push(run_gradchecks(
            name,
            CheckKind::Primitive,
            cfg.trials,
            cfg,
            i as u64,
            |r| primitive_case(name, r),
        )?);
    }
    let composite_trials = cfg.trials.div_ceil(10);
    checks.push(run_gradchecks(
        "mlp_cross_entropy",
        CheckKind::Composite,
        composite_trials,
        cfg,
        0xC0_01,
        mlp_cross_entropy_case,
    )?);
    checks.push(run_gradchecks(
        "conv4_cross_entropy",
        CheckKind::Composite,
        1,
        cfg,
        0xC0_02,
        conv_cross_entropy_case,
    )?);
    checks.push(run_gradchecks(
        "difficulty_aware_at_adapted",
        CheckKind::Composite,
        composite_trials,
        cfg,
        0xC0_03,
        da_at_adapted_case,
    )?);
    checks.push(run_gradchecks(
        "difficulty_aware_through_adaptation",
        CheckKind::Composite,
        composite_trials,
        cfg,
        0xC0_04,
        da_through_adaptation_case,
    )?);
    checks.push(second_order_check(cfg)?);
    checks.push(linearity_check(cfg)?);
    checks.push(clamp_gate_check(cfg)?);
    checks.push(replay_check(cfg)?);
    Ok(SuiteReport { checks })
}

/// Whether this build can corrupt backward rules on demand.
pub const FAULT_INJECTION_AVAILABLE: bool = cfg!(any(test, feature = "fault-injection"));

/// [`run_suite`] with the backward rule of the named recorded op corrupted.
/// Fails with a usage error unless the build has the `fault-injection` feature.
pub fn run_suite_with_fault(cfg: &SuiteConfig, op: &str) -> Result<SuiteReport> {
    let kind =
        crate::autodiff::OpKind::from_name(op).ok_or_else(|| Error::Usage(format!("unknown op `{op}`")))?;
    #[cfg(any(test, feature = "fault-injection"))]
    {
        crate::autodiff::with_fault(kind, || run_suite(cfg))
    }
    #[cfg(not(any(test, feature = "fault-injection")))]
    {
        let _ = (cfg, kind);
        Err(Error::Usage(
            "fault injection is not compiled in (enable the `fault-injection` feature)".into(),
        ))
    }
}
