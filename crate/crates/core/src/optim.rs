//! Outer-loop parameter updates: plain gradient descent and Adam.

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state owned by the training loop. For SGD the moment maps stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        let zeros = || params.map(|_| 0.0);
        match kind {
            OptimizerKind::Adam => OptimizerState {
                kind,
                step: 0,
                m: zeros(),
                v: zeros(),
            },
            OptimizerKind::Sgd => OptimizerState {
                kind,
                step: 0,
                m: ParamSet::new(),
                v: ParamSet::new(),
            },
        }
    }

    pub fn bit_eq(&self, other: &OptimizerState) -> bool {
        self.kind == other.kind
            && self.step == other.step
            && self.m.bit_eq(&other.m)
            && self.v.bit_eq(&other.v)
    }
}

/// One step `φ ← φ − α·update(g)`. Every parameter needs a gradient entry.
pub fn meta_update(
    params: &ParamSet,
    grads: &ParamSet,
    alpha: f64,
    state: &mut OptimizerState,
) -> Result<ParamSet> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Usage(format!("no meta-gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("meta_update", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let mut out = ParamSet::new();
    match state.kind {
        OptimizerKind::Sgd => {
            for (name, p) in params.iter() {
                let g = grads.get(name).expect("checked above");
                let next = if alpha == 0.0 {
                    p.clone()
                } else {
                    p.zip_map(g, |p, g| p - alpha * g)?
                };
                out.insert(name, next);
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let (mut m_next, mut v_next) = (ParamSet::new(), ParamSet::new());
            for (name, p) in params.iter() {
                let g = grads.get(name).expect("checked above");
                let zeros = || Array::zeros(p.shape());
                let m = state.m.get(name).cloned().unwrap_or_else(zeros);
                let v = state.v.get(name).cloned().unwrap_or_else(zeros);
                let m = m.zip_map(g, |m, g| ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g)?;
                let v = v.zip_map(g, |v, g| ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g)?;
                let next = if alpha == 0.0 {
                    p.clone()
                } else {
                    let data = p
                        .data()
                        .iter()
                        .zip(m.data().iter().zip(v.data()))
                        .map(|(p, (m, v))| p - alpha * (m / c1) / ((v / c2).sqrt() + ADAM_EPS))
                        .collect();
                    Array::new(p.shape().to_vec(), data)?
                };
                out.insert(name, next);
                m_next.insert(name, m);
                v_next.insert(name, v);
            }
            state.m = m_next;
            state.v = v_next;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        [("w".to_string(), Array::scalar(v))].into_iter().collect()
    }

    #[test]
    fn zero_rate_leaves_params() {
        let p = [("w".to_string(), Array::vector(vec![1.0, -0.0, 3.0]))]
            .into_iter()
            .collect::<ParamSet>();
        let g = p.map(|_| 5.0);
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut state = OptimizerState::new(kind, &p);
            assert!(meta_update(&p, &g, 0.0, &mut state).unwrap().bit_eq(&p));
        }
    }

    #[test]
    fn sgd_one_step() {
        let mut state = OptimizerState::new(OptimizerKind::Sgd, &scalar_set(1.0));
        let out = meta_update(&scalar_set(1.0), &scalar_set(2.0), 0.1, &mut state).unwrap();
        assert!((out.get("w").unwrap().item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_direct_recursion_and_moves_against_gradient() {
        let mut state = OptimizerState::new(OptimizerKind::Adam, &scalar_set(0.0));
        let mut p = scalar_set(0.0);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        let g = 0.3;
        for t in 1..=100 {
            let prev = p.get("w").unwrap().item().unwrap();
            p = meta_update(&p, &scalar_set(g), 0.01, &mut state).unwrap();
            let now = p.get("w").unwrap().item().unwrap();
            assert!(now < prev, "step {t}");
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((now - x).abs() < 1e-12);
        }
        assert_eq!(state.step, 100);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let p: ParamSet = [
            ("a".to_string(), Array::scalar(1.0)),
            ("b".to_string(), Array::scalar(1.0)),
        ]
        .into_iter()
        .collect();
        let mut state = OptimizerState::new(OptimizerKind::Adam, &p);
        match meta_update(&p, &scalar_set(1.0), 0.1, &mut state) {
            Err(Error::Usage(msg)) => assert!(msg.contains("`a`"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(state.step, 0);
    }
}
