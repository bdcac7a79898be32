use super::{backward, Graph, Mode};
use crate::autodiff::{Array, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamSet, ParamVars};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst coordinate-wise [`relative_error`] between two sets of the same layout.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let diff = a.zip_map(b, relative_error)?;
    Ok(diff
        .iter()
        .flat_map(|(_, v)| v.data().to_vec())
        .fold(0.0, f64::max))
}

fn evaluate<F>(f: &F, point: &ParamSet) -> Result<f64>
where
    F: Fn(&ParamVars) -> Result<Tensor>,
{
    let graph = Graph::new(Mode::HigherOrder);
    let value = f(&point.attach(&graph))?.item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "gradcheck: function value {value} is not finite"
        )));
    }
    Ok(value)
}

/// Central-difference gradient of `f` at `point`.
pub(crate) fn numeric_gradient<F>(f: &F, point: &ParamSet, step: f64) -> Result<ParamSet>
where
    F: Fn(&ParamVars) -> Result<Tensor>,
{
    let mut out = ParamSet::new();
    for (name, value) in point.iter() {
        let mut grad = Vec::with_capacity(value.numel());
        for i in 0..value.numel() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = value.to_vec();
                data[i] += delta;
                let mut p = point.clone();
                p.insert(name, Array::new(value.shape().to_vec(), data)?);
                evaluate(f, &p)
            };
            let plus = shifted(step)?;
            let minus = shifted(-step)?;
            grad.push((plus - minus) / (2.0 * step));
        }
        out.insert(name, Array::new(value.shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences with the given `step`, returning the worst relative error.
///
/// `f` is evaluated on a fresh higher-order graph each time, so it may itself
/// take gradients (e.g. an inner adaptation step).
pub fn gradcheck<F>(f: F, point: &ParamSet, step: f64) -> Result<f64>
where
    F: Fn(&ParamVars) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(Error::Usage(format!(
            "gradcheck step must be positive, got {step}"
        )));
    }
    let graph = Graph::new(Mode::HigherOrder);
    let vars = point.attach(&graph);
    let root = f(&vars)?;
    if !root.item()?.is_finite() {
        return Err(Error::Numeric(format!(
            "gradcheck: function value {} is not finite",
            root.item()?
        )));
    }
    let analytic = if root.requires_grad() {
        backward(&root, &vars)?.values()
    } else {
        point.map(|_| 0.0)
    };
    let numeric = numeric_gradient(&f, point, step)?;
    max_relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamSet {
        entries
            .iter()
            .map(|(n, s, d)| (n.to_string(), Array::new(s.clone(), d.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn quadratic_form_is_exact() {
        // x^T A x with a fixed symmetric A.
        let a = Tensor::from(
            Array::new(vec![3, 3], vec![2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.5]).unwrap(),
        );
        let p = point(&[("x", vec![3, 1], vec![0.7, -1.2, 0.4])]);
        let err = gradcheck(
            |v| {
                let x = v.require("x")?;
                x.transpose()?.matmul(&a.matmul(x)?)?.sum()
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = point(&[("x", vec![2], vec![1.0, 2.0])]);
        let err = gradcheck(|_| Ok(Tensor::scalar(4.0)), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let p = point(&[("x", vec![1], vec![1.0])]);
        assert!(matches!(
            gradcheck(|v| v.require("x")?.sum(), &p, 0.0),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            gradcheck(|v| v.require("x")?.scale(f64::INFINITY)?.sum(), &p, 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}
