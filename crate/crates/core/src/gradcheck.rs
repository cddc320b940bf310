//! Central-difference gradient oracle.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `backward` gradients of the scalar built by `f` against central
/// differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` over every trainable
/// coordinate of `store`.
///
/// Leaves the analytic gradient in the store's accumulators and the
/// parameter values unchanged.
pub fn finite_diff_check<T, F>(store: &mut ParamStore<T>, h: T, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &ParamStore<T>) -> Result<Var<'g, T>>,
{
    store.zero_grads();
    {
        let graph = Graph::new();
        let root = f(&graph, store)?;
        let grads = graph.backward(root)?;
        grads.accumulate_into(store);
    }

    let eval = |store: &ParamStore<T>| -> Result<T> {
        let graph = Graph::new();
        Ok(f(&graph, store)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.value(id).numel() {
            let original = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = original + h;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = original - h;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteValue {
                    param: store.get(id).name.clone(),
                    index: i,
                });
            }
            let numeric = ((plus - minus) / (h + h)).as_f64();
            let analytic = store.grad(id).data()[i].as_f64();
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::from_f64s(&[3.0])).unwrap();
        let report = finite_diff_check(&mut store, 1e-5, |g, s| Ok(g.param(s, id).square().sum())).unwrap();
        assert_eq!(store.grad(id).data(), &[6.0]);
        assert!((report.numeric_at_worst - 6.0).abs() < 1e-8);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::from_f64s(&[1.0, -2.0])).unwrap();
        let report =
            finite_diff_check(&mut store, 1e-5, |g, s| Ok(g.param(s, id).scale(0.0).sum().add_scalar(4.0)))
                .unwrap();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
        assert_eq!(report.numeric_at_worst, 0.0);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_value_names_coordinate() {
        let mut store = ParamStore::<f64>::new();
        store.add("ok", Tensor::from_f64s(&[1.0])).unwrap();
        let id = store.add("x", Tensor::from_f64s(&[1.0, 0.0])).unwrap();
        // sqrt of a coordinate sitting at 0 goes NaN once perturbed down.
        let err = finite_diff_check(&mut store, 1e-5, |g, s| Ok(g.param(s, id).sqrt().sum())).unwrap_err();
        assert_eq!(
            err,
            Error::NonFiniteValue {
                param: "x".into(),
                index: 1
            }
        );
    }
}
