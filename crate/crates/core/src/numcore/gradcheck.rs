use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::shape(format!("loss must be scalar, got {:?}", v.shape())));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(x)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every trainable parameter.
///
/// The store's values are restored on return; its gradient slots are left
/// holding the analytic gradient.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    store.zero_grad();
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        tape.backward(loss).accumulate_into(store);
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval_loss(store, &loss_fn);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval_loss(store, &loss_fn);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = store.grad(id).data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.entry(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::DenseArray;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("theta", DenseArray::from_vec(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap(), true)
            .unwrap();
        s
    }

    #[test]
    fn quadratic_loss_has_identity_gradient() {
        let mut s = quadratic_store();
        let id = s.id_of("theta").unwrap();
        let r = grad_check(&mut s, 1e-5, |t, st| {
            let th = t.param(st, id);
            let sq = t.mul(th, th);
            let sum = t.sum(sq);
            Ok(t.scale(sum, 0.5))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(s.grad(id).data(), s.value(id).data());
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut s = quadratic_store();
        let r = grad_check(&mut s, 1e-5, |t, _| Ok(t.constant(DenseArray::full(&[1], 3.0)))).unwrap();
        assert!(r.max_rel_error <= 1e-10);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = quadratic_store();
        let r = grad_check(&mut s, 1e-5, |t, _| Ok(t.constant(DenseArray::full(&[1], f64::NAN))));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = quadratic_store();
        let id = s.id_of("theta").unwrap();
        s.set_trainable(id, false);
        let r = grad_check(&mut s, 1e-5, |t, st| {
            let th = t.param(st, id);
            Ok(t.sum(th))
        })
        .unwrap();
        assert_eq!(r.checked, 0);
    }
}
