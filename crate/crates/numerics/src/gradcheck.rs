//! Central-difference gradient verification.

use crate::error::{NumericsError, Result};
use crate::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Analytic and central-difference derivatives for each checked coordinate.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub pairs: Vec<(Real, Real)>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> Real {
        self.pairs
            .iter()
            .map(|&(a, n)| relative_error(a, n))
            .fold(0.0, Real::max)
    }

    /// Index of the coordinate with the largest relative error.
    pub fn worst(&self) -> Option<usize> {
        self.pairs
            .iter()
            .enumerate()
            .max_by(|x, y| relative_error(x.1 .0, x.1 .1).total_cmp(&relative_error(y.1 .0, y.1 .1)))
            .map(|(i, _)| i)
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.pairs.extend(other.pairs);
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Checks the gradient of a scalar function of one tensor input at `x`.
pub fn finite_diff_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, eps: Real) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    input_check(&mut store, x, eps, |t, _, v| f(t, v))
}

/// Like [`finite_diff_check`] for a function that also reads parameters.
/// Parameter gradients in `store` are cleared afterwards.
/// The closure may use any error type that numerics errors convert into.
pub fn input_check<E: From<NumericsError>>(
    store: &mut ParamStore,
    x: &Tensor,
    eps: Real,
    f: impl Fn(&mut Tape, &ParamStore, Var) -> std::result::Result<Var, E>,
) -> std::result::Result<GradCheck, E> {
    let coords: Vec<usize> = (0..x.len()).collect();
    input_check_at(store, x, &coords, eps, f)
}

/// [`input_check`] restricted to the listed flat coordinates of `x`.
pub fn input_check_at<E: From<NumericsError>>(
    store: &mut ParamStore,
    x: &Tensor,
    coords: &[usize],
    eps: Real,
    f: impl Fn(&mut Tape, &ParamStore, Var) -> std::result::Result<Var, E>,
) -> std::result::Result<GradCheck, E> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, store, xv)?;
    tape.backward(loss, store)?;
    store.zero_grad();
    let analytic = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |xp: Tensor| -> std::result::Result<Real, E> {
        let mut t = Tape::new();
        let v = t.leaf(xp, false);
        let l = f(&mut t, store, v)?;
        Ok(t.value(l).item())
    };
    let mut pairs = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        pairs.push((analytic.data()[i], numeric));
    }
    Ok(GradCheck { pairs })
}

/// Checks the gradient with respect to selected parameter coordinates.
/// Values are restored and gradients cleared afterwards.
pub fn param_check<E: From<NumericsError>>(
    store: &mut ParamStore,
    coords: &[(ParamId, usize)],
    eps: Real,
    f: impl Fn(&mut Tape, &ParamStore) -> std::result::Result<Var, E>,
) -> std::result::Result<GradCheck, E> {
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Real> = coords
        .iter()
        .map(|&(id, i)| store.grad(id).map_or(0.0, |g| g.data()[i]))
        .collect();
    store.zero_grad();
    drop(tape);

    let mut pairs = Vec::with_capacity(coords.len());
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = store.value(id).data()[i];
        let eval = |value: Real, store: &mut ParamStore| -> std::result::Result<Real, E> {
            store.value_mut(id).data_mut()[i] = value;
            let mut t = Tape::new();
            let l = f(&mut t, store)?;
            Ok(t.value(l).item())
        };
        let fp = eval(orig + eps, store)?;
        let fm = eval(orig - eps, store)?;
        store.value_mut(id).data_mut()[i] = orig;
        pairs.push((a, (fp - fm) / (2.0 * eps)));
    }
    Ok(GradCheck { pairs })
}
