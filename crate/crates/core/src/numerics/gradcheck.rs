use serde::Serialize;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Comparison of analytic and central-difference gradients for one parameter.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub scalars: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub max_abs_err: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`, zero when both
    /// gradients agree exactly.
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

const NORM_FLOOR: f64 = 1e-10;

/// Compares `backward` against central differences for every scalar of
/// every parameter in `store`. `build` must produce the same scalar loss
/// for a given store; the store's values are restored before returning.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    eps: f64,
    tolerance: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    store.zero_grad();
    let (tape, loss) = build(store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    store.zero_grad();

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = store.get(id).value.len();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + eps;
            let plus = eval(&mut build, store)?;
            store.get_mut(id).value.data_mut()[k] = orig - eps;
            let minus = eval(&mut build, store)?;
            store.get_mut(id).value.data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let diff_norm = grad
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let max_abs_err = grad
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let analytic_norm = grad.l2_norm();
        let numeric_norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel_err = if diff_norm == 0.0 {
            0.0
        } else {
            diff_norm / analytic_norm.max(numeric_norm).max(NORM_FLOOR)
        };
        params.push(ParamCheck {
            name: store.get(id).name.clone(),
            scalars: n,
            analytic_norm,
            numeric_norm,
            max_abs_err,
            rel_err,
        });
    }
    let max_rel_err = params.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        tolerance,
        passed: max_rel_err < tolerance,
        max_rel_err,
        params,
    })
}

fn eval<F>(build: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    let (tape, loss) = build(store)?;
    Ok(tape.value(loss).item())
}
