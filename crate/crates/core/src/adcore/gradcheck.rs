//! Central finite-difference checks of reverse-mode gradients.

use super::{AdError, ParamStore, Tape, Tensor, Var};

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all checked scalars.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `eps`, for every element of every parameter in
/// `store`. Parameter gradients in `store` are left as they were.
pub fn finite_difference_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<GradCheck, AdError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, AdError>,
{
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(AdError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let saved: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();

    let base = {
        let tape = Tape::new();
        let root = f(&tape, store)?;
        let value = root.value().item();
        tape.backward(root, store)?;
        value
    };
    if evaluate(&f, store)?.to_bits() != base.to_bits() {
        return Err(AdError::NonDeterministic);
    }

    let analytic: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        for e in 0..store.get(id).value.numel() {
            let original = store.get(id).value.data()[e];
            store.get_mut(id).value.data_mut()[e] = original + eps;
            let plus = evaluate(&f, store);
            store.get_mut(id).value.data_mut()[e] = original - eps;
            let minus = evaluate(&f, store);
            store.get_mut(id).value.data_mut()[e] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = (analytic[pi].data()[e] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.get(id).name.clone(), e));
            }
        }
    }

    for (p, g) in store.iter_mut().zip(saved) {
        p.grad = g;
    }
    Ok(report)
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64, AdError>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, AdError>,
{
    let tape = Tape::new();
    let root = f(&tape, store)?;
    let value = root.value().item();
    Ok(value)
}
