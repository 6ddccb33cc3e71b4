use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Worst relative error per parameter, in registry order.
    pub per_param: Vec<(String, f64)>,
    pub coords_checked: usize,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = f(&tape, store)?.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every parameter in `store`.
///
/// At most `max_coords` coordinates per parameter are probed, spread evenly
/// over the tensor. The relative error of a coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`. Existing gradients in `store` are
/// cleared.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, max_coords: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    store.zero_grad();
    {
        let tape = Tape::new();
        let loss = f(&tape, store)?;
        if !loss.item().is_finite() {
            return Err(Error::Evaluation(format!("objective evaluated to {}", loss.item())));
        }
        tape.backward(loss, store)?;
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::with_capacity(store.len()),
        coords_checked: 0,
    };
    for pid in 0..store.len() {
        let len = store.get(pid).value.len();
        let stride = len.div_ceil(max_coords.max(1)).max(1);
        let mut worst: f64 = 0.0;
        for i in (0..len).step_by(stride) {
            let analytic = store.get(pid).grad.data()[i];
            let orig = store.get(pid).value.data()[i];
            store.get_mut(pid).value.data_mut()[i] = orig + eps;
            let plus = evaluate(store, &f);
            store.get_mut(pid).value.data_mut()[i] = orig - eps;
            let minus = evaluate(store, &f);
            store.get_mut(pid).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
            report.coords_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.push((store.get(pid).name.clone(), worst));
    }
    Ok(report)
}
/// [`grad_check`] with every attention layer frozen at its unperturbed
/// budget, selection and gate value (see [`Tape::freeze_gates`]).
///
/// The gate factor `g/stop(g)` has no finite-difference counterpart, so
/// plain central differences miss the gate's contribution to every
/// parameter upstream of it, and a perturbation that reorders two logits
/// changes the top-k mask. Freezing turns the factor into `g(θ)/g(θ₀)` and
/// the mask into a constant; the result is smooth, and its derivative at
/// `θ₀` is the gradient backward reports.
pub fn grad_check_frozen<F>(store: &mut ParamStore, eps: f64, max_coords: usize, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let anchors = {
        let tape = Tape::new();
        f(&tape, store)?;
        tape.gate_log()
    };
    grad_check(store, eps, max_coords, |tape, st| {
        tape.freeze_gates(anchors.clone());
        f(tape, st)
    })
}

