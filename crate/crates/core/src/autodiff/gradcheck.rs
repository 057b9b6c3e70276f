use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::tensor::TensorError;

/// Compare analytic parameter gradients of `fragment` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`.
///
/// For each parameter tensor the error is `‖analytic − numeric‖ / max(1e-8, ‖numeric‖)`;
/// the maximum over parameters is returned. A store without parameters gives 0.
pub fn finite_diff_check<F>(store: &ParamStore, h: f64, fragment: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    if !(h > 0.0) {
        return Err(TensorError::Contract(format!("step must be positive, got {h}")));
    }
    if store.is_empty() {
        return Ok(0.0);
    }
    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new(true);
        let out = fragment(&mut tape, s)?;
        tape.value(out)
            .item()
            .ok_or_else(|| TensorError::Contract("fragment must return a scalar".into()))
    };

    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut tape = Tape::new(true);
    let out = fragment(&mut tape, &analytic)?;
    tape.backward(out, &mut analytic)?;

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let ids: Vec<String> = store.ids().map(str::to_string).collect();
    for id in &ids {
        let n = store.value(id)?.len();
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for j in 0..n {
            let orig = store.value(id)?.data()[j];
            probe.get_mut(id).expect("cloned store").value.data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(id).expect("cloned store").value.data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(id).expect("cloned store").value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.get(id).expect("cloned store").grad.data()[j];
            diff2 += (exact - numeric).powi(2);
            num2 += numeric * numeric;
        }
        worst = worst.max(diff2.sqrt() / num2.sqrt().max(1e-8));
    }
    Ok(worst)
}
