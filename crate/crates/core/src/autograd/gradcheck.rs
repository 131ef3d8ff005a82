use super::{Tape, Var};
use crate::error::Error;
use crate::tensor::Tensor;

/// Worst coordinate found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub coordinates: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("non-finite gradient at input {input}, index {index} (analytic {analytic}, numeric {numeric})")]
    NonFinite { input: usize, index: usize, analytic: f64, numeric: f64 },
    #[error(transparent)]
    Eval(#[from] Error),
}

/// Compares the tape's gradient of a scalar function against central
/// differences with step `h`, over every coordinate of every input.
///
/// `f` receives a fresh tape with one leaf per input (in order) and returns
/// the loss node. It is called `1 + 2 * coordinates` times.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("grad_check: step must be positive, got {h}")).into());
    }
    let mut eval = |values: &[Tensor<f64>]| -> crate::Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };

    let (tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().zip(inputs).map(|(&v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(x))).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_input: 0, worst_index: 0, coordinates: 0 };
    let mut probe = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let orig = x.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let (t, _, l) = eval(&probe)?;
            let up = t.value(l).item()?;
            probe[i].data_mut()[j] = orig - h;
            let (t, _, l) = eval(&probe)?;
            let down = t.value(l).item()?;
            probe[i].data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(GradCheckError::NonFinite { input: i, index: j, analytic: a, numeric });
            }
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_index = j;
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
