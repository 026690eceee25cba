use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Checks the gradients of a scalar function against central finite
/// differences with step `eps`.
///
/// `f` builds the function on a fresh graph from leaf handles for `inputs`;
/// it is called `1 + 2·(total input elements)` times.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), with_grad)).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).item().ok_or_else(|| {
            Error::invalid("grad_check", format!("function is not scalar: {:?}", g.shape(out)))
        })?;
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(out)?;
        let grads = vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
            })
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
