//! Central finite-difference checks of [`Graph::backward`].
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use crate::error::{DanError, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Location of the worst entry.
    pub worst: String,
}

/// Relative error floor; below this magnitude errors are measured absolutely.
const FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn scalar(g: &Var) -> Result<f64> {
    if g.value().len() != 1 {
        return Err(DanError::Shape(format!("loss must be scalar, got {:?}", g.shape())));
    }
    Ok(g.value().data()[0])
}

/// Compares the analytic gradient of `loss` against central differences for
/// every scalar of every parameter in `params`.
pub fn check_params<F>(params: &ParamStore, loss: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(&l)?.into_params()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut probe = params.clone();
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = scalar(&loss(&mut Graph::inference(&probe))?)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = scalar(&loss(&mut Graph::inference(&probe))?)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |t| t.data()[i]);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{}[{i}]: analytic {a:.6e} numeric {numeric:.6e}", params.name(id));
            }
        }
    }
    Ok(report)
}

/// Compares analytic gradients with respect to input leaves.
///
/// `loss` receives the leaves in the order given by `inputs`.
pub fn check_inputs<F>(params: &ParamStore, inputs: &[Tensor], loss: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor], record: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = if record { Graph::new(params) } else { Graph::inference(params) };
        let leaves: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let l = loss(&mut g, &leaves)?;
        let value = scalar(&l)?;
        if !record {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(&l)?;
        let per_leaf = leaves
            .iter()
            .map(|v| grads.leaf(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect();
        Ok((value, per_leaf))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("input {k}[{i}]: analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}
