use serde::Serialize;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients of `op` at `inputs` with central finite
/// differences. Non-scalar outputs are reduced with a fixed weighting so
/// every output element contributes a distinct coefficient.
pub fn grad_check<F>(op: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.leaf(t.clone(), with_grad))
            .collect();
        let out = op(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        let value = g.value(loss).item();
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance,
        passed: true,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut data = input.data().to_vec();
            data[k] += FD_STEP;
            probe[i] = Tensor::from_parts(input.shape().to_vec(), data.clone());
            let (up, _) = eval(&probe, false)?;
            data[k] -= 2.0 * FD_STEP;
            probe[i] = Tensor::from_parts(input.shape().to_vec(), data);
            let (down, _) = eval(&probe, false)?;
            probe[i] = input.clone();

            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (i, k);
            }
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}

fn reduce(g: &mut Graph, out: Var) -> Result<Var> {
    let t = g.value(out);
    if t.len() == 1 {
        return Ok(out);
    }
    let weights: Vec<f64> = (0..t.len())
        .map(|k| 1.0 + 0.5 * (k as f64 * 1.7).sin())
        .collect();
    let w = g.constant(Tensor::from_parts(t.shape().to_vec(), weights));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// [`grad_check`] over the trainable parameters of `store`: the analytic
/// gradient is what [`ParamStore::accumulate_grads`] collects from one
/// backward pass of `loss`.
pub fn grad_check_params<F>(store: &ParamStore, loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, s)?;
        let l = reduce(&mut g, out)?;
        Ok(g.value(l).item())
    };

    let mut work = store.clone();
    work.zero_grad();
    {
        let mut g = Graph::new();
        let out = loss(&mut g, &work)?;
        let l = reduce(&mut g, out)?;
        g.backward(l)?;
        work.accumulate_grads(&g);
    }
    let ids: Vec<ParamId> = work.ids().filter(|&id| work.is_trainable(id)).collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| work.grad(id).to_vec()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance,
        passed: true,
    };
    for (i, &id) in ids.iter().enumerate() {
        let original = work.value(id).clone();
        for k in 0..original.len() {
            let mut data = original.data().to_vec();
            data[k] += FD_STEP;
            work.set(
                id,
                Tensor::from_parts(original.shape().to_vec(), data.clone()),
            )?;
            let up = eval(&work)?;
            data[k] -= 2.0 * FD_STEP;
            work.set(id, Tensor::from_parts(original.shape().to_vec(), data))?;
            let down = eval(&work)?;
            work.set(id, original.clone())?;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i][k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = (i, k);
            }
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}
