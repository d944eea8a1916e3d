//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: BTreeMap<String, f64>,
}

/// Compares reverse-mode gradients of a scalar-valued graph against central
/// differences at step `eps`.
///
/// `build` receives the graph and one parameter handle per entry of
/// `inputs` and must return a single-element node. The relative error of a
/// parameter is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-7)`.
pub fn grad_check<F>(inputs: &[(&str, Tensor)], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::NonDifferentiablePoint(format!("non-finite output {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::dims("grad_check", "output must be a scalar"));
    }
    let grads = g.backward(out);

    let mut vals: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport::default();
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        for i in 0..vals[k].len() {
            let orig = vals[k].data()[i];
            vals[k].data_mut()[i] = orig + eps;
            let plus = eval(&vals)?;
            vals[k].data_mut()[i] = orig - eps;
            let minus = eval(&vals)?;
            vals[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            diff2 += (a - numeric).powi(2);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        let denom = an2.sqrt().max(nu2.sqrt()).max(1e-7);
        let rel = diff2.sqrt() / denom;
        report.max_rel_error = report.max_rel_error.max(rel);
        report.per_param.insert((*name).to_string(), rel);
    }
    Ok(report)
}

/// Contracts a node with a fixed pseudo-random tensor, giving a scalar whose
/// gradient exercises every output entry.
pub fn random_projection(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let dims = g.value(v).dims().to_vec();
    let r = g.constant(Tensor::from_fn(&dims, |_| rng.range(-1.0, 1.0)));
    let prod = g.mul(v, r)?;
    Ok(g.sum(prod))
}
