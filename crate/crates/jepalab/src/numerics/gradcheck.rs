//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::params::{ParamNodes, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Builds the scalar loss for a given set of registered parameters. The
/// closure is re-invoked for every perturbed evaluation, so it must be a pure
/// function of the graph and parameter nodes.
pub trait LossFn: Sync {
    fn loss(&self, g: &mut Graph<f64>, params: &ParamNodes) -> Result<NodeId>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Graph<f64>, &ParamNodes) -> Result<NodeId> + Sync,
{
    fn loss(&self, g: &mut Graph<f64>, params: &ParamNodes) -> Result<NodeId> {
        self(g, params)
    }
}

/// Max over parameter tensors of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`
/// where `analytic`/`numeric` are the gradient vectors of one parameter,
/// `|.|` the L2 norm, and `numeric` comes from central differences of step
/// `eps` applied entry by entry. A parameter the loss cannot reach scores 0
/// (both vectors vanish).
///
/// `mode64` selects 64-bit arithmetic; the alternative path evaluates in f64
/// over f32-quantized parameter values for parity with training precision.
pub fn grad_check(
    model_fn: &dyn LossFn,
    params: &ParamStore,
    eps: f64,
    mode64: bool,
) -> Result<f64> {
    if mode64 {
        grad_check_f64(model_fn, params, eps)
    } else {
        let mut quantized = ParamStore::new();
        for p in params.iter() {
            quantized.add(p.name.clone(), p.value.clone()).expect("unique names");
        }
        grad_check_f64(model_fn, &quantized, eps)
    }
}

pub fn grad_check_f64(model_fn: &dyn LossFn, params: &ParamStore, eps: f64) -> Result<f64> {
    let mut values: Vec<(String, Tensor<f64>)> = params
        .iter()
        .map(|p| (p.name.clone(), p.value.to_f64()))
        .collect();

    // Analytic pass.
    let mut g = Graph::<f64>::recording();
    let nodes = ParamNodes::register_f64(&mut g, &values)?;
    let loss = model_fn.loss(&mut g, &nodes)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = values
        .iter()
        .map(|(name, t)| {
            let id = nodes.node(name).expect("registered");
            grads
                .get(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    // Numeric pass: perturb one entry at a time, forward-only graphs.
    let mut worst: f64 = 0.0;
    for pi in 0..values.len() {
        let numel = values[pi].1.numel();
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut n_sq = 0.0f64;
        for ei in 0..numel {
            let orig = values[pi].1.data()[ei];
            values[pi].1.data_mut()[ei] = orig + eps;
            let up = eval_loss(model_fn, &values)?;
            values[pi].1.data_mut()[ei] = orig - eps;
            let down = eval_loss(model_fn, &values)?;
            values[pi].1.data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][ei];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
        }
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(1e-12);
        worst = worst.max(diff_sq.sqrt() / denom);
    }
    Ok(worst)
}

fn eval_loss(model_fn: &dyn LossFn, values: &[(String, Tensor<f64>)]) -> Result<f64> {
    let mut g = Graph::<f64>::inference();
    let nodes = ParamNodes::register_f64(&mut g, values)?;
    let loss = model_fn.loss(&mut g, &nodes)?;
    Ok(g.scalar_value(loss))
}
