//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all checked coordinates of `|analytic - numeric| / max(|numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
}

pub const FD_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

/// Compares backward-pass gradients of `block` against central differences.
///
/// `block` receives a fresh graph bound to `store` plus one input variable per
/// entry of `input_shapes` and returns an output tensor of any shape. The
/// checked scalar is a fixed random projection of that output, so every
/// output coordinate contributes. Inputs are drawn from `N(0, 1)`-ish uniform
/// noise seeded by `seed`. The block must be deterministic; stochastic blocks
/// should seed their own generator identically on every call.
pub fn grad_check<F>(
    block: F,
    input_shapes: &[Vec<usize>],
    store: &ParamStore<f64>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = input_shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0)))
        .collect();

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], proj: Option<&[f64]>| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = block(&mut g, &vars)?;
        let value = g.value(out).data().to_vec();
        if let Some(i) = g.value(out).first_non_finite() {
            return Err(NumericsError::NonFinite(format!("block output[{i}]")));
        }
        let loss = proj.map_or(0.0, |p| value.iter().zip(p).map(|(a, b)| a * b).sum());
        Ok((loss, value))
    };

    let (_, probe) = eval(store, &inputs, None)?;
    let proj: Vec<f64> = (0..probe.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // Analytic pass.
    let mut g = Graph::new(store, false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = block(&mut g, &vars)?;
    let pv = g.constant(Tensor::new(g.shape(out), proj.clone())?);
    let prod = g.mul(out, pv)?;
    let loss = g.sum(prod);
    let pgrads = g.backward(loss)?;
    let input_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), coordinates: 0 };
    let mut record = |name: &str, analytic: f64, numeric: f64| -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(NumericsError::NonFinite(name.to_string()));
        }
        let err = (analytic - numeric).abs() / numeric.abs().max(DENOM_FLOOR);
        report.coordinates += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = name.to_string();
        }
        Ok(())
    };

    for (ii, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[ii].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[ii].data_mut()[j] -= FD_STEP;
            let fp = eval(store, &plus, Some(&proj))?.0;
            let fm = eval(store, &minus, Some(&proj))?.0;
            record(&format!("input{ii}[{j}]"), input_grads[ii][j], (fp - fm) / (2.0 * FD_STEP))?;
        }
    }

    let mut perturbed = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic = pgrads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
        for j in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[j];
            perturbed.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let fp = eval(&perturbed, &inputs, Some(&proj))?.0;
            perturbed.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let fm = eval(&perturbed, &inputs, Some(&proj))?.0;
            perturbed.get_mut(id).value.data_mut()[j] = orig;
            record(&format!("{name}[{j}]"), analytic[j], (fp - fm) / (2.0 * FD_STEP))?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_block_has_zero_error() {
        let store = ParamStore::new();
        let r = grad_check(|_, xs| Ok(xs[0]), &[vec![4, 3]], &store, 7).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 12);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let store = ParamStore::new();
        let err = grad_check(
            |g, xs| {
                let z = g.mul_scalar(xs[0], 0.0);
                Ok(g.log(z))
            },
            &[vec![2]],
            &store,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite(_)));
    }
}
