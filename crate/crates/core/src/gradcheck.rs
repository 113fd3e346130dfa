//! Central finite-difference gradient checking in double precision.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients whose analytic and numeric magnitudes both stay below this are
/// at the noise floor of central differences with `step = 1e-5` on O(1)
/// outputs; such inputs (e.g. attention key biases, to which softmax is
/// invariant) are scored by absolute rather than relative error.
pub const ZERO_GRAD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Upper bound on checked coordinates per input tensor.
    pub max_coords: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Max over inputs of `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`
    /// (absolute error for inputs below [`ZERO_GRAD_FLOOR`]).
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Largest numeric gradient magnitude seen per input, in input order.
    pub numeric_scale: Vec<f64>,
}

/// Evenly spread coordinate indices, at most `max` of them.
fn coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    // odd stride visits a spread of positions without aliasing to one channel
    let mut stride = len / max;
    if stride.is_multiple_of(2) {
        stride += 1;
    }
    (0..max).map(|i| (i * stride + i / 3) % len).collect()
}

/// Compares reverse-mode gradients of the scalar built by `build` with
/// central finite differences, perturbing each of `inputs` in turn.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], opts: GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut scales = Vec::with_capacity(inputs.len());
    for (ti, &v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[ti].shape());
        let analytic = grads.get(v).unwrap_or(&zeros);
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for idx in coords(inputs[ti].len(), opts.max_coords) {
            let x0 = inputs[ti].data()[idx];
            work[ti].data_mut()[idx] = x0 + opts.step;
            let fp = eval(&work)?;
            work[ti].data_mut()[idx] = x0 - opts.step;
            let fm = eval(&work)?;
            work[ti].data_mut()[idx] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            max_err = max_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
            checked += 1;
        }
        scales.push(scale);
        let rel = if scale > ZERO_GRAD_FLOOR { max_err / scale } else { max_err };
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        name: name.into(),
        max_rel_err: max_rel,
        coords_checked: checked,
        numeric_scale: scales,
    })
}
