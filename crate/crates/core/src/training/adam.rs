use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Real};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One bias-corrected Adam update of the blocks named in `blocks`.
///
/// Gradients are checked before anything is modified, so a non-finite
/// gradient leaves parameters and moments untouched.
pub fn adam_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &ParamSet<F>,
    state: &mut AdamState<F>,
    lr: f64,
    blocks: &[String],
) -> Result<()> {
    for name in blocks {
        let g = grads
            .try_get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for block {name}")))?;
        if g.shape() != params.get(name).shape() {
            return Err(Error::Shape(format!(
                "gradient of {name} is {:?}, parameter is {:?}",
                g.shape(),
                params.get(name).shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of block {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for name in blocks {
        let g = grads.get(name).as_slice();
        let m = state.m.get_mut(name).as_mut_slice();
        let v = state.v.get_mut(name).as_mut_slice();
        let p = params.get_mut(name).as_mut_slice();
        for i in 0..p.len() {
            let gi = g[i].f64();
            let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
            m[i] = F::of(mi);
            v[i] = F::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            p[i] = F::of(p[i].f64() - update);
        }
    }
    Ok(())
}
