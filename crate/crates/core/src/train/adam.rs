use crate::tensor::{Element, Shape, Tensor};

use super::TrainError;

pub const DEFAULT_LR: f64 = 1e-3;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zero moments mirroring `shapes`.
    pub fn new(shapes: impl IntoIterator<Item = Shape>, lr: f64) -> Result<Self, TrainError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Ok(Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t: 0,
            v: m.clone(),
            m,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.m.len() == self.v.len()
            && self.m.iter().zip(&self.v).all(|(m, v)| m.shape() == v.shape());
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig("inconsistent optimizer state".into()))
        }
    }
}

fn mismatch(detail: String) -> TrainError {
    TrainError::ShapeMismatch(detail)
}

/// One bias-corrected Adam update. Shapes are checked for every parameter
/// before anything is modified; gradients are zeroed afterwards.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &mut [Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(mismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        let s = p.shape();
        if g.shape() != s || state.m[i].shape() != s || state.v[i].shape() != s {
            return Err(mismatch(format!("param {i}: {s} vs grad {}", g.shape())));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, pk) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k].to_f64();
            let mk = b1 * m[k].to_f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].to_f64() + (1.0 - b2) * gk * gk;
            m[k] = T::from_f64(mk);
            v[k] = T::from_f64(vk);
            let step = state.lr * (mk / c1) / ((vk / c2).sqrt() + state.eps);
            *pk = T::from_f64(pk.to_f64() - step);
            g[k] = T::zero();
        }
    }
    Ok(())
}
