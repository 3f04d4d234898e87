//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{NumericError, ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(NumericError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(NumericError::InvalidArgument("adam betas must lie in [0,1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(NumericError::InvalidArgument("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let m: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update. `grads[i]` pairs with parameter id `i`; a `None`
/// gradient is treated as zero (moments still decay).
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), NumericError> {
    cfg.validate()?;
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NumericError::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::c(cfg.lr);
    let eps = T::c(cfg.eps);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let p = params.get_mut(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        match &grads[i] {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(NumericError::ShapeMismatch {
                        op: "adam",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g.data());
                for (((w, mi), vi), &gi) in it {
                    *mi = b1 * *mi + (T::one() - b1) * gi;
                    *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                    let mh = *mi / bc1;
                    let vh = *vi / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                }
            }
            None => {
                let it = p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut());
                for ((w, mi), vi) in it {
                    *mi = b1 * *mi;
                    *vi = b2 * *vi;
                    let mh = *mi / bc1;
                    let vh = *vi / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.to_f64_exact();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}
