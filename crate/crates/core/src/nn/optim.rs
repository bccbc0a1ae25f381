//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use super::{Element, NnError, Tensor};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment estimates, aligned with a fixed parameter ordering.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over an aligned (params, grads) list. The decay term is
/// decoupled: `p ← p − lr·update − lr·wd·p`.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch {
            op: "adam_step",
            detail: format!(
                "params {} grads {} state {}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(NnError::ShapeMismatch {
                op: "adam_step",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        for i in 0..p.len() {
            let gi = g.data()[i].to_f64();
            let mi = cfg.beta1 * m.data()[i].to_f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i].to_f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = T::from_f64(mi);
            v.data_mut()[i] = T::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i].to_f64();
            let updated = pi - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * pi;
            p.data_mut()[i] = T::from_f64(updated);
        }
        if !p.all_finite() {
            return Err(NnError::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_start` at epoch 0 to `lr_end` at `total_epochs`:
/// `lr(e) = lr_end + ½(lr_start − lr_end)(1 + cos(π e / E))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
    if total_epochs == 0 {
        return lr_start;
    }
    let frac = epoch as f64 / total_epochs as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let e = 50;
        assert!((cosine_lr(0, e, 1e-3, 1e-5) - 1e-3).abs() < 1e-12);
        assert!((cosine_lr(e, e, 1e-3, 1e-5) - 1e-5).abs() < 1e-12);
        // Midpoint is the average.
        assert!((cosine_lr(25, 50, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut p = Tensor::<f64>::from_vec(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let before = p.clone();
        adam_step(&mut [&mut p], &[&g], &mut state, 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // f(x) = x² at x = 1: grad = 2.
        let mut x = Tensor::<f64>::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::<f64>::from_vec(&[1], vec![2.0]).unwrap();
        let mut state = AdamState::new(&[&x]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let lr = 0.1;
        adam_step(&mut [&mut x], &[&g], &mut state, lr, &cfg).unwrap();
        // m = 0.2, v = 0.004, m̂ = 2, v̂ = 4, step = lr·2/(2 + eps).
        let expect = 1.0 - lr * 2.0 / (2.0 + 1e-8);
        assert!((x.data()[0] - expect).abs() < 1e-15, "{} vs {expect}", x.data()[0]);
    }

    #[test]
    fn decoupled_decay_applies_even_with_zero_gradient() {
        let mut p = Tensor::<f64>::from_vec(&[1], vec![2.0]).unwrap();
        let g = Tensor::<f64>::zeros(&[1]);
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig::default();
        adam_step(&mut [&mut p], &[&g], &mut state, 1e-3, &cfg).unwrap();
        let expect = 2.0 - 1e-3 * 1e-5 * 2.0;
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }
}
