use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One momentum-SGD step, in place:
/// `v = momentum * v + grad + weight_decay * param; param -= lr * v`.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], cfg: SgdConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    let lr = T::from_f64(cfg.lr);
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = [1.0f32, -2.0];
        let mut v = [0.0f32; 2];
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &[0.0, 0.0], &mut v, cfg);
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn plain_descent_without_momentum() {
        let mut p = [1.0f64];
        let mut v = [0.0f64];
        let cfg = SgdConfig { lr: 0.25, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut p, &[2.0], &mut v, cfg);
        assert_eq!(p, [0.5]);
    }

    #[test]
    fn two_momentum_steps_on_square() {
        // f(w) = w^2, grad 2w; unrolled: v1 = 2 w0, w1 = w0 - lr v1,
        // v2 = 0.9 v1 + 2 w1, w2 = w1 - lr v2.
        let (w0, lr) = (1.0f64, 0.1f64);
        let v1 = 2.0 * w0;
        let w1 = w0 - lr * v1;
        let v2 = 0.9 * v1 + 2.0 * w1;
        let w2 = w1 - lr * v2;

        let mut p = [w0];
        let mut v = [0.0];
        let cfg = SgdConfig { lr, momentum: 0.9, weight_decay: 0.0 };
        for _ in 0..2 {
            let g = [2.0 * p[0]];
            sgd_step(&mut p, &g, &mut v, cfg);
        }
        assert!((p[0] - w2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
        assert!((w2 - 0.46).abs() < 1e-12);
    }
}
