//! Global average pooling, fully-connected map and nearest 2x upsampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

/// Mean over each spatial plane; output is `N x C x 1 x 1`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = T::from_f64(1.0 / s.plane() as f64);
    let data = input
        .data()
        .chunks(s.plane())
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pooled length")
}

pub fn global_avg_pool_grad<T: Scalar>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != Shape::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(Error::config("pool gradient shape mismatch"));
    }
    let plane = input_shape.plane();
    let inv = T::from_f64(1.0 / plane as f64);
    let mut g = Tensor::zeros(input_shape);
    for (dst, &gv) in g.data_mut().chunks_mut(plane).zip(grad_out.data()) {
        dst.iter_mut().for_each(|v| *v = gv * inv);
    }
    Ok(g)
}

/// `out = x W^T + b` on the flattened `C*H*W` features of each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out_features x in_features`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init_uniform<R: Rng>(rng: &mut R, in_features: usize, out_features: usize) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        Self {
            in_features,
            out_features,
            weights: (0..in_features * out_features)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect(),
            bias: vec![T::ZERO; out_features],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().sample() != self.in_features {
            return Err(Error::config(format!(
                "linear layer expects {} features, got {}",
                self.in_features,
                input.shape().sample()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(input)?;
        let n = input.shape().n;
        let mut out = Tensor::zeros(Shape::new(n, self.out_features, 1, 1));
        for row in out.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias);
        }
        gemm(
            MatRef::new(input.data(), n, self.in_features),
            MatRef::t(&self.weights, self.out_features, self.in_features),
            T::ONE,
            out.data_mut(),
        );
        out.ensure_finite("linear")?;
        Ok(out)
    }

    /// Returns `(dL/dx, dL/dW, dL/db)`.
    pub fn backward(&self, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        self.check(input)?;
        let n = input.shape().n;
        if grad_out.shape() != Shape::new(n, self.out_features, 1, 1) {
            return Err(Error::config("linear gradient shape mismatch"));
        }
        let mut gx = Tensor::zeros(input.shape());
        gemm(
            MatRef::new(grad_out.data(), n, self.out_features),
            MatRef::new(&self.weights, self.out_features, self.in_features),
            T::ZERO,
            gx.data_mut(),
        );
        let mut gw = vec![T::ZERO; self.weights.len()];
        gemm(
            MatRef::t(grad_out.data(), n, self.out_features),
            MatRef::new(input.data(), n, self.in_features),
            T::ZERO,
            &mut gw,
        );
        let mut gb = vec![T::ZERO; self.out_features];
        for row in grad_out.data().chunks(self.out_features) {
            for (b, &g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        Ok((gx, gw, gb))
    }
}

/// Nearest-neighbour 2x upsampling: every pixel becomes a 2x2 block.
pub fn upsample_nearest2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let o = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(o);
    for (dst, src) in out
        .data_mut()
        .chunks_mut(o.plane())
        .zip(input.data().chunks(s.plane()))
    {
        for y in 0..o.h {
            let line = &src[(y / 2) * s.w..(y / 2 + 1) * s.w];
            for (x, v) in dst[y * o.w..(y + 1) * o.w].iter_mut().enumerate() {
                *v = line[x / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2x_grad<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let o = grad_out.shape();
    if o.h % 2 != 0 || o.w % 2 != 0 {
        return Err(Error::config("upsample gradient must have even extents"));
    }
    let s = Shape::new(o.n, o.c, o.h / 2, o.w / 2);
    let mut g = Tensor::zeros(s);
    for (dst, src) in g
        .data_mut()
        .chunks_mut(s.plane())
        .zip(grad_out.data().chunks(o.plane()))
    {
        for y in 0..o.h {
            for x in 0..o.w {
                dst[(y / 2) * s.w + x / 2] += src[y * o.w + x];
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_of_constant() {
        let x = Tensor::<f32>::full(Shape::new(2, 3, 4, 4), 2.5);
        let p = global_avg_pool(&x);
        assert_eq!(p.shape(), Shape::new(2, 3, 1, 1));
        assert!(p.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn upsample_single_pixel() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 1, 1), 7.0);
        let y = upsample_nearest2x(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[7.0; 4]);
    }

    #[test]
    fn upsample_grad_sums_blocks() {
        let g = Tensor::<f64>::from_fn(Shape::new(1, 1, 2, 4), |i| i as f64);
        let gi = upsample_nearest2x_grad(&g).unwrap();
        assert_eq!(gi.data(), &[0.0 + 1.0 + 4.0 + 5.0, 2.0 + 3.0 + 6.0 + 7.0]);
    }

    #[test]
    fn linear_forward_by_hand() {
        let lin = Linear {
            in_features: 2,
            out_features: 2,
            weights: vec![1.0f64, 2.0, 3.0, 4.0],
            bias: vec![0.5, -0.5],
        };
        let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 1.0]).unwrap();
        assert_eq!(lin.forward(&x).unwrap().data(), &[3.5, 6.5]);
        assert!(lin.forward(&Tensor::zeros(Shape::new(1, 3, 1, 1))).is_err());
    }
}
