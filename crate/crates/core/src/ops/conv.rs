//! 2-D convolution (no bias) via per-sample im2col and GEMM.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<T>,
    /// Set by zero ablation; implies every weight is exactly zero.
    pub zeroed: bool,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
        weights: Vec<T>,
    ) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::config(format!("kernel size {k} not in {{1, 3}}")));
        }
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        let kernel = Self {
            out_channels,
            in_channels,
            kh: k,
            kw: k,
            stride,
            padding,
            weights,
            zeroed: false,
        };
        if kernel.weights.len() != kernel.numel() {
            return Err(Error::config(format!(
                "kernel {}x{}x{k}x{k} needs {} weights, got {}",
                out_channels,
                in_channels,
                kernel.numel(),
                kernel.weights.len()
            )));
        }
        Ok(kernel)
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            k,
            stride,
            padding,
            vec![T::ZERO; out_channels * in_channels * k * k],
        )
    }

    /// Symmetric uniform init in `[-b, b]` with `b = sqrt(6 / fan_in)`.
    pub fn init_uniform<R: Rng>(
        rng: &mut R,
        out_channels: usize,
        in_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_channels * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_channels * in_channels * k * k;
        let weights = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(out_channels, in_channels, k, stride, padding, weights)
    }

    pub fn numel(&self) -> usize {
        self.out_channels * self.in_channels * self.kh * self.kw
    }

    /// Rows of the im2col matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::config(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.c
            )));
        }
        let ph = input.h + 2 * self.padding;
        let pw = input.w + 2 * self.padding;
        if ph < self.kh || pw < self.kw {
            return Err(Error::config(format!(
                "padded input {ph}x{pw} smaller than kernel {}x{}",
                self.kh, self.kw
            )));
        }
        Ok(Shape::new(
            input.n,
            self.out_channels,
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }

    /// Sets every weight to exactly zero and marks the kernel as ablated.
    pub fn zero_out(&mut self) {
        self.weights.iter_mut().for_each(|w| *w = T::ZERO);
        self.zeroed = true;
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(sample: &[T], input: Shape, k: &ConvKernel<T>, out: Shape, col: &mut [T]) {
    let (h, w) = (input.h as isize, input.w as isize);
    let (oh, ow) = (out.h, out.w);
    let p = oh * ow;
    let pad = k.padding as isize;
    let s = k.stride as isize;
    let mut row = 0;
    for ci in 0..k.in_channels {
        let plane = &sample[ci * input.plane()..(ci + 1) * input.plane()];
        for i in 0..k.kh as isize {
            for j in 0..k.kw as isize {
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + i;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * input.w..(iy as usize + 1) * input.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + j;
                        *v = if ix < 0 || ix >= w { T::ZERO } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], input: Shape, k: &ConvKernel<T>, out: Shape, sample: &mut [T]) {
    let (h, w) = (input.h as isize, input.w as isize);
    let (oh, ow) = (out.h, out.w);
    let p = oh * ow;
    let pad = k.padding as isize;
    let s = k.stride as isize;
    let mut row = 0;
    for ci in 0..k.in_channels {
        let plane = &mut sample[ci * input.plane()..(ci + 1) * input.plane()];
        for i in 0..k.kh as isize {
            for j in 0..k.kw as isize {
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy as isize * s - pad + i;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * input.w..(iy as usize + 1) * input.w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - pad + j;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution of an NCHW batch with `kernel` (cross-correlation, zero padding).
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let in_shape = input.shape();
    let out_shape = kernel.output_shape(in_shape)?;
    let mut out = Tensor::zeros(out_shape);
    let (m, kk, p) = (kernel.out_channels, kernel.patch_len(), out_shape.plane());
    let pointwise = kernel.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; kk * p] };
    let out_sample = out_shape.sample();
    for n in 0..in_shape.n {
        let sample = input.sample(n);
        let cols: &[T] = if pointwise {
            sample
        } else {
            im2col(sample, in_shape, kernel, out_shape, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * out_sample..(n + 1) * out_sample];
        gemm(
            MatRef::new(&kernel.weights, m, kk),
            MatRef::new(cols, kk, p),
            T::ZERO,
            dst,
        );
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of a scalar loss through [`conv2d`], given `grad_out = dL/d(output)`.
///
/// Returns `(dL/d(input), dL/d(weights))`.
pub fn conv2d_grad<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (gi, gw) = conv2d_backward(input, kernel, grad_out, true)?;
    Ok((gi.expect("input gradient requested"), gw))
}

/// Like [`conv2d_grad`], optionally skipping the input gradient.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Vec<T>)> {
    let in_shape = input.shape();
    let out_shape = kernel.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::config(format!(
            "conv gradient has shape {}, output is {out_shape}",
            grad_out.shape()
        )));
    }
    let (m, kk, p) = (kernel.out_channels, kernel.patch_len(), out_shape.plane());
    let pointwise = kernel.is_pointwise();
    let mut grad_w = vec![T::ZERO; kernel.numel()];
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(in_shape));
    let mut col = if pointwise { Vec::new() } else { vec![T::ZERO; kk * p] };
    let mut gcol = if pointwise || !need_input_grad {
        Vec::new()
    } else {
        vec![T::ZERO; kk * p]
    };
    let in_sample = in_shape.sample();
    for n in 0..in_shape.n {
        let g = grad_out.sample(n);
        let sample = input.sample(n);
        let cols: &[T] = if pointwise {
            sample
        } else {
            im2col(sample, in_shape, kernel, out_shape, &mut col);
            &col
        };
        // dW += g (m x p) * cols^T (p x kk)
        gemm(
            MatRef::new(g, m, p),
            MatRef::t(cols, kk, p),
            T::ONE,
            &mut grad_w,
        );
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi.data_mut()[n * in_sample..(n + 1) * in_sample];
            if pointwise {
                gemm(MatRef::t(&kernel.weights, m, kk), MatRef::new(g, m, p), T::ZERO, dst);
            } else {
                gemm(
                    MatRef::t(&kernel.weights, m, kk),
                    MatRef::new(g, m, p),
                    T::ZERO,
                    &mut gcol,
                );
                col2im(&gcol, in_shape, kernel, out_shape, dst);
            }
        }
    }
    if let Some(gi) = &grad_in {
        gi.ensure_finite("conv2d_grad")?;
    }
    Ok((grad_in, grad_w))
}

/// Direct seven-loop convolution. Slow; used as the reference for [`conv2d`].
pub fn conv2d_naive<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    let o = kernel.output_shape(s)?;
    let mut out = Tensor::zeros(o);
    let pad = kernel.padding as isize;
    for n in 0..s.n {
        for co in 0..o.c {
            for oy in 0..o.h {
                for ox in 0..o.w {
                    let mut acc = T::ZERO;
                    for ci in 0..s.c {
                        for i in 0..kernel.kh {
                            for j in 0..kernel.kw {
                                let iy = (oy * kernel.stride) as isize - pad + i as isize;
                                let ix = (ox * kernel.stride) as isize - pad + j as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let wi = ((co * kernel.in_channels + ci) * kernel.kh + i) * kernel.kw + j;
                                acc += input.at(n, ci, iy as usize, ix as usize) * kernel.weights[wi];
                            }
                        }
                    }
                    let idx = out.index(n, co, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let k = ConvKernel::new(1, 1, 1, 1, 0, vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, Shape::new(2, 3, 5, 5));
        let k = ConvKernel::<f64>::zeros(4, 3, 3, 1, 1).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strided_padded_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, Shape::new(2, 3, 8, 8)).cast::<f32>();
        let k = ConvKernel::<f32>::init_uniform(&mut rng, 4, 3, 3, 2, 1).unwrap();
        let fast = conv2d(&x, &k).unwrap();
        let slow = conv2d_naive(&x, &k).unwrap();
        assert_eq!(fast.shape(), Shape::new(2, 4, 4, 4));
        let err = crate::tensor::max_relative_error(fast.data(), slow.data());
        assert!(err <= 1e-5, "err {err}");
    }

    #[test]
    fn output_extent_formula() {
        let k = ConvKernel::<f32>::zeros(2, 3, 3, 2, 1).unwrap();
        assert_eq!(k.output_shape(Shape::new(1, 3, 7, 6)).unwrap(), Shape::new(1, 2, 4, 3));
        assert!(k.output_shape(Shape::new(1, 2, 7, 6)).is_err());
        let k = ConvKernel::<f32>::zeros(2, 3, 3, 1, 0).unwrap();
        assert!(k.output_shape(Shape::new(1, 3, 2, 2)).is_err());
    }

    #[test]
    fn rejects_unsupported_kernel_size() {
        assert!(ConvKernel::<f32>::zeros(1, 1, 5, 1, 0).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, Shape::new(2, 2, 4, 4));
        let k = ConvKernel::<f64>::init_uniform(&mut rng, 3, 2, 3, 1, 1).unwrap();
        let g = Tensor::zeros(Shape::new(2, 3, 4, 4));
        let (gi, gw) = conv2d_grad(&x, &k, &g).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, Shape::new(1, 1, 4, 4));
        let k = ConvKernel::new(1, 1, 1, 1, 0, vec![1.0f64]).unwrap();
        let g = random_tensor(&mut rng, Shape::new(1, 1, 4, 4));
        let (gi, _) = conv2d_grad(&x, &k, &g).unwrap();
        assert_eq!(gi.data(), g.data());
    }

    #[test]
    fn grad_shape_mismatch_is_config_error() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        let k = ConvKernel::<f64>::zeros(1, 1, 3, 1, 1).unwrap();
        let g = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(matches!(conv2d_grad(&x, &k, &g), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        x.data_mut()[0] = f32::INFINITY;
        let k = ConvKernel::new(1, 1, 1, 1, 0, vec![1.0f32]).unwrap();
        assert!(matches!(conv2d(&x, &k), Err(Error::Numeric(_))));
    }
}
