use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient through [`relu`], gated on the forward *output* (or input; same sign).
pub fn relu_grad<T: Scalar>(forward: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    forward.check_same_shape(grad_out)?;
    let mut g = grad_out.clone();
    for (gv, &fv) in g.data_mut().iter_mut().zip(forward.data()) {
        if !(fv > T::ZERO) {
            *gv = T::ZERO;
        }
    }
    Ok(g)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        if v >= T::ZERO {
            T::ONE / (T::ONE + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::ONE + e)
        }
    })
}

/// Gradient through [`sigmoid`] given its output.
pub fn sigmoid_grad<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.check_same_shape(grad_out)?;
    let mut g = grad_out.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(output.data()) {
        *gv *= p * (T::ONE - p);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_grad_is_indicator() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0f64, 0.5, 2.0]).unwrap();
        let g = Tensor::full(Shape::new(1, 1, 1, 3), 3.0);
        assert_eq!(relu_grad(&x, &g).unwrap().data(), &[0.0, 3.0, 3.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1000.0f32, 0.0, 1000.0]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data(), &[0.0, 0.5, 1.0]);
    }
}
