//! Finite-difference gradient checks, shared by the gradient and acceptance targets.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resnet_ablation::ops::{
    batchnorm_train, batchnorm_train_grad, conv2d, conv2d_grad, relu, relu_grad, soft_dice_loss, softmax_cross_entropy,
    BatchNormState, ConvKernel, Linear,
};
use resnet_ablation::{Scalar, Shape, Tensor};

/// Central-difference step: 1e-3 in 64-bit, coarser in 32-bit where rounding dominates.
fn step<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() == 8 {
        1e-3
    } else {
        1e-2
    }
}

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec<T: Scalar>(rng: &mut Rng64, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect()
}

fn random_tensor<T: Scalar>(rng: &mut Rng64, shape: Shape) -> Tensor<T> {
    Tensor::from_vec(shape, random_vec(rng, shape.numel(), -1.0, 1.0)).unwrap()
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_grad<T: Scalar>(x: &[T], mut f: impl FnMut(&[T]) -> T) -> Vec<f64> {
    let h = T::from_f64(step::<T>());
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let (hi, lo) = (orig + h, orig - h);
            probe[i] = hi;
            let up = f(&probe).to_f64();
            probe[i] = lo;
            let down = f(&probe).to_f64();
            probe[i] = orig;
            // the realized step, not the nominal one
            (up - down) / (hi - lo).to_f64()
        })
        .collect()
}

/// max |analytic - numeric| / max |numeric|.
fn rel_err<T: Scalar>(analytic: &[T], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a.to_f64() - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Largest relative error over input and weight gradients of a random conv.
pub fn check_conv<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = if r.gen_bool(0.5) { 3 } else { 1 };
    let stride = r.gen_range(1..=2);
    let padding = if k == 3 { r.gen_range(0..=1) } else { 0 };
    let (cin, cout) = (r.gen_range(1..=3), r.gen_range(1..=3));
    let (h, w) = (r.gen_range(3..=6), r.gen_range(3..=6));
    let x = random_tensor(&mut r, Shape::new(2, cin, h, w));
    let mut kernel = ConvKernel::<T>::zeros(cout, cin, k, stride, padding).unwrap();
    kernel.weights = random_vec(&mut r, kernel.weights.len(), -1.0, 1.0);
    let y = conv2d(&x, &kernel).unwrap();
    let proj = random_tensor(&mut r, y.shape());
    let (gx, gw) = conv2d_grad(&x, &kernel, &proj).unwrap();
    let nx = numeric_grad(x.data(), |v| {
        let xt = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
        dot(conv2d(&xt, &kernel).unwrap().data(), proj.data())
    });
    let nw = numeric_grad(&kernel.weights, |v| {
        let mut kk = kernel.clone();
        kk.weights = v.to_vec();
        dot(conv2d(&x, &kk).unwrap().data(), proj.data())
    });
    rel_err(gx.data(), &nx).max(rel_err(&gw, &nw))
}

/// Train-mode batch norm: input, gamma and beta gradients.
pub fn check_batchnorm<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let c = r.gen_range(1..=3);
    let shape = Shape::new(r.gen_range(2..=4), c, r.gen_range(1..=3), r.gen_range(2..=3));
    let x = random_tensor(&mut r, shape);
    let mut state = BatchNormState::<T>::new(c);
    state.gamma = random_vec(&mut r, c, 0.5, 1.5);
    state.beta = random_vec(&mut r, c, -0.5, 0.5);
    let proj = random_tensor(&mut r, shape);
    let (_, cache) = batchnorm_train(&x, &state).unwrap();
    let g = batchnorm_train_grad(&proj, &cache, &state).unwrap();
    let loss = |x: &Tensor<T>, s: &BatchNormState<T>| dot(batchnorm_train(x, s).unwrap().0.data(), proj.data());
    let nx = numeric_grad(x.data(), |v| loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &state));
    let ng = numeric_grad(&state.gamma, |v| {
        let mut s = state.clone();
        s.gamma = v.to_vec();
        loss(&x, &s)
    });
    let nb = numeric_grad(&state.beta, |v| {
        let mut s = state.clone();
        s.beta = v.to_vec();
        loss(&x, &s)
    });
    rel_err(g.input.data(), &nx)
        .max(rel_err(&g.gamma, &ng))
        .max(rel_err(&g.beta, &nb))
}

/// Fully-connected layer: input, weight and bias gradients.
pub fn check_linear<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, fin, fout) = (r.gen_range(1..=3), r.gen_range(1..=6), r.gen_range(1..=5));
    let mut fc = Linear::<T>::init_uniform(&mut r, fin, fout);
    fc.bias = random_vec(&mut r, fout, -0.5, 0.5);
    let x = random_tensor(&mut r, Shape::new(n, fin, 1, 1));
    let proj = random_tensor(&mut r, Shape::new(n, fout, 1, 1));
    let (gx, gw, gb) = fc.backward(&x, &proj).unwrap();
    let nx = numeric_grad(x.data(), |v| {
        dot(fc.forward(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap()).unwrap().data(), proj.data())
    });
    let nw = numeric_grad(&fc.weights, |v| {
        let mut f = fc.clone();
        f.weights = v.to_vec();
        dot(f.forward(&x).unwrap().data(), proj.data())
    });
    let nb = numeric_grad(&fc.bias, |v| {
        let mut f = fc.clone();
        f.bias = v.to_vec();
        dot(f.forward(&x).unwrap().data(), proj.data())
    });
    rel_err(gx.data(), &nx).max(rel_err(&gw, &nw)).max(rel_err(&gb, &nb))
}

/// Relu away from its kink: inputs stay at least 0.05 from zero, beyond either step.
pub fn check_relu<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = Shape::new(2, r.gen_range(1..=3), 3, 3);
    let data = (0..shape.numel())
        .map(|_| {
            let v = T::from_f64(r.gen_range(0.05..1.0));
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::from_vec(shape, data).unwrap();
    let proj = random_tensor(&mut r, shape);
    let g = relu_grad(&relu(&x), &proj).unwrap();
    let nx = numeric_grad(x.data(), |v| {
        dot(relu(&Tensor::from_vec(shape, v.to_vec()).unwrap()).data(), proj.data())
    });
    rel_err(g.data(), &nx)
}

pub fn check_softmax_ce<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, k) = (r.gen_range(1..=4), r.gen_range(2..=6));
    let logits: Tensor<T> = Tensor::from_vec(Shape::new(n, k, 1, 1), random_vec(&mut r, n * k, -3.0, 3.0)).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let nx = numeric_grad(logits.data(), |v| {
        softmax_cross_entropy(&Tensor::from_vec(logits.shape(), v.to_vec()).unwrap(), &labels)
            .unwrap()
            .0
    });
    rel_err(g.data(), &nx)
}

pub fn check_soft_dice<T: Scalar>(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = Shape::new(r.gen_range(1..=2), 1, r.gen_range(2..=4), r.gen_range(2..=4));
    let p = Tensor::from_vec(shape, random_vec(&mut r, shape.numel(), 0.01, 0.99)).unwrap();
    let truth = Tensor::from_fn(shape, |_| if r.gen_bool(0.4) { T::ONE } else { T::ZERO });
    let (_, g) = soft_dice_loss(&p, &truth).unwrap();
    let nx = numeric_grad(p.data(), |v| {
        soft_dice_loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &truth).unwrap().0
    });
    rel_err(g.data(), &nx)
}

pub type GradCheck = fn(u64) -> f64;

pub fn gradient_suite<T: Scalar>() -> [(&'static str, GradCheck); 6] {
    [
        ("conv2d", check_conv::<T>),
        ("batchnorm (train)", check_batchnorm::<T>),
        ("fully-connected", check_linear::<T>),
        ("relu", check_relu::<T>),
        ("softmax-cross-entropy", check_softmax_ce::<T>),
        ("soft-dice", check_soft_dice::<T>),
    ]
}

/// Worst error of each op over `instances` seeds.
pub fn run_gradient_suite<T: Scalar>(instances: u64) -> Vec<(&'static str, f64)> {
    gradient_suite::<T>()
        .iter()
        .map(|&(name, check)| (name, (0..instances).map(check).fold(0.0f64, f64::max)))
        .collect()
}
