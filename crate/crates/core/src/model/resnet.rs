//! Residual network built from identity and projection units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::address::{LayerAddress, UnitSlot};
use super::config::{ResNetConfig, Task};
use crate::error::{Error, Result};
use crate::ops::batchnorm::{batchnorm_eval, batchnorm_train, batchnorm_train_grad, BatchNormCache};
use crate::ops::conv::conv2d_backward;
use crate::ops::{
    conv2d, global_avg_pool, global_avg_pool_grad, relu, relu_grad, upsample_nearest2x,
    upsample_nearest2x_grad, BatchNormState, ConvKernel, Linear, Mode,
};
use crate::tensor::{Shape, Tensor};

/// A convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub kernel: ConvKernel,
    pub bn: BatchNormState,
}

struct ConvBnTrace {
    input: Tensor,
    cache: BatchNormCache,
}

#[derive(Clone, Debug)]
pub struct ConvBnGrads {
    pub weights: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl ConvBn {
    fn init(
        rng: &mut ChaCha8Rng,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            kernel: ConvKernel::init_uniform(rng, out_c, in_c, k, stride, padding)?,
            bn: BatchNormState::new(out_c),
        })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        batchnorm_eval(&conv2d(x, &self.kernel)?, &self.bn)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, ConvBnTrace)> {
        let y = conv2d(x, &self.kernel)?;
        let (out, cache) = batchnorm_train(&y, &self.bn)?;
        let s = y.shape();
        self.bn.update_running(&cache, s.n * s.plane());
        Ok((
            out,
            ConvBnTrace {
                input: x.clone(),
                cache,
            },
        ))
    }

    fn backward(&self, trace: &ConvBnTrace, grad_out: &Tensor, need_input: bool) -> Result<(Option<Tensor>, ConvBnGrads)> {
        let bn = batchnorm_train_grad(grad_out, &trace.cache, &self.bn)?;
        let (gx, gw) = conv2d_backward(&trace.input, &self.kernel, &bn.input, need_input)?;
        Ok((
            gx,
            ConvBnGrads {
                weights: gw,
                gamma: bn.gamma,
                beta: bn.beta,
            },
        ))
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel() + self.bn.param_count()
    }
}

/// Input-independent output of a branch whose first kernel was folded away.
///
/// A 3x3/pad-1 convolution of a spatially constant image only depends on
/// which neighbours fall inside the image, so each channel is described by a
/// 3x3 table indexed by (row class, column class): first, interior, last.
#[derive(Clone, Debug, PartialEq)]
pub struct BorderMap {
    pub channels: usize,
    /// `channels x 3 x 3`, row-major.
    pub values: Vec<f32>,
}

impl BorderMap {
    fn class(i: usize, n: usize) -> usize {
        if i == 0 {
            0
        } else if i + 1 == n {
            2
        } else {
            1
        }
    }

    /// Compresses a `1 x C x H x W` map with `H, W >= 2`.
    pub fn from_map(map: &Tensor) -> Result<Self> {
        let s = map.shape();
        if s.n != 1 || s.h < 2 || s.w < 2 {
            return Err(Error::config(format!("cannot compress map of shape {s}")));
        }
        let rows = [0, if s.h > 2 { 1 } else { 0 }, s.h - 1];
        let cols = [0, if s.w > 2 { 1 } else { 0 }, s.w - 1];
        let mut values = Vec::with_capacity(s.c * 9);
        for c in 0..s.c {
            for &r in &rows {
                for &q in &cols {
                    values.push(map.at(0, c, r, q));
                }
            }
        }
        Ok(Self {
            channels: s.c,
            values,
        })
    }

    pub fn expand(&self, n: usize, h: usize, w: usize) -> Tensor {
        let mut out = Tensor::zeros(Shape::new(n, self.channels, h, w));
        let plane = h * w;
        for (i, dst) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % self.channels;
            let table = &self.values[c * 9..c * 9 + 9];
            for y in 0..h {
                let rc = Self::class(y, h);
                for x in 0..w {
                    dst[y * w + x] = table[rc * 3 + Self::class(x, w)];
                }
            }
        }
        out
    }
}

/// Residual path of a unit: conv-BN-relu-conv-BN, or a folded constant.
#[derive(Clone, Debug, PartialEq)]
pub enum Branch {
    Conv { conv1: ConvBn, conv2: ConvBn },
    /// Second kernel folded: per-channel constant.
    Constant(Vec<f32>),
    /// First kernel folded: input-independent border-aware map.
    ConstantMap(BorderMap),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut {
    Identity,
    Projection(ConvBn),
    /// Projection folded: per-channel constant.
    Constant(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUnit {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub branch: Branch,
    pub shortcut: Shortcut,
}

fn broadcast_channels(values: &[f32], n: usize, h: usize, w: usize) -> Tensor {
    let c = values.len();
    let mut out = Tensor::zeros(Shape::new(n, c, h, w));
    for (i, dst) in out.data_mut().chunks_mut(h * w).enumerate() {
        dst.iter_mut().for_each(|v| *v = values[i % c]);
    }
    out
}

struct UnitTrace {
    conv1: Option<ConvBnTrace>,
    hidden: Option<Tensor>,
    conv2: Option<ConvBnTrace>,
    proj: Option<ConvBnTrace>,
    output: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct UnitGrads {
    pub conv1: Option<ConvBnGrads>,
    pub conv2: Option<ConvBnGrads>,
    pub proj: Option<ConvBnGrads>,
}

impl ResidualUnit {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::config(format!(
                "unit expects {} channels, got {}",
                self.in_channels, input.c
            )));
        }
        Ok(Shape::new(
            input.n,
            self.out_channels,
            (input.h - 1) / self.stride + 1,
            (input.w - 1) / self.stride + 1,
        ))
    }

    /// `BN(relu(BN(x * w')) * w'')`, or its folded constant.
    pub fn branch_eval(&self, x: &Tensor) -> Result<Tensor> {
        let o = self.output_shape(x.shape())?;
        match &self.branch {
            Branch::Conv { conv1, conv2 } => conv2.forward_eval(&relu(&conv1.forward_eval(x)?)),
            Branch::Constant(c) => Ok(broadcast_channels(c, o.n, o.h, o.w)),
            Branch::ConstantMap(m) => Ok(m.expand(o.n, o.h, o.w)),
        }
    }

    /// `x`, `BN(x * w_1x1)`, or its folded constant.
    pub fn shortcut_eval(&self, x: &Tensor) -> Result<Tensor> {
        let o = self.output_shape(x.shape())?;
        match &self.shortcut {
            Shortcut::Identity => Ok(x.clone()),
            Shortcut::Projection(p) => p.forward_eval(x),
            Shortcut::Constant(c) => Ok(broadcast_channels(c, o.n, o.h, o.w)),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.branch_eval(x)?;
        let s = self.shortcut_eval(x)?;
        Ok(relu(&s.add(&b)?))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, UnitTrace)> {
        let o = self.output_shape(x.shape())?;
        let (branch, conv1_t, hidden, conv2_t) = match &mut self.branch {
            Branch::Conv { conv1, conv2 } => {
                let (y1, t1) = conv1.forward_train(x)?;
                let a = relu(&y1);
                let (y2, t2) = conv2.forward_train(&a)?;
                (y2, Some(t1), Some(a), Some(t2))
            }
            Branch::Constant(c) => (broadcast_channels(c, o.n, o.h, o.w), None, None, None),
            Branch::ConstantMap(m) => (m.expand(o.n, o.h, o.w), None, None, None),
        };
        let (short, proj_t) = match &mut self.shortcut {
            Shortcut::Identity => (x.clone(), None),
            Shortcut::Projection(p) => {
                let (y, t) = p.forward_train(x)?;
                (y, Some(t))
            }
            Shortcut::Constant(c) => (broadcast_channels(c, o.n, o.h, o.w), None),
        };
        let output = relu(&short.add(&branch)?);
        Ok((
            output.clone(),
            UnitTrace {
                conv1: conv1_t,
                hidden,
                conv2: conv2_t,
                proj: proj_t,
                output,
            },
        ))
    }

    fn backward(&self, trace: &UnitTrace, grad_out: &Tensor, in_shape: Shape) -> Result<(Tensor, UnitGrads)> {
        let g = relu_grad(&trace.output, grad_out)?;
        let mut grads = UnitGrads::default();
        let mut gx = Tensor::zeros(in_shape);
        if let (Branch::Conv { conv1, conv2 }, Some(t1), Some(a), Some(t2)) =
            (&self.branch, &trace.conv1, &trace.hidden, &trace.conv2)
        {
            let (ga, g2) = conv2.backward(t2, &g, true)?;
            let ga = relu_grad(a, &ga.expect("requested"))?;
            let (g1x, g1) = conv1.backward(t1, &ga, true)?;
            gx = g1x.expect("requested");
            grads.conv1 = Some(g1);
            grads.conv2 = Some(g2);
        }
        match (&self.shortcut, &trace.proj) {
            (Shortcut::Identity, _) => gx = gx.add(&g)?,
            (Shortcut::Projection(p), Some(tp)) => {
                let (gpx, gp) = p.backward(tp, &g, true)?;
                gx = gx.add(&gpx.expect("requested"))?;
                grads.proj = Some(gp);
            }
            _ => {}
        }
        Ok((gx, grads))
    }

    pub fn param_count(&self) -> usize {
        let b = match &self.branch {
            Branch::Conv { conv1, conv2 } => conv1.param_count() + conv2.param_count(),
            Branch::Constant(c) => c.len(),
            Branch::ConstantMap(m) => m.values.len(),
        };
        let s = match &self.shortcut {
            Shortcut::Identity => 0,
            Shortcut::Projection(p) => p.param_count(),
            Shortcut::Constant(c) => c.len(),
        };
        b + s
    }

    pub fn has_projection_slot(&self) -> bool {
        !matches!(self.shortcut, Shortcut::Identity)
    }
}

/// Segmentation decoder: (2x upsample, 3x3 conv, BN, relu) repeated, then a 1x1 conv with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub ups: Vec<ConvBn>,
    pub out: ConvKernel,
    pub out_bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Global average pool then a fully-connected map.
    Classify(Linear),
    Segment(SegHead),
}

#[derive(Clone, Debug)]
pub enum HeadGrads {
    Classify { weights: Vec<f32>, bias: Vec<f32> },
    Segment { ups: Vec<ConvBnGrads>, out: Vec<f32>, out_bias: Vec<f32> },
}

enum HeadTrace {
    Classify {
        input_shape: Shape,
        pooled: Tensor,
    },
    Segment {
        ups: Vec<(ConvBnTrace, Tensor)>,
        last: Tensor,
    },
}

impl Head {
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Head::Classify(fc) => fc.forward(&global_avg_pool(x)),
            Head::Segment(seg) => {
                let mut h = x.clone();
                for up in &seg.ups {
                    h = relu(&up.forward_eval(&upsample_nearest2x(&h))?);
                }
                let mut y = conv2d(&h, &seg.out)?;
                add_channel_bias(&mut y, &seg.out_bias);
                Ok(y)
            }
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, HeadTrace)> {
        match self {
            Head::Classify(fc) => {
                let pooled = global_avg_pool(x);
                let y = fc.forward(&pooled)?;
                Ok((
                    y,
                    HeadTrace::Classify {
                        input_shape: x.shape(),
                        pooled,
                    },
                ))
            }
            Head::Segment(seg) => {
                let mut h = x.clone();
                let mut traces = Vec::with_capacity(seg.ups.len());
                for up in &mut seg.ups {
                    let (y, t) = up.forward_train(&upsample_nearest2x(&h))?;
                    h = relu(&y);
                    traces.push((t, h.clone()));
                }
                let mut y = conv2d(&h, &seg.out)?;
                add_channel_bias(&mut y, &seg.out_bias);
                Ok((y, HeadTrace::Segment { ups: traces, last: h }))
            }
        }
    }

    fn backward(&self, trace: &HeadTrace, grad_out: &Tensor) -> Result<(Tensor, HeadGrads)> {
        match (self, trace) {
            (Head::Classify(fc), HeadTrace::Classify { input_shape, pooled }) => {
                let (gp, weights, bias) = fc.backward(pooled, grad_out)?;
                Ok((
                    global_avg_pool_grad(*input_shape, &gp)?,
                    HeadGrads::Classify { weights, bias },
                ))
            }
            (Head::Segment(seg), HeadTrace::Segment { ups, last }) => {
                let (mut g, out) = conv2d_backward(last, &seg.out, grad_out, true)?;
                let mut g = g.take().expect("requested");
                let s = grad_out.shape();
                let mut out_bias = vec![0.0f32; s.c];
                for (i, plane) in grad_out.data().chunks(s.plane()).enumerate() {
                    out_bias[i % s.c] += plane.iter().sum::<f32>();
                }
                let mut up_grads = Vec::with_capacity(ups.len());
                for (up, (t, act)) in seg.ups.iter().zip(ups).rev() {
                    let ga = relu_grad(act, &g)?;
                    let (gu, gr) = up.backward(t, &ga, true)?;
                    g = upsample_nearest2x_grad(&gu.expect("requested"))?;
                    up_grads.push(gr);
                }
                up_grads.reverse();
                Ok((
                    g,
                    HeadGrads::Segment {
                        ups: up_grads,
                        out,
                        out_bias,
                    },
                ))
            }
            _ => Err(Error::config("head trace does not match head")),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Head::Classify(fc) => fc.param_count(),
            Head::Segment(seg) => {
                seg.ups.iter().map(ConvBn::param_count).sum::<usize>() + seg.out.numel() + seg.out_bias.len()
            }
        }
    }
}

fn add_channel_bias(y: &mut Tensor, bias: &[f32]) {
    let s = y.shape();
    for (i, plane) in y.data_mut().chunks_mut(s.plane()).enumerate() {
        let b = bias[i % s.c];
        plane.iter_mut().for_each(|v| *v += b);
    }
}

/// One entry of [`Model::layers`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub address: LayerAddress,
    pub is_feature_decomposition: bool,
    pub channel_in: usize,
    pub channel_out: usize,
}

/// Saved activations of a train-mode forward pass.
pub struct Trace {
    input_shape: Shape,
    stem: ConvBnTrace,
    stem_out: Tensor,
    units: Vec<(Shape, UnitTrace)>,
    head: HeadTrace,
}

/// Parameter gradients, mirroring the model layout.
#[derive(Clone, Debug)]
pub struct Grads {
    pub stem: ConvBnGrads,
    pub units: Vec<Vec<UnitGrads>>,
    pub head: HeadGrads,
}

impl Grads {
    /// Gradient buffers in the order of [`Model::param_buffers_mut`].
    pub fn buffers(&self) -> Vec<&[f32]> {
        fn push<'a>(g: &'a ConvBnGrads, out: &mut Vec<&'a [f32]>) {
            out.push(&g.weights);
            out.push(&g.gamma);
            out.push(&g.beta);
        }
        let mut out: Vec<&[f32]> = Vec::new();
        push(&self.stem, &mut out);
        for unit in self.units.iter().flatten() {
            for g in [&unit.conv1, &unit.conv2, &unit.proj].into_iter().flatten() {
                push(g, &mut out);
            }
        }
        match &self.head {
            HeadGrads::Classify { weights, bias } => {
                out.push(weights);
                out.push(bias);
            }
            HeadGrads::Segment { ups, out: o, out_bias } => {
                for g in ups {
                    push(g, &mut out);
                }
                out.push(o);
                out.push(out_bias);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ResNetConfig,
    pub stem: ConvBn,
    pub stages: Vec<Vec<ResidualUnit>>,
    pub head: Head,
}

impl Model {
    /// Builds a freshly initialised network from `config.seed`.
    pub fn build(config: &ResNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let widths = &config.stage_widths;
        let stem = ConvBn::init(&mut rng, widths[0], config.input_channels, 3, 1, 1)?;
        let mut stages = Vec::with_capacity(widths.len());
        for (k, (&w, &units)) in widths.iter().zip(&config.units_per_stage).enumerate() {
            let mut stage = Vec::with_capacity(units);
            for u in 0..units {
                let downsample = k > 0 && u == 0;
                let in_c = if downsample { widths[k - 1] } else { w };
                let stride = if downsample { 2 } else { 1 };
                let conv1 = ConvBn::init(&mut rng, w, in_c, 3, stride, 1)?;
                let mut conv2 = ConvBn::init(&mut rng, w, w, 3, 1, 1)?;
                if config.zero_init_residual {
                    conv2.bn.gamma.fill(0.0);
                }
                let shortcut = if downsample {
                    Shortcut::Projection(ConvBn::init(&mut rng, w, in_c, 1, 2, 0)?)
                } else {
                    Shortcut::Identity
                };
                stage.push(ResidualUnit {
                    in_channels: in_c,
                    out_channels: w,
                    stride,
                    branch: Branch::Conv { conv1, conv2 },
                    shortcut,
                });
            }
            stages.push(stage);
        }
        let last = *widths.last().expect("validated");
        let head = match config.task {
            Task::Classify => Head::Classify(Linear::init_uniform(&mut rng, last, config.num_classes)),
            Task::Segment => {
                let mut ups = Vec::new();
                let mut c = last;
                for k in (0..widths.len() - 1).rev() {
                    ups.push(ConvBn::init(&mut rng, widths[k], c, 3, 1, 1)?);
                    c = widths[k];
                }
                let out = ConvKernel::init_uniform(&mut rng, config.num_classes, c, 1, 1, 0)?;
                Head::Segment(SegHead {
                    ups,
                    out,
                    out_bias: vec![0.0; config.num_classes],
                })
            }
        };
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            head,
        })
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(
            batch,
            self.config.input_channels,
            self.config.input_size,
            self.config.input_size,
        )
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s != self.input_shape(s.n) || s.n == 0 {
            return Err(Error::config(format!(
                "input {s} does not match model input {}",
                self.input_shape(s.n.max(1))
            )));
        }
        Ok(())
    }

    pub fn stem_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(relu(&self.stem.forward_eval(x)?))
    }

    /// Eval-mode forward. Pure in (weights, input).
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = self.stem_eval(x)?;
        for unit in self.stages.iter().flatten() {
            h = unit.forward_eval(&h)?;
        }
        self.head.forward_eval(&h)
    }

    /// Forward in either mode. Train mode advances every BN running statistic.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(x),
            Mode::Train => Ok(self.forward_train(x)?.0),
        }
    }

    /// Train-mode forward keeping activations for [`Model::backward`].
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Trace)> {
        self.check_input(x)?;
        let (y, stem) = self.stem.forward_train(x)?;
        let stem_out = relu(&y);
        let mut h = stem_out.clone();
        let mut units = Vec::new();
        for unit in self.stages.iter_mut().flatten() {
            let in_shape = h.shape();
            let (next, t) = unit.forward_train(&h)?;
            units.push((in_shape, t));
            h = next;
        }
        let (logits, head) = self.head.forward_train(&h)?;
        Ok((
            logits,
            Trace {
                input_shape: x.shape(),
                stem,
                stem_out,
                units,
                head,
            },
        ))
    }

    /// Parameter gradients given `dL/d(logits)` for the traced forward.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor) -> Result<Grads> {
        let (mut g, head) = self.head.backward(&trace.head, grad_logits)?;
        let flat: Vec<&ResidualUnit> = self.stages.iter().flatten().collect();
        if flat.len() != trace.units.len() {
            return Err(Error::config("trace does not match model"));
        }
        let mut unit_grads = Vec::with_capacity(flat.len());
        for (unit, (in_shape, t)) in flat.iter().zip(&trace.units).rev() {
            let (gx, ug) = unit.backward(t, &g, *in_shape)?;
            g = gx;
            unit_grads.push(ug);
        }
        unit_grads.reverse();
        let g = relu_grad(&trace.stem_out, &g)?;
        let (_, stem) = self.stem.backward(&trace.stem, &g, false)?;
        debug_assert_eq!(trace.input_shape, trace.stem.input.shape());
        let mut it = unit_grads.into_iter();
        let units = self
            .stages
            .iter()
            .map(|s| s.iter().map(|_| it.next().expect("one per unit")).collect())
            .collect();
        Ok(Grads { stem, units, head })
    }

    /// Mutable trainable buffers in a fixed order shared with [`Grads::buffers`].
    pub fn param_buffers_mut(&mut self) -> Vec<&mut [f32]> {
        fn push<'a>(c: &'a mut ConvBn, out: &mut Vec<&'a mut [f32]>) {
            out.push(&mut c.kernel.weights);
            out.push(&mut c.bn.gamma);
            out.push(&mut c.bn.beta);
        }
        let mut out = Vec::new();
        push(&mut self.stem, &mut out);
        for unit in self.stages.iter_mut().flatten() {
            if let Branch::Conv { conv1, conv2 } = &mut unit.branch {
                push(conv1, &mut out);
                push(conv2, &mut out);
            }
            if let Shortcut::Projection(p) = &mut unit.shortcut {
                push(p, &mut out);
            }
        }
        match &mut self.head {
            Head::Classify(fc) => {
                out.push(&mut fc.weights);
                out.push(&mut fc.bias);
            }
            Head::Segment(seg) => {
                for up in &mut seg.ups {
                    push(up, &mut out);
                }
                out.push(&mut seg.out.weights);
                out.push(&mut seg.out_bias);
            }
        }
        out
    }

    /// Every kernel in forward order with its channel counts.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut out = vec![LayerInfo {
            address: LayerAddress::Stem,
            is_feature_decomposition: true,
            channel_in: self.stem.kernel.in_channels,
            channel_out: self.stem.kernel.out_channels,
        }];
        for (k, stage) in self.stages.iter().enumerate() {
            for (u, unit) in stage.iter().enumerate() {
                if let Branch::Conv { conv1, conv2 } = &unit.branch {
                    for (slot, c) in [(UnitSlot::Conv1, conv1), (UnitSlot::Conv2, conv2)] {
                        out.push(LayerInfo {
                            address: LayerAddress::unit(k, u, slot),
                            is_feature_decomposition: c.kernel.in_channels != c.kernel.out_channels,
                            channel_in: c.kernel.in_channels,
                            channel_out: c.kernel.out_channels,
                        });
                    }
                }
                if let Shortcut::Projection(p) = &unit.shortcut {
                    out.push(LayerInfo {
                        address: LayerAddress::unit(k, u, UnitSlot::Proj),
                        is_feature_decomposition: p.kernel.in_channels != p.kernel.out_channels,
                        channel_in: p.kernel.in_channels,
                        channel_out: p.kernel.out_channels,
                    });
                }
            }
        }
        match &self.head {
            Head::Classify(fc) => out.push(LayerInfo {
                address: LayerAddress::Head(0),
                is_feature_decomposition: false,
                channel_in: fc.in_features,
                channel_out: fc.out_features,
            }),
            Head::Segment(seg) => {
                let convs = seg.ups.iter().map(|u| &u.kernel).chain(std::iter::once(&seg.out));
                for (i, k) in convs.enumerate() {
                    out.push(LayerInfo {
                        address: LayerAddress::Head(i),
                        is_feature_decomposition: false,
                        channel_in: k.in_channels,
                        channel_out: k.out_channels,
                    });
                }
            }
        }
        out
    }

    pub fn unit(&self, stage: usize, unit: usize) -> Option<&ResidualUnit> {
        self.stages.get(stage)?.get(unit)
    }

    pub fn unit_mut(&mut self, stage: usize, unit: usize) -> Option<&mut ResidualUnit> {
        self.stages.get_mut(stage)?.get_mut(unit)
    }

    /// Convolution + batch norm registered at `address` (heads of classifiers have none).
    pub fn conv_bn(&self, address: LayerAddress) -> Option<&ConvBn> {
        match address {
            LayerAddress::Stem => Some(&self.stem),
            LayerAddress::Unit { stage, unit, slot } => {
                let u = self.unit(stage, unit)?;
                match (slot, &u.branch, &u.shortcut) {
                    (UnitSlot::Conv1, Branch::Conv { conv1, .. }, _) => Some(conv1),
                    (UnitSlot::Conv2, Branch::Conv { conv2, .. }, _) => Some(conv2),
                    (UnitSlot::Proj, _, Shortcut::Projection(p)) => Some(p),
                    _ => None,
                }
            }
            LayerAddress::Head(i) => match &self.head {
                Head::Segment(seg) => seg.ups.get(i),
                Head::Classify(_) => None,
            },
        }
    }

    pub fn conv_bn_mut(&mut self, address: LayerAddress) -> Option<&mut ConvBn> {
        match address {
            LayerAddress::Stem => Some(&mut self.stem),
            LayerAddress::Unit { stage, unit, slot } => {
                let u = self.unit_mut(stage, unit)?;
                match (slot, &mut u.branch, &mut u.shortcut) {
                    (UnitSlot::Conv1, Branch::Conv { conv1, .. }, _) => Some(conv1),
                    (UnitSlot::Conv2, Branch::Conv { conv2, .. }, _) => Some(conv2),
                    (UnitSlot::Proj, _, Shortcut::Projection(p)) => Some(p),
                    _ => None,
                }
            }
            LayerAddress::Head(i) => match &mut self.head {
                Head::Segment(seg) => seg.ups.get_mut(i),
                Head::Classify(_) => None,
            },
        }
    }

    pub fn kernel(&self, address: LayerAddress) -> Option<&ConvKernel> {
        match (address, &self.head) {
            (LayerAddress::Head(i), Head::Segment(seg)) if i == seg.ups.len() => Some(&seg.out),
            _ => self.conv_bn(address).map(|c| &c.kernel),
        }
    }

    pub fn kernel_mut(&mut self, address: LayerAddress) -> Option<&mut ConvKernel> {
        match address {
            LayerAddress::Stem => Some(&mut self.stem.kernel),
            LayerAddress::Unit { stage, unit, slot } => {
                let u = self.unit_mut(stage, unit)?;
                match (slot, &mut u.branch, &mut u.shortcut) {
                    (UnitSlot::Conv1, Branch::Conv { conv1, .. }, _) => Some(&mut conv1.kernel),
                    (UnitSlot::Conv2, Branch::Conv { conv2, .. }, _) => Some(&mut conv2.kernel),
                    (UnitSlot::Proj, _, Shortcut::Projection(p)) => Some(&mut p.kernel),
                    _ => None,
                }
            }
            LayerAddress::Head(i) => match &mut self.head {
                Head::Segment(seg) => {
                    if i == seg.ups.len() {
                        Some(&mut seg.out)
                    } else {
                        seg.ups.get_mut(i).map(|u| &mut u.kernel)
                    }
                }
                Head::Classify(_) => None,
            },
        }
    }

    pub fn contains(&self, address: LayerAddress) -> bool {
        self.layers().iter().any(|l| l.address == address)
    }

    /// Trainable parameters plus stored fold constants.
    pub fn param_count(&self) -> usize {
        self.stem.param_count()
            + self.stages.iter().flatten().map(ResidualUnit::param_count).sum::<usize>()
            + self.head.param_count()
    }
}
