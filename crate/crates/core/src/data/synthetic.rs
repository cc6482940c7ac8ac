//! Seeded synthetic datasets.
//!
//! Classification: each class is an oriented sinusoidal grating with a
//! class-specific orientation and frequency band; phase, contrast, colour and
//! channel offsets are random per image, so neither the pixel mean nor any
//! fixed linear template identifies the class.
//!
//! Segmentation: one to three ellipses or rotated rectangles, brighter than a
//! textured background; the mask is their union.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{channel_stats, normalize_channels, DatasetDescriptor, LabeledDataset, Split, Targets};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationParams {
    pub n_per_class: usize,
    /// Test images per class; defaults to a quarter of the train count.
    pub n_test_per_class: usize,
    pub classes: usize,
    pub size: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    /// Frequency bands; classes cycle through `classes / bands` orientations per band.
    pub bands: usize,
    /// Amplitude of a distractor grating with random orientation at a low frequency.
    pub clutter: f64,
    /// Cycles across a 32-pixel image of the lowest and highest band.
    pub cycles: (f64, f64),
}

impl ClassificationParams {
    pub fn new(n_per_class: usize, classes: usize, size: usize) -> Self {
        Self {
            n_per_class,
            n_test_per_class: (n_per_class / 4).max(1),
            classes,
            size,
            noise: 0.6,
            bands: 2,
            clutter: 0.0,
            cycles: (9.0, 13.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationParams {
    pub n: usize,
    pub n_test: usize,
    pub size: usize,
    /// Range of the foreground brightness lift.
    pub lift: (f64, f64),
    /// Range of the background grating amplitude.
    pub texture: (f64, f64),
    /// When set, foreground carries its own orthogonal, finer grating instead of the background one.
    pub fg_texture: bool,
    /// Half-width of the per-image, per-channel brightness offset.
    pub offset: f64,
}

impl SegmentationParams {
    pub fn new(n: usize, size: usize) -> Self {
        Self {
            n,
            n_test: (n / 4).max(1),
            size,
            lift: (0.9, 1.4),
            texture: (0.2, 0.5),
            fg_texture: false,
            offset: 0.3,
        }
    }
}

fn rng_for(seed: u64, split: Split) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    rng
}

/// Orientation (radians) and cycles-per-image of class `c`.
fn class_pattern(c: usize, p: &ClassificationParams) -> (f64, f64) {
    let orientations = p.classes.div_ceil(p.bands);
    let theta = PI * (c % orientations) as f64 / orientations as f64;
    let band = (c / orientations) as f64;
    let span = if p.bands > 1 { band / (p.bands - 1) as f64 } else { 0.5 };
    let cycles = (p.cycles.0 + (p.cycles.1 - p.cycles.0) * span) * p.size as f64 / 32.0;
    (theta, cycles)
}

fn grating_image(
    rng: &mut ChaCha8Rng,
    class: usize,
    p: &ClassificationParams,
    noise: &Normal<f64>,
    out: &mut [f32],
) {
    let (theta0, cycles0) = class_pattern(class, p);
    let theta = theta0 + rng.gen_range(-0.12..0.12);
    let cycles = cycles0 * rng.gen_range(0.92..1.08);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let amp = rng.gen_range(0.5..1.0);
    let color: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(0.3..1.0));
    let offset: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(-0.3..0.3));
    let (ct, st) = (theta.cos(), theta.sin());
    let w = 2.0 * PI * cycles / p.size as f64;
    let c_theta: f64 = rng.gen_range(0.0..PI);
    let c_w = 2.0 * PI * rng.gen_range(1.0..2.0) / p.size as f64;
    let c_phase = rng.gen_range(0.0..2.0 * PI);
    let c_amp = p.clutter * rng.gen_range(0.5..1.0);
    let (cc, cs) = (c_theta.cos(), c_theta.sin());
    let plane = p.size * p.size;
    for y in 0..p.size {
        for x in 0..p.size {
            let (xf, yf) = (x as f64, y as f64);
            let g = amp * (w * (xf * ct + yf * st) + phase).cos()
                + c_amp * (c_w * (xf * cc + yf * cs) + c_phase).cos();
            for ch in 0..CHANNELS {
                let v = color[ch] * g + offset[ch] + noise.sample(rng);
                out[ch * plane + y * p.size + x] = v as f32;
            }
        }
    }
}

fn classification_split(seed: u64, p: &ClassificationParams, split: Split, per_class: usize) -> (Tensor, Vec<usize>) {
    let mut rng = rng_for(seed, split);
    let noise = Normal::new(0.0, p.noise).expect("valid noise");
    let n = per_class * p.classes;
    let shape = Shape::new(n, CHANNELS, p.size, p.size);
    let mut images = Tensor::zeros(shape);
    let mut labels = Vec::with_capacity(n);
    let sample = shape.sample();
    // interleave classes so any prefix is nearly balanced
    for i in 0..n {
        let class = i % p.classes;
        grating_image(
            &mut rng,
            class,
            p,
            &noise,
            &mut images.data_mut()[i * sample..(i + 1) * sample],
        );
        labels.push(class);
    }
    (images, labels)
}

/// Train and test splits of the grating task, normalized per channel with
/// train statistics. Train has `n_per_class` images per class, test a quarter.
pub fn gen_classification_dataset(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    size: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    gen_classification_with(seed, &ClassificationParams::new(n_per_class, classes, size))
}

pub fn gen_classification_with(seed: u64, p: &ClassificationParams) -> Result<(LabeledDataset, LabeledDataset)> {
    if p.n_per_class < 2 || p.n_test_per_class < 1 {
        return Err(Error::config("need at least two train images per class"));
    }
    if p.classes < 2 || p.size < 4 {
        return Err(Error::config("need at least two classes and size >= 4"));
    }
    if p.bands == 0 || p.bands > p.classes {
        return Err(Error::config("frequency bands must be between 1 and the class count"));
    }
    let (mut train_x, train_y) = classification_split(seed, p, Split::Train, p.n_per_class);
    let (mut test_x, test_y) = classification_split(seed, p, Split::Test, p.n_test_per_class);
    let (mean, std) = channel_stats(&train_x);
    normalize_channels(&mut train_x, &mean, &std);
    normalize_channels(&mut test_x, &mean, &std);
    let descriptor = DatasetDescriptor::SyntheticClassification {
        seed,
        n_per_class: p.n_per_class,
        classes: p.classes,
        size: p.size,
    };
    Ok((
        LabeledDataset::new(train_x, Targets::Classes(train_y), Split::Train, descriptor.clone())?,
        LabeledDataset::new(test_x, Targets::Classes(test_y), Split::Test, descriptor)?,
    ))
}

enum ShapeKind {
    Ellipse { a: f64, b: f64 },
    Rect { a: f64, b: f64 },
}

struct Blob {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    kind: ShapeKind,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        let angle = rng.gen_range(0.0..PI);
        let a = rng.gen_range(0.10..0.25) * s;
        let b = rng.gen_range(0.10..0.25) * s;
        let kind = if rng.gen_bool(0.5) {
            ShapeKind::Ellipse { a, b }
        } else {
            ShapeKind::Rect { a: a * 0.85, b: b * 0.85 }
        };
        Self {
            cx: rng.gen_range(0.2..0.8) * s,
            cy: rng.gen_range(0.2..0.8) * s,
            cos: angle.cos(),
            sin: angle.sin(),
            kind,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        match self.kind {
            ShapeKind::Ellipse { a, b } => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeKind::Rect { a, b } => u.abs() <= a && v.abs() <= b,
        }
    }
}

/// Foreground fraction bounds enforced for every generated mask.
pub const MIN_FOREGROUND: f64 = 0.10;
pub const MAX_FOREGROUND: f64 = 0.40;

fn random_mask(rng: &mut ChaCha8Rng, size: usize) -> Vec<bool> {
    loop {
        let count = rng.gen_range(1..=3);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(rng, size)).collect();
        let mask: Vec<bool> = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                blobs.iter().any(|b| b.contains(x, y))
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            return mask;
        }
    }
}

fn segmentation_split(seed: u64, p: &SegmentationParams, split: Split, n: usize) -> (Tensor, Tensor) {
    let mut rng = rng_for(seed, split);
    let noise = Normal::new(0.0, 0.3).expect("valid noise");
    let size = p.size;
    let plane = size * size;
    let mut images = Tensor::zeros(Shape::new(n, CHANNELS, size, size));
    let mut masks = Tensor::zeros(Shape::new(n, 1, size, size));
    for i in 0..n {
        let mask = random_mask(&mut rng, size);
        let theta = rng.gen_range(0.0..PI);
        let w = 2.0 * PI * rng.gen_range(2.0..5.0) / size as f64;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let tex = rng.gen_range(p.texture.0..p.texture.1);
        let lift = if p.lift.1 > p.lift.0 { rng.gen_range(p.lift.0..p.lift.1) } else { p.lift.0 };
        let (ft, fw) = (theta + PI / 2.0, w * 1.6);
        let tint: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(0.7..1.0));
        let base: [f64; CHANNELS] = std::array::from_fn(|_| rng.gen_range(-p.offset..=p.offset));
        let img = &mut images.data_mut()[i * CHANNELS * plane..(i + 1) * CHANNELS * plane];
        for (px, &fg) in mask.iter().enumerate() {
            let (x, y) = ((px % size) as f64, (px / size) as f64);
            let bg = if fg && p.fg_texture {
                tex * (fw * (x * ft.cos() + y * ft.sin()) + phase).cos()
            } else {
                tex * (w * (x * theta.cos() + y * theta.sin()) + phase).cos()
            };
            for ch in 0..CHANNELS {
                let v = base[ch] + bg + if fg { lift * tint[ch] } else { 0.0 } + noise.sample(&mut rng);
                img[ch * plane + px] = v as f32;
            }
        }
        let m = &mut masks.data_mut()[i * plane..(i + 1) * plane];
        for (dst, &fg) in m.iter_mut().zip(&mask) {
            *dst = fg as u8 as f32;
        }
    }
    (images, masks)
}

/// Train and test splits of the shape-segmentation task; test has `n / 4` images.
pub fn gen_segmentation_dataset(seed: u64, n: usize, size: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    gen_segmentation_with(seed, &SegmentationParams::new(n, size))
}

pub fn gen_segmentation_with(seed: u64, p: &SegmentationParams) -> Result<(LabeledDataset, LabeledDataset)> {
    if p.n < 2 || p.n_test < 1 {
        return Err(Error::config("need at least two segmentation samples"));
    }
    if p.size < 8 {
        return Err(Error::config("segmentation images must be at least 8x8"));
    }
    let (mut train_x, train_m) = segmentation_split(seed, p, Split::Train, p.n);
    let (mut test_x, test_m) = segmentation_split(seed, p, Split::Test, p.n_test);
    let (mean, std) = channel_stats(&train_x);
    normalize_channels(&mut train_x, &mean, &std);
    normalize_channels(&mut test_x, &mean, &std);
    let descriptor = DatasetDescriptor::SyntheticSegmentation {
        seed,
        n: p.n,
        size: p.size,
    };
    Ok((
        LabeledDataset::new(train_x, Targets::Masks(train_m), Split::Train, descriptor.clone())?,
        LabeledDataset::new(test_x, Targets::Masks(test_m), Split::Test, descriptor)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::dice;

    #[test]
    fn balanced_labels_and_counts() {
        let (train, test) = gen_classification_dataset(0, 20, 10, 16).unwrap();
        assert_eq!(train.len(), 200);
        assert_eq!(test.len(), 50);
        let Targets::Classes(l) = &train.targets else { panic!() };
        for c in 0..10 {
            assert_eq!(l.iter().filter(|&&v| v == c).count(), 20);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = gen_classification_dataset(7, 4, 10, 16).unwrap();
        let b = gen_classification_dataset(7, 4, 10, 16).unwrap();
        assert_eq!(a, b);
        let c = gen_classification_dataset(8, 4, 10, 16).unwrap();
        assert_ne!(a.0.images, c.0.images);
        let s1 = gen_segmentation_dataset(3, 8, 16).unwrap();
        let s2 = gen_segmentation_dataset(3, 8, 16).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn normalized_scale() {
        let (train, _) = gen_classification_dataset(1, 10, 10, 32).unwrap();
        let (mean, std) = channel_stats(&train.images);
        for k in 0..3 {
            assert!(mean[k].abs() < 1e-4 && (std[k] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn train_and_test_share_no_image() {
        let (train, test) = gen_classification_dataset(2, 5, 10, 16).unwrap();
        for i in 0..test.len() {
            for j in 0..train.len() {
                assert_ne!(test.images.sample(i), train.images.sample(j));
            }
        }
    }

    #[test]
    fn rejects_tiny_requests() {
        assert!(gen_classification_dataset(0, 1, 10, 32).is_err());
        assert!(gen_segmentation_dataset(0, 1, 32).is_err());
    }

    #[test]
    fn mask_fraction_in_range_and_all_foreground_dice() {
        let (train, test) = gen_segmentation_dataset(4, 40, 32).unwrap();
        for ds in [&train, &test] {
            let Targets::Masks(m) = &ds.targets else { panic!() };
            for i in 0..ds.len() {
                let truth: Vec<bool> = m.sample(i).iter().map(|&v| v > 0.5).collect();
                let f = truth.iter().filter(|&&t| t).count() as f64 / truth.len() as f64;
                assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "fraction {f}");
                let all = vec![true; truth.len()];
                assert!((dice(&all, &truth) - 2.0 * f / (f + 1.0)).abs() < 1e-12);
            }
        }
    }

    fn image_means(ds: &LabeledDataset) -> Vec<f64> {
        (0..ds.len())
            .map(|i| {
                let v = ds.images.sample(i);
                v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    /// Best classifier on the global pixel mean: thresholds at train quantiles,
    /// each bin voting its majority train label.
    #[test]
    fn global_mean_is_near_chance() {
        let (train, test) = gen_classification_dataset(0, 200, 10, 32).unwrap();
        let (Targets::Classes(ltr), Targets::Classes(lte)) = (&train.targets, &test.targets) else { panic!() };
        let mtr = image_means(&train);
        let mut sorted = mtr.clone();
        sorted.sort_by(f64::total_cmp);
        for bins in [2usize, 5, 10, 20] {
            let cuts: Vec<f64> = (1..bins).map(|b| sorted[b * sorted.len() / bins]).collect();
            let bin_of = |m: f64| cuts.iter().filter(|&&c| m >= c).count();
            let mut votes = vec![[0usize; 10]; bins];
            for (m, &l) in mtr.iter().zip(ltr) {
                votes[bin_of(*m)][l] += 1;
            }
            let label: Vec<usize> = votes
                .iter()
                .map(|v| (0..10).max_by_key(|&c| (v[c], std::cmp::Reverse(c))).unwrap())
                .collect();
            let hits = image_means(&test)
                .iter()
                .zip(lte)
                .filter(|(m, &l)| label[bin_of(**m)] == l)
                .count();
            let acc = hits as f64 / test.len() as f64;
            assert!(acc < 0.2, "{bins} bins: {acc}");
        }
    }
}
