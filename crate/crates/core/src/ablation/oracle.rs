use crate::error::{Error, Result};
use crate::model::{Branch, LayerAddress, Model, ResidualUnit, Shortcut, UnitSlot};
use crate::ops::relu;
use crate::tensor::{Shape, Tensor};

fn per_channel(values: &[f32], shape: Shape) -> Tensor {
    let c = values.len();
    Tensor::from_fn(shape, |i| values[(i / shape.plane()) % c])
}

/// Unit output with `slot` replaced by its closed form. A zero kernel makes
/// the following eval-mode batch norm emit its shift `beta - scale * mean`,
/// whatever the input.
fn collapsed_unit(unit: &ResidualUnit, x: &Tensor, slot: UnitSlot) -> Result<Tensor> {
    let o = unit.output_shape(x.shape())?;
    let missing = || Error::config(format!("unit has no {} kernel", slot.as_str()));
    match slot {
        UnitSlot::Conv1 => {
            let Branch::Conv { conv1, conv2 } = &unit.branch else {
                return Err(missing());
            };
            let hidden = relu(&per_channel(&conv1.bn.zero_input_response(), o));
            let branch = conv2.forward_eval(&hidden)?;
            Ok(relu(&unit.shortcut_eval(x)?.add(&branch)?))
        }
        UnitSlot::Conv2 => {
            let Branch::Conv { conv2, .. } = &unit.branch else {
                return Err(missing());
            };
            let c2 = per_channel(&conv2.bn.zero_input_response(), o);
            Ok(relu(&unit.shortcut_eval(x)?.add(&c2)?))
        }
        UnitSlot::Proj => {
            let Shortcut::Projection(p) = &unit.shortcut else {
                return Err(missing());
            };
            let c3 = per_channel(&p.bn.zero_input_response(), o);
            Ok(relu(&c3.add(&unit.branch_eval(x)?)?))
        }
    }
}

/// Eval-mode forward of `model` as if `target` were zeroed, computed from the
/// closed form of the collapsed unit rather than by convolving with zeros.
pub fn analytic_ablated_forward(model: &Model, x: &Tensor, target: LayerAddress) -> Result<Tensor> {
    let LayerAddress::Unit { stage, unit, slot } = target else {
        return Err(Error::UnsupportedTarget(format!("{target} has no closed-form collapse")));
    };
    if model.unit(stage, unit).is_none() {
        return Err(Error::config(format!("{target} is not in this model")));
    }
    model.check_input(x)?;
    let mut h = model.stem_eval(x)?;
    for (k, units) in model.stages.iter().enumerate() {
        for (u, ru) in units.iter().enumerate() {
            h = if (k, u) == (stage, unit) {
                collapsed_unit(ru, &h, slot)?
            } else {
                ru.forward_eval(&h)?
            };
        }
    }
    model.head.forward_eval(&h)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ablation::{zero_kernels, AblationSpec, Protocol};
    use crate::model::ResNetConfig;
    use crate::tensor::max_relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Model with non-trivial running statistics so the collapsed constants are not just beta.
    pub(crate) fn randomized(seed: u64, units: &[usize], segment: bool) -> Model {
        let base = if segment {
            ResNetConfig::desk_segmenter(seed)
        } else {
            ResNetConfig::desk_classifier(seed)
        };
        let cfg = ResNetConfig {
            stage_widths: vec![4, 6, 8],
            units_per_stage: units.to_vec(),
            input_size: 8,
            ..base
        };
        let mut m = Model::build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for l in m.layers() {
            if let Some(k) = m.kernel_mut(l.address) {
                k.weights.iter_mut().for_each(|w| *w *= rng.gen_range(0.5..1.5));
            }
        }
        randomize_bn(&mut m, &mut rng);
        m
    }

    fn randomize_bn(m: &mut Model, rng: &mut ChaCha8Rng) {
        let addrs: Vec<_> = m.layers().iter().map(|l| l.address).collect();
        for a in addrs {
            let Some(cb) = m.conv_bn_mut(a) else { continue };
            let bn = &mut cb.bn;
            for k in 0..bn.channels() {
                bn.gamma[k] = rng.gen_range(0.5..1.5);
                bn.beta[k] = rng.gen_range(-0.5..0.5);
                bn.running_mean[k] = rng.gen_range(-0.5..0.5);
                bn.running_var[k] = rng.gen_range(0.5..2.0);
            }
        }
    }

    #[test]
    fn matches_zeroed_forward() {
        for seed in 0..4 {
            let m = randomized(seed, &[1, 2, 1], seed % 2 == 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(m.input_shape(2), |_| rng.gen_range(-2.0..2.0));
            for l in m.layers() {
                if !matches!(l.address, LayerAddress::Unit { .. }) {
                    continue;
                }
                let z = zero_kernels(&m, &AblationSpec::single(l.address, Protocol::Custom)).unwrap();
                let want = z.forward_eval(&x).unwrap();
                let got = analytic_ablated_forward(&m, &x, l.address).unwrap();
                let err = max_relative_error(got.data(), want.data());
                assert!(err <= 1e-5, "{}: {err}", l.address);
            }
        }
    }

    #[test]
    fn identity_conv2_collapse_is_input_independent_shift() {
        let m = randomized(9, &[2, 1, 1], false);
        let u = m.unit(0, 1).unwrap();
        let Branch::Conv { conv2, .. } = &u.branch else { panic!() };
        let c = conv2.bn.zero_input_response();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(Shape::new(1, 4, 8, 8), |_| rng.gen_range(-1.0..1.0));
        let y = collapsed_unit(u, &x, UnitSlot::Conv2).unwrap();
        for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
            assert_eq!(yv, (xv + c[i / 64]).max(0.0));
        }
    }

    #[test]
    fn stem_and_head_are_unsupported() {
        let m = randomized(0, &[1, 1, 1], false);
        let x = Tensor::zeros(m.input_shape(1));
        for a in [LayerAddress::Stem, LayerAddress::Head(0)] {
            assert!(matches!(
                analytic_ablated_forward(&m, &x, a),
                Err(Error::UnsupportedTarget(_))
            ));
        }
        let missing = LayerAddress::unit(0, 0, UnitSlot::Proj);
        assert!(matches!(analytic_ablated_forward(&m, &x, missing), Err(Error::Config(_))));
    }
}
