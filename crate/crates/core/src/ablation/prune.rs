use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{BorderMap, Branch, LayerAddress, Model, Shortcut, UnitSlot};
use crate::ops::relu;
use crate::tensor::{Shape, Tensor};

/// Replaces each addressed kernel (and whatever it makes dead) by the stored
/// constant its unit collapses to, so eval outputs match the zero-ablated model.
///
/// conv2 folds the whole branch to a per-channel constant; conv1 alone folds
/// it to a border-aware map; proj folds the shortcut to a per-channel constant.
pub fn fold_and_prune(model: &Model, addresses: &BTreeSet<LayerAddress>) -> Result<Model> {
    let mut per_unit: BTreeMap<(usize, usize), BTreeSet<UnitSlot>> = BTreeMap::new();
    for &a in addresses {
        let LayerAddress::Unit { stage, unit, slot } = a else {
            return Err(Error::UnsupportedTarget(format!("{a} cannot be folded")));
        };
        if model.conv_bn(a).is_none() {
            return Err(Error::config(format!("{a} is not a foldable kernel of this model")));
        }
        per_unit.entry((stage, unit)).or_default().insert(slot);
    }
    let mut out = model.clone();
    for ((stage, unit), slots) in per_unit {
        let size = out.config.stage_size(stage);
        let u = out.unit_mut(stage, unit).expect("checked above");
        if slots.contains(&UnitSlot::Conv2) {
            let Branch::Conv { conv2, .. } = &u.branch else { unreachable!() };
            u.branch = Branch::Constant(conv2.bn.zero_input_response());
        } else if slots.contains(&UnitSlot::Conv1) {
            let Branch::Conv { conv1, conv2 } = &u.branch else { unreachable!() };
            let c1 = conv1.bn.zero_input_response();
            let shape = Shape::new(1, c1.len(), size, size);
            let hidden = relu(&Tensor::from_fn(shape, |i| c1[i / shape.plane()]));
            u.branch = Branch::ConstantMap(BorderMap::from_map(&conv2.forward_eval(&hidden)?)?);
        }
        if slots.contains(&UnitSlot::Proj) {
            let Shortcut::Projection(p) = &u.shortcut else { unreachable!() };
            u.shortcut = Shortcut::Constant(p.bn.zero_input_response());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::oracle::tests::randomized;
    use crate::ablation::{zero_kernels, AblationSpec, Protocol};
    use crate::model::checkpoint::{decode, encode};
    use crate::tensor::max_relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check(m: &Model, targets: &[&str]) {
        let set: BTreeSet<LayerAddress> = targets.iter().map(|t| t.parse().unwrap()).collect();
        let pruned = fold_and_prune(m, &set).unwrap();
        let zeroed = zero_kernels(m, &AblationSpec::new(set.iter().copied(), Protocol::Custom)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(m.input_shape(3), |_| rng.gen_range(-2.0..2.0));
        let err = max_relative_error(pruned.forward_eval(&x).unwrap().data(), zeroed.forward_eval(&x).unwrap().data());
        assert!(err <= 1e-6, "{targets:?}: {err}");
        assert!(pruned.param_count() < m.param_count(), "{targets:?}");
        assert!(!pruned.contains(*set.iter().next().unwrap()));
        // folded models survive a checkpoint round trip
        assert_eq!(decode(&encode(&pruned).unwrap()).unwrap(), pruned);
    }

    #[test]
    fn folds_match_zeroed_models() {
        let m = randomized(4, &[2, 2, 1], false);
        check(&m, &["s0.u1.conv2"]);
        check(&m, &["s0.u1.conv1"]);
        check(&m, &["s0.u1.conv1", "s0.u1.conv2"]);
        check(&m, &["s1.u0.proj"]);
        check(&m, &["s1.u0.conv1", "s1.u0.proj"]);
        check(&m, &["s2.u0.conv1"]);
        check(&m, &["s0.u0.conv2", "s1.u1.conv1", "s2.u0.conv2", "s2.u0.proj"]);
        let seg = randomized(5, &[1, 2, 1], true);
        check(&seg, &["s1.u1.conv1"]);
        check(&seg, &["s2.u0.proj", "s0.u0.conv2"]);
    }

    #[test]
    fn conv2_fold_removes_both_kernels() {
        let m = randomized(1, &[1, 1, 1], false);
        let a: LayerAddress = "s0.u0.conv2".parse().unwrap();
        let pruned = fold_and_prune(&m, &BTreeSet::from([a])).unwrap();
        let k1 = m.kernel("s0.u0.conv1".parse().unwrap()).unwrap().numel();
        let k2 = m.kernel(a).unwrap().numel();
        // both conv-BN pairs go, one constant per channel stays
        assert_eq!(m.param_count() - pruned.param_count(), k1 + k2 + 2 * (2 * 4) - 4);
    }

    #[test]
    fn nothing_to_fold_is_identity() {
        let m = randomized(2, &[1, 1, 1], false);
        assert_eq!(fold_and_prune(&m, &BTreeSet::new()).unwrap(), m);
    }

    #[test]
    fn rejects_stem_and_head() {
        let m = randomized(2, &[1, 1, 1], false);
        for a in [LayerAddress::Stem, LayerAddress::Head(0)] {
            assert!(matches!(
                fold_and_prune(&m, &BTreeSet::from([a])),
                Err(Error::UnsupportedTarget(_))
            ));
        }
        let missing: LayerAddress = "s0.u0.proj".parse().unwrap();
        assert!(matches!(fold_and_prune(&m, &BTreeSet::from([missing])), Err(Error::Config(_))));
    }
}
