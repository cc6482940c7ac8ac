//! Residual network construction, introspection and checkpoints.

pub mod address;
pub mod checkpoint;
pub mod config;
pub mod resnet;

pub use address::{LayerAddress, UnitSlot};
pub use checkpoint::{fingerprint, load_checkpoint, save_checkpoint};
pub use config::{ResNetConfig, Task};
pub use resnet::{
    BorderMap, Branch, ConvBn, Grads, Head, LayerInfo, Model, ResidualUnit, SegHead, Shortcut, Trace,
};

use crate::error::Result;

pub fn build_model(config: &ResNetConfig) -> Result<Model> {
    Model::build(config)
}

/// Every kernel in forward order.
pub fn list_layers(model: &Model) -> Vec<LayerInfo> {
    model.layers()
}

/// Kernels of one stage: the run of layers sharing a channel width.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBlock {
    pub stage: usize,
    pub members: Vec<LayerAddress>,
}

impl LayerBlock {
    /// One-based label as used in block-level result tables.
    pub fn label(&self) -> String {
        format!("Layer block {}", self.stage + 1)
    }
}

/// One block per stage holding that stage's conv1/conv2/proj addresses.
pub fn partition_layer_blocks(model: &Model) -> Vec<LayerBlock> {
    let mut blocks: Vec<LayerBlock> = (0..model.stages.len())
        .map(|stage| LayerBlock {
            stage,
            members: Vec::new(),
        })
        .collect();
    for info in model.layers() {
        if let Some(stage) = info.address.stage() {
            blocks[stage].members.push(info.address);
        }
    }
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn blocks_partition_non_stem_non_head() {
        let m = build_model(&ResNetConfig::desk_classifier(0).with_units(&[1, 2, 1, 3])).unwrap();
        let blocks = partition_layer_blocks(&m);
        assert_eq!(blocks.len(), 4);
        assert_eq!(blocks[0].members.len(), 2);
        assert_eq!(blocks[1].members.len(), 5);
        assert_eq!(blocks[2].members.len(), 3);
        let mut union = BTreeSet::new();
        for b in &blocks {
            for a in &b.members {
                assert!(union.insert(*a), "{a} in two blocks");
            }
        }
        union.insert(LayerAddress::Stem);
        union.insert(LayerAddress::Head(0));
        let all: BTreeSet<_> = list_layers(&m).iter().map(|l| l.address).collect();
        assert_eq!(union, all);
    }

    #[test]
    fn single_unit_projection_block_has_three_members() {
        let m = build_model(&ResNetConfig::desk_classifier(0)).unwrap();
        let blocks = partition_layer_blocks(&m);
        assert_eq!(blocks[2].members.len(), 3);
        assert_eq!(blocks[3].label(), "Layer block 4");
    }
}
