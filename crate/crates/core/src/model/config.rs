use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Segment,
}

/// Architecture of a small residual network.
///
/// A 3x3 stem maps `input_channels` to `stage_widths[0]`; stage `k` holds
/// `units_per_stage[k]` residual units of width `stage_widths[k]`, and every
/// stage after the first opens with a stride-2 unit with a 1x1 projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetConfig {
    pub stage_widths: Vec<usize>,
    pub units_per_stage: Vec<usize>,
    pub input_channels: usize,
    /// Height and width of the (square) input.
    pub input_size: usize,
    /// Logit channels: classes for `classify`, 1 (foreground) for `segment`.
    pub num_classes: usize,
    pub task: Task,
    pub seed: u64,
    /// Start the second BN of every residual branch at gamma = 0, so each
    /// unit begins as its shortcut.
    #[serde(default = "default_zero_init")]
    pub zero_init_residual: bool,
}

fn default_zero_init() -> bool {
    true
}

impl ResNetConfig {
    /// Stages 8/16/32/64, one unit each, 3x32x32 input, ten classes.
    pub fn desk_classifier(seed: u64) -> Self {
        Self {
            stage_widths: vec![8, 16, 32, 64],
            units_per_stage: vec![1, 1, 1, 1],
            input_channels: 3,
            input_size: 32,
            num_classes: 10,
            task: Task::Classify,
            seed,
            zero_init_residual: true,
        }
    }

    /// Same trunk with the upsampling segmentation head and one foreground logit.
    pub fn desk_segmenter(seed: u64) -> Self {
        Self {
            num_classes: 1,
            task: Task::Segment,
            ..Self::desk_classifier(seed)
        }
    }

    pub fn with_units(mut self, units: &[usize]) -> Self {
        self.units_per_stage = units.to_vec();
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Spatial extent of stage `k`'s output.
    pub fn stage_size(&self, k: usize) -> usize {
        let mut s = self.input_size;
        for _ in 0..k {
            s = (s - 1) / 2 + 1;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage_widths.len();
        if s < 2 {
            return Err(Error::config("need at least two stages"));
        }
        if self.units_per_stage.len() != s {
            return Err(Error::config(format!(
                "{} stage widths but {} unit counts",
                s,
                self.units_per_stage.len()
            )));
        }
        if self.units_per_stage.iter().any(|&u| u == 0) {
            return Err(Error::config("every stage needs at least one unit"));
        }
        if self.stage_widths[0] == 0 || self.stage_widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("stage widths must be positive and strictly increasing"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be positive"));
        }
        if self.input_channels == self.stage_widths[0] {
            return Err(Error::config("stem must change the channel count"));
        }
        if self.stage_size(s - 1) < 2 {
            return Err(Error::config(format!(
                "input size {} too small for {s} stages",
                self.input_size
            )));
        }
        match self.task {
            Task::Classify if self.num_classes < 2 => {
                Err(Error::config("classification needs at least two classes"))
            }
            Task::Segment => {
                if self.num_classes != 1 {
                    return Err(Error::config("segmentation predicts a single foreground logit"));
                }
                if self.input_size % (1 << (s - 1)) != 0 {
                    return Err(Error::config(
                        "segmentation input size must be divisible by 2^(stages-1)",
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}
