//! The span classifier: two 3×3 convolution layers over the multi-channel
//! attention crop, masked global average pooling and a logistic output.
//!
//! Crops of different sizes share one `k_max × k_max` grid. Cells outside
//! the `k × k` crop are zero and masked after every layer, so computing on
//! the crop with a zero border is exact and the grid size never changes
//! an output. Pooling averages over the `k²` valid cells only.
//!
//! Parameters are stored as `f32` (the checkpoint representation); all
//! arithmetic runs in `f64`.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Architecture, Checkpoint,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use net::{forward_logit, loss_and_gradients, Example, Trace};
pub use train::{
    build_examples, split_documents, train, train_step, train_with_validator, AdamState,
    EarlyStopping, EpochReport, FeatureSet, TrainOutcome, ValidationMetrics,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attnfeat::SpanFeature;
use crate::error::{Error, Result};

/// Filters per convolution layer.
pub const CONV_CHANNELS: usize = 32;
/// Square kernel side.
pub const KERNEL: usize = 3;

pub const BLOCK_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "out.weight",
    "out.bias",
];

/// The six parameter blocks, generic over storage precision.
///
/// Layouts: `conv1_w[f][c][dy][dx]`, `conv2_w[f][g][dy][dx]`, `out_w[f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks<T> {
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub out_w: Vec<T>,
    pub out_b: Vec<T>,
}

impl<T: Copy> Blocks<T> {
    pub fn filled(input_channels: usize, value: T) -> Self {
        Blocks {
            conv1_w: vec![value; CONV_CHANNELS * input_channels * KERNEL * KERNEL],
            conv1_b: vec![value; CONV_CHANNELS],
            conv2_w: vec![value; CONV_CHANNELS * CONV_CHANNELS * KERNEL * KERNEL],
            conv2_b: vec![value; CONV_CHANNELS],
            out_w: vec![value; CONV_CHANNELS],
            out_b: vec![value; 1],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Vec<T>)> {
        BLOCK_NAMES.into_iter().zip([
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.out_w,
            &self.out_b,
        ])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Vec<T>)> {
        BLOCK_NAMES.into_iter().zip([
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.out_w,
            &mut self.out_b,
        ])
    }

    pub fn len(&self) -> usize {
        self.iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U + Copy) -> Blocks<U> {
        let m = |v: &Vec<T>| v.iter().copied().map(f).collect();
        Blocks {
            conv1_w: m(&self.conv1_w),
            conv1_b: m(&self.conv1_b),
            conv2_w: m(&self.conv2_w),
            conv2_b: m(&self.conv2_b),
            out_w: m(&self.out_w),
            out_b: m(&self.out_b),
        }
    }
}

/// Classifier parameters plus the dimensions they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub input_channels: usize,
    pub k_max: usize,
    pub blocks: Blocks<f32>,
}

impl ModelParams {
    pub fn zeros(input_channels: usize, k_max: usize) -> Self {
        ModelParams {
            input_channels,
            k_max,
            blocks: Blocks::filled(input_channels, 0.0),
        }
    }

    /// Uniform `±sqrt(6 / fan_in)` weights and zero biases.
    pub fn init(input_channels: usize, k_max: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(input_channels, k_max);
        let mut fill = |v: &mut Vec<f32>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in v.iter_mut() {
                *w = rng.random_range(-bound..bound) as f32;
            }
        };
        fill(&mut p.blocks.conv1_w, input_channels * KERNEL * KERNEL);
        fill(&mut p.blocks.conv2_w, CONV_CHANNELS * KERNEL * KERNEL);
        fill(&mut p.blocks.out_w, CONV_CHANNELS);
        p
    }

    pub fn param_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, block) in self.blocks.iter() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    pub(crate) fn check_feature(&self, feature: &SpanFeature) -> Result<()> {
        if feature.channels != self.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "feature has {} channels, model expects {}",
                feature.channels, self.input_channels
            )));
        }
        if feature.size < 2 || feature.size > self.k_max {
            return Err(Error::ShapeMismatch(format!(
                "span length {} outside 2..={}",
                feature.size, self.k_max
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability and logit for one span feature.
pub fn forward(params: &ModelParams, feature: &SpanFeature) -> Result<(f64, f64)> {
    params.check_feature(feature)?;
    let logit = forward_logit(&params.blocks, params.input_channels, feature);
    Ok((sigmoid(logit), logit))
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub k_max: usize,
    pub decision_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 128,
            max_epochs: 50,
            validation_fraction: 0.10,
            seed: 0,
            k_max: 6,
            decision_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        // Written negated so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.k_max < 2 {
            return bad(format!("k_max must be at least 2, got {}", self.k_max));
        }
        Ok(())
    }
}
