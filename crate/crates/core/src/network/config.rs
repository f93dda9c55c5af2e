use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::Label;
use crate::error::{Error, Result};

/// How the context volume is reduced over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    /// Learned `(T+1) × k × k` convolution followed by a ReLU.
    #[serde(rename = "conv3d")]
    Conv3d,
    /// Parameter-free mean over the temporal axis.
    #[serde(rename = "avgpool1")]
    AvgPool1x1,
    /// Mean over the temporal axis and a zero-padded 3×3 neighborhood.
    #[serde(rename = "avgpool3")]
    AvgPool3x3,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Conv3d => "conv3d",
            Aggregation::AvgPool1x1 => "avgpool1",
            Aggregation::AvgPool3x3 => "avgpool3",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv3d" => Ok(Aggregation::Conv3d),
            "avgpool1" => Ok(Aggregation::AvgPool1x1),
            "avgpool3" => Ok(Aggregation::AvgPool3x3),
            other => Err(Error::Config(format!(
                "unknown aggregation '{other}' (expected conv3d, avgpool1 or avgpool3)"
            ))),
        }
    }
}

/// One strided 3×3 convolution + ReLU stage of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of context frames `T`.
    pub context_len: usize,
    /// Channel count `N` of the deepest encoder map; must be even.
    pub feature_channels: usize,
    pub encoder: Vec<StageSpec>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub aggregation: Aggregation,
    /// Spatial kernel of the temporal convolution; ignored by the pooling variants.
    #[serde(default = "default_kernel")]
    pub spatial_kernel: usize,
}

fn default_classes() -> usize {
    Label::COUNT
}

fn default_kernel() -> usize {
    3
}

impl NetworkConfig {
    /// Encoder of `strides.len()` stages whose channel counts double up to `n`.
    pub fn with_strides(context_len: usize, n: usize, strides: &[usize], aggregation: Aggregation, spatial_kernel: usize) -> Self {
        let k = strides.len();
        let encoder = strides
            .iter()
            .enumerate()
            .map(|(i, &stride)| StageSpec {
                channels: (n >> (k - 1 - i)).max(2),
                stride,
            })
            .collect();
        NetworkConfig {
            context_len,
            feature_channels: n,
            encoder,
            num_classes: Label::COUNT,
            aggregation,
            spatial_kernel,
        }
    }

    /// Output channels of the decoder level that merges encoder stage `l`:
    /// twice the skip width.
    pub fn decoder_width(&self, l: usize) -> usize {
        2 * self.encoder[l].channels
    }

    /// Small default used by the tests and the synthetic experiments.
    pub fn desk_scale(context_len: usize, aggregation: Aggregation) -> Self {
        NetworkConfig::with_strides(context_len, 16, &[2, 2], aggregation, 3)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.feature_channels;
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::Config(format!("feature channel count N must be even and positive, got {n}")));
        }
        let last = self
            .encoder
            .last()
            .ok_or_else(|| Error::Config("encoder needs at least one stage".into()))?;
        if last.channels != n {
            return Err(Error::Config(format!(
                "deepest encoder stage has {} channels but N = {n}",
                last.channels
            )));
        }
        if let Some(s) = self.encoder.iter().find(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::Config(format!("invalid encoder stage {s:?}")));
        }
        if self.num_classes != Label::COUNT {
            return Err(Error::Config(format!("num_classes must be {}, got {}", Label::COUNT, self.num_classes)));
        }
        if ![1, 3, 5].contains(&self.spatial_kernel) {
            return Err(Error::Config(format!(
                "spatial kernel must be 1, 3 or 5, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }

    pub fn embedding_channels(&self) -> usize {
        self.feature_channels / 2
    }

    pub fn total_stride(&self) -> usize {
        self.encoder.iter().map(|s| s.stride).product()
    }

    /// Fails unless both dims divide evenly by the total encoder stride.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let s = self.total_stride();
        if height == 0 || width == 0 || !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "input {height} x {width} is not divisible by the total encoder stride {s}"
            )));
        }
        Ok(())
    }

    /// Spatial size of the deepest feature map for a given input size.
    pub fn feature_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let s = self.total_stride();
        (height / s, width / s)
    }
}
