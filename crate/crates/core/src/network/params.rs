//! Learnable parameters, their initialization and the checkpoint container.
//!
//! Checkpoints are JSON documents:
//!
//! ```json
//! {"format": "marseg-checkpoint", "version": 1, "config": { ... },
//!  "tensors": [{"name": "encoder.0.weight", "shape": [8, 3, 3, 3], "data": [...]}, ...]}
//! ```
//!
//! Loading rebuilds the parameter layout from the embedded config and rejects
//! any missing, extra or mis-shaped tensor.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array4, Array5, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Aggregation, NetworkConfig};
use crate::datamodel::Label;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "marseg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// 2D convolution weights `out × in × k × k` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn zeros(out: usize, inp: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            weight: Array4::zeros((out, inp, k, k)),
            bias: Array1::zeros(out),
            stride,
            pad: k / 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, i * k * k)).expect("standard layout")
    }
}

/// Temporal convolution weights `out × (T+1) × in × k × k` plus bias.
///
/// The kernel spans the full temporal extent, so the time axis collapses to
/// one output slice without temporal padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub weight: Array5<f64>,
    pub bias: Array1<f64>,
}

impl Conv3d {
    pub fn zeros(out: usize, time: usize, inp: usize, k: usize) -> Self {
        Conv3d {
            weight: Array5::zeros((out, time, inp, k, k)),
            bias: Array1::zeros(out),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().3
    }

    pub fn time_extent(&self) -> usize {
        self.weight.dim().1
    }

    /// Weights flattened to `out × (time·in·k·k)`, matching an im2col over a
    /// volume whose slices are stacked along channels.
    pub fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, t, i, k, _) = self.weight.dim();
        self.weight.view().into_shape_with_order((o, t * i * k * k)).expect("standard layout")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: Vec<Conv2d>,
    pub projection: Conv2d,
    /// Present only for [`Aggregation::Conv3d`].
    pub temporal: Option<Conv3d>,
    /// `decoder[l]` merges the output of encoder stage `l`.
    pub decoder: Vec<Conv2d>,
    pub head: Conv2d,
}

impl Params {
    /// All-zero parameters laid out for `cfg`.
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let mut encoder = Vec::with_capacity(cfg.encoder.len());
        let mut in_ch = 3;
        for stage in &cfg.encoder {
            encoder.push(Conv2d::zeros(stage.channels, in_ch, 3, stage.stride));
            in_ch = stage.channels;
        }
        let n = cfg.feature_channels;
        let projection = Conv2d::zeros(n / 2, n, 1, 1);
        let temporal = (cfg.aggregation == Aggregation::Conv3d)
            .then(|| Conv3d::zeros(n / 2, cfg.context_len + 1, n / 2, cfg.spatial_kernel));
        let decoder = (0..cfg.encoder.len().saturating_sub(1))
            .map(|l| {
                let skip = cfg.encoder[l].channels;
                let from_below = if l + 2 == cfg.encoder.len() { n } else { cfg.decoder_width(l + 1) };
                Conv2d::zeros(cfg.decoder_width(l), skip + from_below, 3, 1)
            })
            .collect();
        let head_in = if cfg.encoder.len() > 1 { cfg.decoder_width(0) } else { n };
        let head = Conv2d::zeros(Label::COUNT, head_in, 3, 1);
        Params {
            encoder,
            projection,
            temporal,
            decoder,
            head,
        }
    }

    /// Seeded uniform fan-in initialization: weights in `±sqrt(6 / fan_in)`,
    /// biases zero.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut params = Params::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.for_each_mut(|name, shape, data| {
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in data.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        });
        params
    }

    fn conv_layers(&self) -> Vec<(String, &Conv2d)> {
        let mut out: Vec<(String, &Conv2d)> = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}"), c));
        }
        out.push(("tcm.projection".into(), &self.projection));
        for (i, c) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}"), c));
        }
        out.push(("head".into(), &self.head));
        out
    }

    /// Visits every tensor as `(name, shape, data)` in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        for (name, c) in self.conv_layers() {
            f(&format!("{name}.weight"), c.weight.shape(), c.weight.as_slice().expect("standard layout"));
            f(&format!("{name}.bias"), c.bias.shape(), c.bias.as_slice().expect("standard layout"));
        }
        if let Some(t) = &self.temporal {
            f("tcm.temporal.weight", t.weight.shape(), t.weight.as_slice().expect("standard layout"));
            f("tcm.temporal.bias", t.bias.shape(), t.bias.as_slice().expect("standard layout"));
        }
    }

    /// Mutable counterpart of [`Params::for_each`], same order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [f64])) {
        let mut visit4 = |name: String, c: &mut Conv2d| {
            let shape = c.weight.shape().to_vec();
            f(&format!("{name}.weight"), &shape, c.weight.as_slice_mut().expect("standard layout"));
            let shape = c.bias.shape().to_vec();
            f(&format!("{name}.bias"), &shape, c.bias.as_slice_mut().expect("standard layout"));
        };
        for (i, c) in self.encoder.iter_mut().enumerate() {
            visit4(format!("encoder.{i}"), c);
        }
        visit4("tcm.projection".into(), &mut self.projection);
        for (i, c) in self.decoder.iter_mut().enumerate() {
            visit4(format!("decoder.{i}"), c);
        }
        visit4("head".into(), &mut self.head);
        if let Some(t) = &mut self.temporal {
            let shape = t.weight.shape().to_vec();
            f("tcm.temporal.weight", &shape, t.weight.as_slice_mut().expect("standard layout"));
            let shape = t.bias.shape().to_vec();
            f("tcm.temporal.bias", &shape, t.bias.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, d| n += d.len());
        n
    }

    /// Flat copy of every tensor in visiting order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.for_each(|_, _, d| out.extend_from_slice(d));
        out
    }

    /// `self += scale * other`; both must share a layout.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_mut(|_, _, d| {
            let len = d.len();
            for (v, o) in d.iter_mut().zip(&flat[offset..offset + len]) {
                *v += scale * o;
            }
            offset += len;
        });
        assert_eq!(offset, flat.len(), "parameter layouts differ");
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, _, d| d.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0;
        self.for_each(|_, _, d| acc += d.iter().map(|v| v * v).sum::<f64>());
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    config: NetworkConfig,
    tensors: Vec<TensorRecord>,
}

/// A configuration plus parameters that fit it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Params,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut tensors = Vec::new();
        self.params.for_each(|name, shape, data| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        let record = CheckpointRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        serde_json::to_string(&record).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: CheckpointRecord = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if record.format != CHECKPOINT_FORMAT || record.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                record.format, record.version
            )));
        }
        record.config.validate()?;
        let mut params = Params::zeros(&record.config);
        let mut expected = 0;
        let mut failure = None;
        params.for_each_mut(|name, shape, data| {
            expected += 1;
            if failure.is_some() {
                return;
            }
            match record.tensors.iter().find(|t| t.name == name) {
                None => failure = Some(format!("missing tensor {name}")),
                Some(t) if t.shape != shape || t.data.len() != data.len() => {
                    failure = Some(format!("tensor {name} has shape {:?}, config requires {shape:?}", t.shape))
                }
                Some(t) => data.copy_from_slice(&t.data),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Data(msg));
        }
        if record.tensors.len() != expected {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors, config requires {expected}",
                record.tensors.len()
            )));
        }
        Ok(Checkpoint {
            config: record.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_follows_config() {
        let cfg = NetworkConfig::with_strides(5, 64, &[2, 2, 2], Aggregation::Conv3d, 3);
        let p = Params::zeros(&cfg);
        assert_eq!(p.projection.weight.dim(), (32, 64, 1, 1));
        assert_eq!(p.temporal.as_ref().unwrap().weight.dim(), (32, 6, 32, 3, 3));
        assert_eq!(p.decoder.len(), 2);
        assert_eq!(p.decoder[1].weight.dim(), (64, 32 + 64, 3, 3));
        assert_eq!(p.decoder[0].weight.dim(), (32, 16 + 64, 3, 3));
        assert_eq!(p.head.weight.dim(), (3, 32, 3, 3));

        let pooled = NetworkConfig::with_strides(5, 64, &[2, 2, 2], Aggregation::AvgPool1x1, 3);
        assert!(Params::zeros(&pooled).temporal.is_none());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = NetworkConfig::desk_scale(2, Aggregation::Conv3d);
        assert_eq!(Params::init(&cfg, 7), Params::init(&cfg, 7));
        assert_ne!(Params::init(&cfg, 7), Params::init(&cfg, 8));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = NetworkConfig::desk_scale(3, Aggregation::Conv3d);
        let ck = Checkpoint {
            params: Params::init(&cfg, 1),
            config: cfg,
        };
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let cfg = NetworkConfig::desk_scale(3, Aggregation::Conv3d);
        let ck = Checkpoint {
            params: Params::init(&cfg, 1),
            config: cfg,
        };
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        v["config"]["context_len"] = serde_json::json!(4);
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("tcm.temporal.weight"), "{err}");
    }
}
