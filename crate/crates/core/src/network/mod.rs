//! Segmentation network: shared per-frame encoder, temporal context module
//! and skip-connection decoder.
//!
//! Every frame goes through the same strided-convolution encoder. The deepest
//! map (`N` channels) is projected to `N/2` channels by a shared 1×1
//! convolution. Context and target embeddings are stacked oldest-first into a
//! `(T+1) × N/2 × h × w` volume, reduced over time, and the result is
//! concatenated with the target embedding so the decoder always sees `N`
//! channels. The decoder upsamples and merges the target frame's skip
//! features back to full resolution.

pub mod config;
pub mod ops;
pub mod params;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array3, Array4, ArrayView3, Axis};

pub use config::{Aggregation, NetworkConfig, StageSpec};
pub use params::{Checkpoint, Conv2d, Conv3d, Params};

use crate::datamodel::{SegmentationMask, TemporalSample};
use crate::error::{Error, Result};
use ops::{ConvCache, ConvGeometry};

/// Encoder output at one stage, `channels × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

/// Projected per-frame embedding, `N/2 × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Array3<f64>);

/// Stacked embeddings, `(T+1) × N/2 × h × w`; the target is the last slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVolume(pub Array4<f64>);

/// Temporal module output, `N/2 × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatures(pub Array3<f64>);

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.0.dim().0
    }
}

impl Embedding {
    pub fn channels(&self) -> usize {
        self.0.dim().0
    }
}

impl ContextVolume {
    pub fn time_extent(&self) -> usize {
        self.0.dim().0
    }

    pub fn slice(&self, t: usize) -> ArrayView3<'_, f64> {
        self.0.index_axis(Axis(0), t)
    }
}

/// Stacks `context` (oldest first) and `target` into one volume.
pub fn build_context_volume(context: &[Embedding], target: &Embedding) -> Result<ContextVolume> {
    let dims = target.0.dim();
    if let Some(i) = context.iter().position(|e| e.0.dim() != dims) {
        return Err(Error::Shape(format!(
            "context embedding {i} has shape {:?}, target has {dims:?}",
            context[i].0.dim()
        )));
    }
    let views: Vec<_> = context.iter().chain(std::iter::once(target)).map(|e| e.0.view()).collect();
    let volume = ndarray::stack(Axis(0), &views).expect("shapes checked");
    Ok(ContextVolume(volume))
}

/// One context frame fed to a traced forward pass.
#[derive(Debug, Clone)]
pub enum ContextInput<'a> {
    /// Encoded inside the pass. With `stop_gradient`, the value is used but no
    /// gradient reaches the encoder through this frame.
    Live { image: ArrayView3<'a, f64>, stop_gradient: bool },
    /// Precomputed deepest feature map, treated as a constant.
    Detached(FeatureMap),
}

#[derive(Debug, Clone)]
struct EncoderTrace {
    caches: Vec<ConvCache>,
    outputs: Vec<Array3<f64>>,
}

#[derive(Debug, Clone)]
struct ContextTrace {
    encoder: Option<EncoderTrace>,
    projection: ConvCache,
}

#[derive(Debug, Clone)]
enum AggregationTrace {
    Temporal { cache: ConvCache, output: Array3<f64> },
    Pooled,
}

#[derive(Debug, Clone)]
struct DecoderTrace {
    /// Indexed by decoder level; `(cache, relu output, upsampled channels)`.
    levels: Vec<Option<(ConvCache, Array3<f64>, usize)>>,
    head: ConvCache,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    target: EncoderTrace,
    target_projection: ConvCache,
    context: Vec<ContextTrace>,
    aggregation: AggregationTrace,
    fused: Array3<f64>,
    decoder: DecoderTrace,
    scores: Array3<f64>,
}

impl ForwardTrace {
    /// Class scores, `3 × H × W`.
    pub fn scores(&self) -> &Array3<f64> {
        &self.scores
    }

    /// Decoder input: target embedding concatenated with context features.
    pub fn fused(&self) -> &Array3<f64> {
        &self.fused
    }

    pub fn into_scores(self) -> Array3<f64> {
        self.scores
    }
}

/// Network configuration plus parameters. Forward passes take `&self`; the
/// only interior state is the encoder call counter.
#[derive(Debug)]
pub struct Network {
    cfg: NetworkConfig,
    params: Params,
    encoder_calls: AtomicUsize,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            encoder_calls: AtomicUsize::new(0),
        }
    }
}

impl Network {
    /// Validates `cfg` and that `params` has exactly the layout it requires.
    pub fn new(cfg: NetworkConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let mut expected = Vec::new();
        Params::zeros(&cfg).for_each(|n, s, _| expected.push((n.to_string(), s.to_vec())));
        let mut actual = Vec::new();
        params.for_each(|n, s, _| actual.push((n.to_string(), s.to_vec())));
        if expected != actual {
            return Err(Error::Config("parameter layout does not match the network configuration".into()));
        }
        Ok(Network {
            cfg,
            params,
            encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn init(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = Params::init(&cfg, seed);
        Network::new(cfg, params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        Network::new(ck.config, ck.params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Number of encoder invocations since construction.
    pub fn encoder_invocations(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    fn check_image(&self, image: ArrayView3<'_, f64>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Config(format!("encoder expects 3 input channels, got {c}")));
        }
        self.cfg.check_input(h, w)
    }

    fn run_encoder(&self, image: ArrayView3<'_, f64>) -> Result<EncoderTrace> {
        self.check_image(image)?;
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        let mut caches = Vec::with_capacity(self.params.encoder.len());
        let mut outputs: Vec<Array3<f64>> = Vec::with_capacity(self.params.encoder.len());
        for layer in &self.params.encoder {
            let input = outputs.last().map(|o| o.view()).unwrap_or(image);
            let (mut y, cache) = conv2d(layer, input);
            ops::relu_inplace(&mut y);
            caches.push(cache);
            outputs.push(y);
        }
        Ok(EncoderTrace { caches, outputs })
    }

    /// Encodes one frame. Returns the deepest map (`N` channels) and the
    /// shallower stage outputs used as decoder skips, shallowest first.
    pub fn encode(&self, image: ArrayView3<'_, f64>) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        let mut trace = self.run_encoder(image)?;
        let deepest = trace.outputs.pop().expect("at least one stage");
        Ok((FeatureMap(deepest), trace.outputs.into_iter().map(FeatureMap).collect()))
    }

    /// Shared linear 1×1 projection from `N` to `N/2` channels.
    pub fn project(&self, features: &FeatureMap) -> Result<Embedding> {
        Ok(Embedding(self.project_traced(&features.0)?.0))
    }

    fn project_traced(&self, features: &Array3<f64>) -> Result<(Array3<f64>, ConvCache)> {
        let c = features.dim().0;
        if c != self.cfg.feature_channels {
            return Err(Error::Config(format!(
                "projection expects {} channels, got {c}",
                self.cfg.feature_channels
            )));
        }
        Ok(conv2d(&self.params.projection, features.view()))
    }

    fn check_volume(&self, vol: &ContextVolume) -> Result<()> {
        let (t, c, _, _) = vol.0.dim();
        if t != self.cfg.context_len + 1 {
            return Err(Error::Config(format!(
                "context volume has {t} slices, configured T + 1 = {}",
                self.cfg.context_len + 1
            )));
        }
        if c != self.cfg.embedding_channels() {
            return Err(Error::Config(format!(
                "context volume has {c} channels, expected {}",
                self.cfg.embedding_channels()
            )));
        }
        Ok(())
    }

    fn aggregate_traced(&self, vol: &ContextVolume) -> Result<(Array3<f64>, AggregationTrace)> {
        self.check_volume(vol)?;
        match self.cfg.aggregation {
            Aggregation::Conv3d => {
                let temporal = self.params.temporal.as_ref().expect("conv3d parameters present");
                let (t, c, h, w) = vol.0.dim();
                let stacked = vol.0.view().into_shape_with_order((t * c, h, w)).expect("standard layout");
                let k = temporal.kernel();
                let (mut y, cache) = ops::conv_forward(
                    stacked,
                    temporal.weight_matrix(),
                    temporal.bias.as_slice().expect("standard layout"),
                    ConvGeometry {
                        kernel: k,
                        stride: 1,
                        pad: k / 2,
                    },
                );
                ops::relu_inplace(&mut y);
                Ok((y.clone(), AggregationTrace::Temporal { cache, output: y }))
            }
            Aggregation::AvgPool1x1 => Ok((vol.0.mean_axis(Axis(0)).expect("non-empty"), AggregationTrace::Pooled)),
            Aggregation::AvgPool3x3 => {
                let mean = vol.0.mean_axis(Axis(0)).expect("non-empty");
                Ok((ops::box_mean(mean.view(), 3), AggregationTrace::Pooled))
            }
        }
    }

    /// Reduces the context volume over time into `N/2 × h × w` features.
    pub fn aggregate_temporal(&self, vol: &ContextVolume) -> Result<ContextFeatures> {
        Ok(ContextFeatures(self.aggregate_traced(vol)?.0))
    }

    fn decode_traced(&self, fused: &Array3<f64>, skips: &[&Array3<f64>]) -> Result<(Array3<f64>, DecoderTrace)> {
        let stages = &self.cfg.encoder;
        if skips.len() + 1 != stages.len() {
            return Err(Error::Config(format!(
                "decoder expects {} skip maps, got {}",
                stages.len() - 1,
                skips.len()
            )));
        }
        let mut x = fused.clone();
        let mut levels = vec![None; skips.len()];
        for l in (0..skips.len()).rev() {
            let up = ops::upsample_nearest(x.view(), stages[l + 1].stride);
            let skip = skips[l];
            if skip.dim().0 != stages[l].channels || skip.dim().1 != up.dim().1 || skip.dim().2 != up.dim().2 {
                return Err(Error::Config(format!(
                    "skip {l} has shape {:?}, decoder expects {} x {} x {}",
                    skip.dim(),
                    stages[l].channels,
                    up.dim().1,
                    up.dim().2
                )));
            }
            let up_channels = up.dim().0;
            let cat = ops::concat_channels(up.view(), skip.view());
            let (mut y, cache) = conv2d(&self.params.decoder[l], cat.view());
            ops::relu_inplace(&mut y);
            levels[l] = Some((cache, y.clone(), up_channels));
            x = y;
        }
        let up = ops::upsample_nearest(x.view(), stages[0].stride);
        let (scores, head) = conv2d(&self.params.head, up.view());
        Ok((scores, DecoderTrace { levels, head }))
    }

    /// Concatenates target embedding and context features (`N` channels) and
    /// decodes with the target's skip features to `3 × H × W` class scores.
    pub fn fuse_and_decode(&self, target: &Embedding, ctx: &ContextFeatures, skips: &[FeatureMap]) -> Result<Array3<f64>> {
        if target.0.dim() != ctx.0.dim() {
            return Err(Error::Shape(format!(
                "target embedding {:?} and context features {:?} differ",
                target.0.dim(),
                ctx.0.dim()
            )));
        }
        let fused = ops::concat_channels(target.0.view(), ctx.0.view());
        debug_assert_eq!(fused.dim().0, self.cfg.feature_channels);
        let skips: Vec<&Array3<f64>> = skips.iter().map(|f| &f.0).collect();
        Ok(self.decode_traced(&fused, &skips)?.0)
    }

    fn check_sample(&self, sample: &TemporalSample) -> Result<()> {
        if sample.context.len() != self.cfg.context_len {
            return Err(Error::Config(format!(
                "sample has {} context frames, network expects T = {}",
                sample.context.len(),
                self.cfg.context_len
            )));
        }
        Ok(())
    }

    /// Context features for a sample, before fusion with the target.
    pub fn context_features(&self, sample: &TemporalSample) -> Result<ContextFeatures> {
        self.check_sample(sample)?;
        let (target_feat, _) = self.encode(sample.target.image())?;
        let target = self.project(&target_feat)?;
        let context = sample
            .context
            .iter()
            .map(|f| self.encode(f.image()).and_then(|(feat, _)| self.project(&feat)))
            .collect::<Result<Vec<_>>>()?;
        self.aggregate_temporal(&build_context_volume(&context, &target)?)
    }

    /// Class scores for the sample's target frame, `3 × H × W`.
    pub fn forward(&self, sample: &TemporalSample) -> Result<Array3<f64>> {
        self.check_sample(sample)?;
        let (target_feat, skips) = self.encode(sample.target.image())?;
        let target = self.project(&target_feat)?;
        let context = sample
            .context
            .iter()
            .map(|f| self.encode(f.image()).and_then(|(feat, _)| self.project(&feat)))
            .collect::<Result<Vec<_>>>()?;
        let ctx = self.aggregate_temporal(&build_context_volume(&context, &target)?)?;
        self.fuse_and_decode(&target, &ctx, &skips)
    }

    /// Traced forward pass for training. `context` is oldest first.
    pub fn forward_trace(&self, target: ArrayView3<'_, f64>, context: &[ContextInput<'_>]) -> Result<ForwardTrace> {
        if context.len() != self.cfg.context_len {
            return Err(Error::Config(format!(
                "got {} context inputs, network expects T = {}",
                context.len(),
                self.cfg.context_len
            )));
        }
        let target_trace = self.run_encoder(target)?;
        let target_deepest = target_trace.outputs.last().expect("at least one stage");
        let (target_emb, target_projection) = self.project_traced(target_deepest)?;

        let mut context_traces = Vec::with_capacity(context.len());
        let mut embeddings = Vec::with_capacity(context.len());
        for input in context {
            let (features, encoder) = match input {
                ContextInput::Live { image, stop_gradient } => {
                    if image.dim() != target.dim() {
                        return Err(Error::Shape(format!(
                            "context frame {:?} differs from target {:?}",
                            image.dim(),
                            target.dim()
                        )));
                    }
                    let trace = self.run_encoder(*image)?;
                    let deepest = trace.outputs.last().expect("at least one stage").clone();
                    (deepest, (!*stop_gradient).then_some(trace))
                }
                ContextInput::Detached(f) => {
                    if f.0.dim() != target_deepest.dim() {
                        return Err(Error::Shape(format!(
                            "detached feature map {:?} differs from target {:?}",
                            f.0.dim(),
                            target_deepest.dim()
                        )));
                    }
                    (f.0.clone(), None)
                }
            };
            let (emb, projection) = self.project_traced(&features)?;
            embeddings.push(Embedding(emb));
            context_traces.push(ContextTrace { encoder, projection });
        }

        let target_emb = Embedding(target_emb);
        let volume = build_context_volume(&embeddings, &target_emb)?;
        let (ctx, aggregation) = self.aggregate_traced(&volume)?;
        let fused = ops::concat_channels(target_emb.0.view(), ctx.view());
        let skips: Vec<&Array3<f64>> = target_trace.outputs[..target_trace.outputs.len() - 1].iter().collect();
        let (scores, decoder) = self.decode_traced(&fused, &skips)?;
        Ok(ForwardTrace {
            target: target_trace,
            target_projection,
            context: context_traces,
            aggregation,
            fused,
            decoder,
            scores,
        })
    }

    /// Traced pass with every context frame contributing encoder gradients.
    pub fn full_trace(&self, sample: &TemporalSample) -> Result<ForwardTrace> {
        self.check_sample(sample)?;
        let inputs: Vec<_> = sample
            .context
            .iter()
            .map(|f| ContextInput::Live {
                image: f.image(),
                stop_gradient: false,
            })
            .collect();
        self.forward_trace(sample.target.image(), &inputs)
    }

    /// Traced pass where encoder gradients flow only through the target and
    /// the `grad_context_depth` most recent context frames. Values are
    /// identical to [`Network::forward`].
    pub fn restricted_forward(&self, sample: &TemporalSample, grad_context_depth: usize) -> Result<ForwardTrace> {
        self.check_sample(sample)?;
        let t = sample.context.len();
        let keep_from = t.saturating_sub(grad_context_depth);
        let inputs: Vec<_> = sample
            .context
            .iter()
            .enumerate()
            .map(|(j, f)| ContextInput::Live {
                image: f.image(),
                stop_gradient: j < keep_from,
            })
            .collect();
        self.forward_trace(sample.target.image(), &inputs)
    }

    /// Parameter gradients given `d loss / d scores` and an optional extra
    /// gradient on the fused decoder input.
    pub fn backward(&self, trace: &ForwardTrace, dscores: &Array3<f64>, dfused_extra: Option<&Array3<f64>>) -> Params {
        let mut grads = Params::zeros(&self.cfg);
        let stages = &self.cfg.encoder;
        let n_skips = stages.len() - 1;

        // Decoder, head first.
        let dup = conv2d_backward(
            &self.params.head,
            &trace.decoder.head,
            dscores.view(),
            &mut grads.head,
            true,
        )
        .expect("input grad requested");
        let mut dx = ops::upsample_nearest_backward(dup.view(), stages[0].stride);
        let mut dskips: Vec<Array3<f64>> = Vec::with_capacity(n_skips);
        for l in 0..n_skips {
            let (cache, output, up_channels) = trace.decoder.levels[l].as_ref().expect("decoder level traced");
            ops::relu_backward_inplace(&mut dx, output);
            let dcat = conv2d_backward(&self.params.decoder[l], cache, dx.view(), &mut grads.decoder[l], true)
                .expect("input grad requested");
            let (dup, dskip) = ops::split_channels(dcat.view(), *up_channels);
            dskips.push(dskip);
            dx = ops::upsample_nearest_backward(dup.view(), stages[l + 1].stride);
        }
        let mut dfused = dx;
        if let Some(extra) = dfused_extra {
            dfused += extra;
        }

        // Temporal module.
        let half = self.cfg.embedding_channels();
        let (mut dtarget_emb, dctx) = ops::split_channels(dfused.view(), half);
        let t1 = self.cfg.context_len + 1;
        let (_, h, w) = dctx.dim();
        let dvolume: Array4<f64> = match &trace.aggregation {
            AggregationTrace::Temporal { cache, output } => {
                let temporal = self.params.temporal.as_ref().expect("conv3d parameters present");
                let gtemporal = grads.temporal.as_mut().expect("conv3d gradients present");
                let mut d = dctx;
                ops::relu_backward_inplace(&mut d, output);
                let k = temporal.kernel();
                let (o, tt, i, _, _) = gtemporal.weight.dim();
                let dw = gtemporal
                    .weight
                    .view_mut()
                    .into_shape_with_order((o, tt * i * k * k))
                    .expect("standard layout");
                let dstacked = ops::conv_backward(
                    cache,
                    temporal.weight_matrix(),
                    d.view(),
                    dw,
                    gtemporal.bias.view_mut(),
                    ConvGeometry {
                        kernel: k,
                        stride: 1,
                        pad: k / 2,
                    },
                    true,
                )
                .expect("input grad requested");
                dstacked.into_shape_with_order((t1, half, h, w)).expect("standard layout")
            }
            AggregationTrace::Pooled => {
                let d = match self.cfg.aggregation {
                    Aggregation::AvgPool3x3 => ops::box_mean_backward(dctx.view(), 3),
                    _ => dctx,
                };
                let d = d / t1 as f64;
                let d = d.insert_axis(Axis(0));
                d.broadcast((t1, half, h, w)).expect("broadcast").to_owned()
            }
        };
        dtarget_emb += &dvolume.index_axis(Axis(0), t1 - 1);

        // Context frames: projection always, encoder only where traced.
        for (j, ctx) in trace.context.iter().enumerate() {
            let demb = dvolume.index_axis(Axis(0), j).to_owned();
            let dfeat = conv2d_backward(
                &self.params.projection,
                &ctx.projection,
                demb.view(),
                &mut grads.projection,
                ctx.encoder.is_some(),
            );
            if let (Some(enc), Some(dfeat)) = (&ctx.encoder, dfeat) {
                self.encoder_backward(enc, dfeat, &[], &mut grads);
            }
        }

        // Target frame.
        let dfeat = conv2d_backward(
            &self.params.projection,
            &trace.target_projection,
            dtarget_emb.view(),
            &mut grads.projection,
            true,
        )
        .expect("input grad requested");
        self.encoder_backward(&trace.target, dfeat, &dskips, &mut grads);
        grads
    }

    fn encoder_backward(&self, trace: &EncoderTrace, ddeepest: Array3<f64>, dskips: &[Array3<f64>], grads: &mut Params) {
        let n = self.params.encoder.len();
        let mut d = ddeepest;
        for l in (0..n).rev() {
            if l < n - 1 {
                if let Some(skip) = dskips.get(l) {
                    d += skip;
                }
            }
            ops::relu_backward_inplace(&mut d, &trace.outputs[l]);
            let dx = conv2d_backward(&self.params.encoder[l], &trace.caches[l], d.view(), &mut grads.encoder[l], l > 0);
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

fn conv2d(layer: &Conv2d, x: ArrayView3<'_, f64>) -> (Array3<f64>, ConvCache) {
    ops::conv_forward(
        x,
        layer.weight_matrix(),
        layer.bias.as_slice().expect("standard layout"),
        ConvGeometry {
            kernel: layer.kernel(),
            stride: layer.stride,
            pad: layer.pad,
        },
    )
}

fn conv2d_backward(
    layer: &Conv2d,
    cache: &ConvCache,
    dout: ArrayView3<'_, f64>,
    grad: &mut Conv2d,
    need_input_grad: bool,
) -> Option<Array3<f64>> {
    let (o, i, k, _) = grad.weight.dim();
    let dw = grad.weight.view_mut().into_shape_with_order((o, i * k * k)).expect("standard layout");
    ops::conv_backward(
        cache,
        layer.weight_matrix(),
        dout,
        dw,
        grad.bias.view_mut(),
        ConvGeometry {
            kernel: layer.kernel(),
            stride: layer.stride,
            pad: layer.pad,
        },
        need_input_grad,
    )
}

/// Per-pixel argmax labels of the given scores.
pub fn scores_to_mask(scores: &Array3<f64>) -> SegmentationMask {
    SegmentationMask::from_class_scores(scores.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize, idx: usize) -> Frame {
        Frame::new(Array3::from_shape_fn((3, h, w), |_| rng.random::<f64>()), "t", idx).unwrap()
    }

    fn random_sample(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> TemporalSample {
        let ctx = (0..t).map(|i| random_frame(rng, h, w, i)).collect();
        TemporalSample::new(random_frame(rng, h, w, t), ctx, None).unwrap()
    }

    #[test]
    fn encode_shapes_follow_strides() {
        let cfg = NetworkConfig::with_strides(5, 64, &[2, 2, 2], Aggregation::Conv3d, 3);
        let net = Network::init(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 48, 80, 0);
        let (deep, skips) = net.encode(f.image()).unwrap();
        assert_eq!(deep.0.dim(), (64, 6, 10));
        assert_eq!(skips.len(), 2);
        assert_eq!(skips[0].0.dim(), (16, 24, 40));
        assert_eq!(skips[1].0.dim(), (32, 12, 20));
        let emb = net.project(&deep).unwrap();
        assert_eq!(emb.0.dim(), (32, 6, 10));
    }

    #[test]
    fn encode_rejects_bad_dims() {
        let net = Network::init(NetworkConfig::desk_scale(0, Aggregation::AvgPool1x1), 0).unwrap();
        let img = Array3::zeros((3, 10, 16));
        assert!(matches!(net.encode(img.view()), Err(Error::Config(_))));
    }

    #[test]
    fn projection_rejects_channel_mismatch() {
        let net = Network::init(NetworkConfig::desk_scale(0, Aggregation::AvgPool1x1), 0).unwrap();
        let f = FeatureMap(Array3::zeros((12, 2, 2)));
        assert!(matches!(net.project(&f), Err(Error::Config(_))));
    }

    #[test]
    fn volume_rejects_mismatched_embedding() {
        let a = Embedding(Array3::zeros((4, 2, 2)));
        let b = Embedding(Array3::zeros((4, 2, 3)));
        let err = build_context_volume(&[a.clone(), b], &a).unwrap_err();
        assert!(err.to_string().contains("context embedding 1"), "{err}");
    }

    #[test]
    fn aggregate_rejects_wrong_time_extent() {
        let net = Network::init(NetworkConfig::desk_scale(3, Aggregation::Conv3d), 0).unwrap();
        let vol = ContextVolume(Array4::zeros((3, 8, 2, 2)));
        assert!(matches!(net.aggregate_temporal(&vol), Err(Error::Config(_))));
    }

    #[test]
    fn traced_forward_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for agg in [Aggregation::Conv3d, Aggregation::AvgPool1x1, Aggregation::AvgPool3x3] {
            let net = Network::init(NetworkConfig::with_strides(3, 8, &[2, 2], agg, 3), 5).unwrap();
            let sample = random_sample(&mut rng, 3, 8, 12);
            let plain = net.forward(&sample).unwrap();
            for trace in [net.full_trace(&sample).unwrap(), net.restricted_forward(&sample, 1).unwrap()] {
                assert_eq!(trace.scores(), &plain);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_context_len() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::init(NetworkConfig::with_strides(3, 8, &[2, 2], Aggregation::Conv3d, 3), 5).unwrap();
        let sample = random_sample(&mut rng, 2, 8, 12);
        assert!(matches!(net.forward(&sample), Err(Error::Config(_))));
    }

    #[test]
    fn skip_shape_mismatch_is_config_error() {
        let net = Network::init(NetworkConfig::with_strides(0, 8, &[2, 2], Aggregation::AvgPool1x1, 3), 5).unwrap();
        let emb = Embedding(Array3::zeros((4, 2, 3)));
        let ctx = ContextFeatures(Array3::zeros((4, 2, 3)));
        let bad = FeatureMap(Array3::zeros((4, 5, 5)));
        assert!(matches!(net.fuse_and_decode(&emb, &ctx, &[bad]), Err(Error::Config(_))));
    }

    /// Directional-derivative check of the full backward pass on one random
    /// parameter direction.
    #[test]
    fn backward_matches_directional_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for agg in [Aggregation::Conv3d, Aggregation::AvgPool1x1, Aggregation::AvgPool3x3] {
            let cfg = NetworkConfig::with_strides(2, 8, &[2, 2], agg, 3);
            let net = Network::init(cfg.clone(), 3).unwrap();
            let sample = random_sample(&mut rng, 2, 8, 12);
            let weights = Array3::from_shape_fn((3, 8, 12), |_| rng.random_range(-1.0..1.0));
            let loss = |n: &Network| (n.forward(&sample).unwrap() * &weights).sum();
            let trace = net.full_trace(&sample).unwrap();
            let grads = net.backward(&trace, &weights, None);

            let mut dir = Params::init(&cfg, 99);
            dir.for_each_mut(|name, _, d| {
                if name.ends_with(".bias") {
                    d.iter_mut().for_each(|v| *v = 0.1);
                }
            });
            let analytic: f64 = grads.to_flat().iter().zip(dir.to_flat()).map(|(g, d)| g * d).sum();
            let eps = 1e-6;
            let mut plus = net.clone();
            plus.params_mut().add_scaled(&dir, eps);
            let mut minus = net.clone();
            minus.params_mut().add_scaled(&dir, -eps);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "{agg}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn stop_gradient_leaves_values_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::init(NetworkConfig::with_strides(3, 8, &[2, 2], Aggregation::Conv3d, 3), 1).unwrap();
        let sample = random_sample(&mut rng, 3, 8, 8);
        let a = net.restricted_forward(&sample, 0).unwrap();
        let b = net.full_trace(&sample).unwrap();
        assert_eq!(a.scores(), b.scores());
        assert_eq!(a.fused(), b.fused());
    }
}
