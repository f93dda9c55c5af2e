//! Streaming inference with a buffer of the `T` most recent frame embeddings.
//!
//! Each step encodes and projects only the new frame. The buffer is read as
//! the context *before* the new embedding is pushed, so the current frame
//! enters the volume only as the target slice. On the first frame the buffer
//! is filled with `T` copies of that frame's embedding.
//!
//! With `T = 2` and frames `f1, f2, f3`:
//!
//! | step | context read | buffer after push |
//! |------|--------------|-------------------|
//! | f1   | `[e1, e1]`   | `[e1, e1]`        |
//! | f2   | `[e1, e1]`   | `[e1, e2]`        |
//! | f3   | `[e1, e2]`   | `[e2, e3]`        |
//!
//! Decoder skips always come from the current frame; only projected
//! embeddings are buffered.

use std::collections::VecDeque;
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Frame, SegmentationMask};
use crate::error::{Error, Result};
use crate::network::{build_context_volume, Embedding, Network};

/// Fixed-length FIFO of embeddings, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBuffer {
    slots: VecDeque<Embedding>,
    capacity: usize,
}

impl EmbeddingBuffer {
    /// `capacity` copies of `first`.
    pub fn init(first: &Embedding, capacity: usize) -> Self {
        EmbeddingBuffer {
            slots: std::iter::repeat_n(first.clone(), capacity).collect(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> impl Iterator<Item = &Embedding> {
        self.slots.iter()
    }

    pub fn to_vec(&self) -> Vec<Embedding> {
        self.slots.iter().cloned().collect()
    }

    /// Appends `e` and evicts the oldest slot. A zero-capacity buffer stays empty.
    pub fn push(&mut self, e: Embedding) {
        if self.capacity == 0 {
            return;
        }
        self.slots.pop_front();
        self.slots.push_back(e);
    }
}

/// Output of one streaming step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub mask: SegmentationMask,
    pub scores: Array3<f64>,
}

/// Per-video streaming state. One engine per stream; steps are strictly
/// ordered. Engines over different streams may share one [`Network`].
#[derive(Debug)]
pub struct StreamEngine<'a> {
    net: &'a Network,
    buffer: Option<EmbeddingBuffer>,
    frame_dims: Option<(usize, usize)>,
    encoder_calls: usize,
    steps: usize,
}

impl<'a> StreamEngine<'a> {
    pub fn new(net: &'a Network) -> Self {
        StreamEngine {
            net,
            buffer: None,
            frame_dims: None,
            encoder_calls: 0,
            steps: 0,
        }
    }

    pub fn buffer(&self) -> Option<&EmbeddingBuffer> {
        self.buffer.as_ref()
    }

    /// Encoder invocations made by this engine.
    pub fn encoder_invocations(&self) -> usize {
        self.encoder_calls
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, frame: &Frame) -> Result<StepOutput> {
        match self.frame_dims {
            Some(d) if d != frame.dims() => {
                return Err(Error::Stream(format!(
                    "frame {} is {:?}, stream started at {d:?}",
                    frame.frame_index,
                    frame.dims()
                )))
            }
            _ => self.frame_dims = Some(frame.dims()),
        }
        let (features, skips) = self.net.encode(frame.image())?;
        self.encoder_calls += 1;
        let target = self.net.project(&features)?;
        let t = self.net.config().context_len;
        let buffer = self.buffer.get_or_insert_with(|| EmbeddingBuffer::init(&target, t));
        let context = buffer.to_vec();
        let volume = build_context_volume(&context, &target)?;
        let ctx = self.net.aggregate_temporal(&volume)?;
        let scores = self.net.fuse_and_decode(&target, &ctx, &skips)?;
        buffer.push(target);
        self.steps += 1;
        Ok(StepOutput {
            mask: SegmentationMask::from_class_scores(scores.view()),
            scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub frame_index: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub masks: Vec<SegmentationMask>,
    pub timings: Vec<FrameTiming>,
    pub encoder_invocations: usize,
}

impl SequenceOutput {
    /// Mean per-frame time, excluding the first (warm-up) frame when possible.
    pub fn mean_seconds_after_warmup(&self) -> f64 {
        let t = if self.timings.len() > 1 {
            &self.timings[1..]
        } else {
            &self.timings[..]
        };
        t.iter().map(|r| r.seconds).sum::<f64>() / t.len().max(1) as f64
    }
}

/// Streams `frames` through a fresh engine.
pub fn run_sequence(net: &Network, frames: &[Frame]) -> Result<SequenceOutput> {
    if frames.is_empty() {
        return Err(Error::Stream("empty frame sequence".into()));
    }
    let mut engine = StreamEngine::new(net);
    let mut masks = Vec::with_capacity(frames.len());
    let mut timings = Vec::with_capacity(frames.len());
    for f in frames {
        let start = Instant::now();
        let out = engine.step(f)?;
        timings.push(FrameTiming {
            frame_index: f.frame_index,
            seconds: start.elapsed().as_secs_f64(),
        });
        masks.push(out.mask);
    }
    Ok(SequenceOutput {
        masks,
        timings,
        encoder_invocations: engine.encoder_invocations(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Aggregation, NetworkConfig};

    fn emb(v: f64) -> Embedding {
        Embedding(Array3::from_elem((2, 1, 1), v))
    }

    #[test]
    fn init_fills_with_copies() {
        let b = EmbeddingBuffer::init(&emb(1.0), 5);
        assert_eq!(b.len(), 5);
        assert!(b.slots().all(|e| *e == emb(1.0)));
        assert!(EmbeddingBuffer::init(&emb(1.0), 0).is_empty());
        assert_eq!(EmbeddingBuffer::init(&emb(1.0), 1).to_vec(), vec![emb(1.0)]);
    }

    #[test]
    fn push_evicts_oldest() {
        let mut b = EmbeddingBuffer::init(&emb(1.0), 2);
        b.push(emb(1.0));
        assert_eq!(b.to_vec(), vec![emb(1.0), emb(1.0)]);
        b.push(emb(2.0));
        assert_eq!(b.to_vec(), vec![emb(1.0), emb(2.0)]);
        b.push(emb(3.0));
        assert_eq!(b.to_vec(), vec![emb(2.0), emb(3.0)]);
        let mut z = EmbeddingBuffer::init(&emb(1.0), 0);
        z.push(emb(2.0));
        assert!(z.is_empty());
    }

    #[test]
    fn stream_rejects_resolution_change() {
        let net = Network::init(NetworkConfig::with_strides(1, 8, &[2, 2], Aggregation::Conv3d, 3), 0).unwrap();
        let mut engine = StreamEngine::new(&net);
        let a = Frame::new(Array3::from_elem((3, 8, 8), 0.5), "s", 0).unwrap();
        let b = Frame::new(Array3::from_elem((3, 8, 12), 0.5), "s", 1).unwrap();
        engine.step(&a).unwrap();
        assert!(matches!(engine.step(&b), Err(Error::Stream(_))));
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let net = Network::init(NetworkConfig::with_strides(1, 8, &[2, 2], Aggregation::Conv3d, 3), 0).unwrap();
        assert!(run_sequence(&net, &[]).is_err());
    }
}
