//! Deterministic synthetic maritime sequences with exact ground truth.
//!
//! A scene is a static sky and shore band above the water line, and moving
//! water below it. Objects are static textured patches resting in the water.
//! Below each object sits a mirrored copy of its texture that is re-warped
//! every frame by a row-wise sinusoidal displacement. Ghost patches are
//! free-floating reflections: fixed footprint, object-like texture, warped
//! every frame. A single frame cannot tell a ghost from an object; the
//! temporal behaviour can. Glitter specks flicker on the water.
//!
//! Reflections, ghosts and glitter are labeled water. The water edge is the
//! shore line and the danger zone is the bottom [`DANGER_BAND`] of the image.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    context_indices, write_manifest, BoundingBox, CorpusManifest, Frame, FrameAnnotation, Label, ManifestEntry,
    SegmentationMask, Subset, TemporalSample,
};
use crate::error::{Error, Result};

/// Fraction of image rows, counted from the bottom, inside the danger zone.
pub const DANGER_BAND: f64 = 0.4;

/// File name of the manifest written by [`emit_corpus`].
pub const MANIFEST_FILE: &str = "manifest.tsv";

const SKY: [f64; 3] = [0.62, 0.74, 0.9];
const SHORE: [f64; 3] = [0.22, 0.3, 0.18];
const WATER: [f64; 3] = [0.12, 0.28, 0.42];
const GLITTER: [f64; 3] = [0.97, 0.97, 0.92];
const WAVE_AMPLITUDE: f64 = 0.04;
const SENSOR_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Rect,
    Ellipse,
}

fn default_texture_scale() -> u32 {
    2
}

/// A static obstacle. `(x, y)` is the top-left corner of its extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    #[serde(default)]
    pub shape: Shape,
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub color: [f64; 3],
    /// Side of the square texture blocks, pixels.
    #[serde(default = "default_texture_scale")]
    pub texture_scale: u32,
    /// Reflection strength below this object; the scene default when absent.
    #[serde(default)]
    pub reflection: Option<f64>,
}

/// A free-floating reflection patch, labeled water.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhostSpec {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub color: [f64; 3],
    #[serde(default = "default_texture_scale")]
    pub texture_scale: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectionParams {
    /// Peak horizontal displacement, pixels.
    pub amplitude: f64,
    /// Cycles per frame.
    pub temporal_frequency: f64,
    /// Rows per spatial cycle.
    pub wavelength: f64,
    /// Blend weight of the mirrored texture over the water.
    pub strength: f64,
}

impl Default for ReflectionParams {
    fn default() -> Self {
        ReflectionParams {
            amplitude: 2.0,
            temporal_frequency: 0.2,
            wavelength: 6.0,
            strength: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlitterParams {
    /// Specks per water pixel.
    pub density: f64,
    /// Probability that a speck jumps to a new position each frame.
    pub flicker_rate: f64,
}

impl Default for GlitterParams {
    fn default() -> Self {
        GlitterParams {
            density: 0.004,
            flicker_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Sequence id; `scene<seed>` when absent.
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// First shore row; rows above are sky.
    pub shore_top: usize,
    /// First water row.
    pub horizon: usize,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub ghosts: Vec<GhostSpec>,
    #[serde(default)]
    pub reflection: ReflectionParams,
    #[serde(default)]
    pub glitter: GlitterParams,
    /// Tags the sequence as extension rather than base.
    #[serde(default)]
    pub reflection_heavy: bool,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn separated_from(&self, o: &Rect) -> bool {
        self.x + self.w < o.x || o.x + o.w < self.x || self.y + self.h < o.y || o.y + o.h < self.y
    }
}

impl SceneSpec {
    pub fn sequence_id(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("scene{}", self.seed))
    }

    pub fn subset(&self) -> Subset {
        if self.reflection_heavy {
            Subset::Extension
        } else {
            Subset::Base
        }
    }

    fn footprints(&self) -> Vec<(String, Rect)> {
        let objects = self.objects.iter().enumerate().map(|(i, o)| {
            (
                format!("object {i}"),
                Rect {
                    x: o.x as usize,
                    y: o.y as usize,
                    w: o.width as usize,
                    h: o.height as usize,
                },
            )
        });
        let ghosts = self.ghosts.iter().enumerate().map(|(i, g)| {
            (
                format!("ghost {i}"),
                Rect {
                    x: g.x as usize,
                    y: g.y as usize,
                    w: g.width as usize,
                    h: g.height as usize,
                },
            )
        });
        objects.chain(ghosts).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.sequence_id();
        let err = |m: String| Err(Error::Spec(format!("scene {id}: {m}")));
        if self.height == 0 || self.width == 0 || self.length == 0 {
            return err("height, width and length must be positive".into());
        }
        if self.shore_top > self.horizon || self.horizon >= self.height {
            return err(format!(
                "need shore_top <= horizon < height (got {}, {}, {})",
                self.shore_top, self.horizon, self.height
            ));
        }
        let colors = self.objects.iter().map(|o| (o.color, o.texture_scale)).chain(self.ghosts.iter().map(|g| (g.color, g.texture_scale)));
        for (c, s) in colors {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) || s == 0 {
                return err("colors must be in [0, 1] and texture_scale positive".into());
            }
        }
        for o in &self.objects {
            if let Some(s) = o.reflection {
                if !(0.0..=1.0).contains(&s) {
                    return err(format!("reflection strength {s} outside [0, 1]"));
                }
            }
        }
        let r = &self.reflection;
        if !(r.amplitude.is_finite() && r.temporal_frequency.is_finite() && r.wavelength > 0.0 && (0.0..=1.0).contains(&r.strength)) {
            return err("invalid reflection parameters".into());
        }
        let g = &self.glitter;
        if !((0.0..=1.0).contains(&g.density) && (0.0..=1.0).contains(&g.flicker_rate)) {
            return err("glitter density and flicker rate must be in [0, 1]".into());
        }
        let fp = self.footprints();
        for (name, f) in &fp {
            if f.w == 0 || f.h == 0 {
                return err(format!("{name} has zero size"));
            }
            if f.x + f.w > self.width || f.y + f.h > self.height {
                return err(format!("{name} overflows the {}x{} image", self.height, self.width));
            }
            if f.y <= self.horizon {
                return err(format!("{name} must start below the water line (row {})", self.horizon));
            }
        }
        for (i, (a, fa)) in fp.iter().enumerate() {
            for (b, fb) in &fp[i + 1..] {
                if !fa.separated_from(fb) {
                    return err(format!("{a} touches {b}"));
                }
            }
        }
        Ok(())
    }

    /// A random scene. Reflection-heavy scenes carry more ghosts and
    /// stronger reflections.
    pub fn random(seed: u64, height: usize, width: usize, length: usize, reflection_heavy: bool) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ce4e);
        let shore_top = rng.random_range(height * 3 / 20..=height / 4);
        let horizon = (shore_top + rng.random_range(height / 12..=height / 7).max(1)).min(height - 2);
        let n_objects = if reflection_heavy { 2 } else { rng.random_range(2..=3) };
        let n_ghosts = if reflection_heavy { 2 } else { rng.random_range(1..=2) };
        let mut placed: Vec<Rect> = Vec::new();
        let place = |rng: &mut ChaCha8Rng, placed: &mut Vec<Rect>| -> Option<Rect> {
            for _ in 0..200 {
                let w = rng.random_range(12..=18.min(width / 3).max(12));
                let h = rng.random_range(8..=12.min(height / 4).max(8));
                if horizon + 2 + h > height || w > width {
                    return None;
                }
                let r = Rect {
                    x: rng.random_range(0..=width - w),
                    y: rng.random_range(horizon + 2..=height - h),
                    w,
                    h,
                };
                if placed.iter().all(|p| p.separated_from(&r)) {
                    placed.push(r);
                    return Some(r);
                }
            }
            None
        };
        let color = |rng: &mut ChaCha8Rng| [rng.random_range(0.2..0.95), rng.random_range(0.2..0.95), rng.random_range(0.2..0.95)];
        let mut objects = Vec::new();
        for _ in 0..n_objects {
            if let Some(r) = place(&mut rng, &mut placed) {
                let reflection = if rng.random_bool(0.5) {
                    Some(0.0)
                } else if reflection_heavy {
                    Some(rng.random_range(0.6..0.9))
                } else {
                    Some(rng.random_range(0.4..0.8))
                };
                objects.push(ObjectSpec {
                    shape: if rng.random_bool(0.3) { Shape::Ellipse } else { Shape::Rect },
                    x: r.x as u32,
                    y: r.y as u32,
                    width: r.w as u32,
                    height: r.h as u32,
                    color: color(&mut rng),
                    texture_scale: rng.random_range(2..=3),
                    reflection,
                });
            }
        }
        let mut ghosts = Vec::new();
        for _ in 0..n_ghosts {
            if let Some(r) = place(&mut rng, &mut placed) {
                ghosts.push(GhostSpec {
                    x: r.x as u32,
                    y: r.y as u32,
                    width: r.w as u32,
                    height: r.h as u32,
                    color: color(&mut rng),
                    texture_scale: rng.random_range(2..=3),
                });
            }
        }
        SceneSpec {
            name: None,
            seed,
            height,
            width,
            length,
            shore_top,
            horizon,
            objects,
            ghosts,
            reflection: ReflectionParams {
                amplitude: rng.random_range(3.0..6.0),
                temporal_frequency: rng.random_range(0.25..0.4),
                wavelength: rng.random_range(4.0..8.0),
                strength: if reflection_heavy { 0.8 } else { 0.6 },
            },
            glitter: GlitterParams {
                density: if reflection_heavy { 0.008 } else { 0.004 },
                flicker_rate: 1.0,
            },
            reflection_heavy,
        }
    }
}

/// A generated clip with per-frame ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedSequence {
    pub sequence_id: String,
    pub subset: Subset,
    pub frames: Vec<Frame>,
    pub annotations: Vec<FrameAnnotation>,
    /// Object pixels.
    pub object_region: Array2<bool>,
    /// Pixels covered by the reflections below objects.
    pub reflection_region: Array2<bool>,
    /// Ghost patch pixels.
    pub ghost_region: Array2<bool>,
}

impl GeneratedSequence {
    /// Training samples with `t` context frames. Without front padding only
    /// frames with `t` real predecessors are used.
    pub fn samples(&self, t: usize, front_padding: bool) -> Result<Vec<TemporalSample>> {
        let start = if front_padding { 0 } else { t };
        (start..self.frames.len())
            .map(|i| {
                TemporalSample::new(
                    self.frames[i].clone(),
                    context_indices(i, t).into_iter().map(|j| self.frames[j].clone()).collect(),
                    Some(self.annotations[i].clone()),
                )
            })
            .collect()
    }
}

fn block_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: usize, color: [f64; 3]) -> Array3<f64> {
    let bh = h.div_ceil(scale);
    let bw = w.div_ceil(scale);
    let blocks: Vec<f64> = (0..bh * bw).map(|_| rng.random_range(0.0..1.0)).collect();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let v = blocks[(y / scale) * bw + x / scale];
        (color[c] * (0.25 + 0.95 * v)).clamp(0.0, 1.0)
    })
}

/// Samples texture row `row` at fractional column `col`, wrapping horizontally.
fn sample_row(tex: &Array3<f64>, c: usize, row: usize, col: f64) -> f64 {
    let w = tex.dim().2 as isize;
    let c0 = col.floor();
    let frac = col - c0;
    let i0 = (c0 as isize).rem_euclid(w) as usize;
    let i1 = (c0 as isize + 1).rem_euclid(w) as usize;
    tex[[c, row, i0]] * (1.0 - frac) + tex[[c, row, i1]] * frac
}

fn in_shape(shape: Shape, h: usize, w: usize, y: usize, x: usize) -> bool {
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => {
            let dy = (y as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
            let dx = (x as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
            dx * dx + dy * dy <= 1.0
        }
    }
}

fn displacement(p: &ReflectionParams, row: usize, t: usize, phase: f64) -> f64 {
    p.amplitude * (TAU * (row as f64 / p.wavelength + p.temporal_frequency * t as f64) + phase).sin()
}

struct Patch {
    rect: Rect,
    shape: Shape,
    texture: Array3<f64>,
    phase: f64,
    reflection: f64,
}

pub fn generate_sequence(spec: &SceneSpec) -> Result<GeneratedSequence> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut background = Array3::<f64>::zeros((3, h, w));
    for y in 0..spec.horizon {
        for x in 0..w {
            let grain: f64 = rng.random_range(-0.04..0.04);
            for c in 0..3 {
                background[[c, y, x]] = if y < spec.shore_top {
                    SKY[c] - 0.1 * y as f64 / spec.shore_top.max(1) as f64 + 0.2 * grain
                } else {
                    SHORE[c] + 2.0 * grain
                };
            }
        }
    }
    let wave_phase = rng.random_range(0.0..TAU);

    let mut labels = Array2::from_shape_fn((h, w), |(y, _)| {
        if y < spec.shore_top {
            Label::Sky as u8
        } else if y < spec.horizon {
            Label::Obstacle as u8
        } else {
            Label::Water as u8
        }
    });
    let mut object_region = Array2::from_elem((h, w), false);
    let mut reflection_region = Array2::from_elem((h, w), false);
    let mut ghost_region = Array2::from_elem((h, w), false);
    let mut boxes = Vec::new();

    let mut objects = Vec::new();
    for o in &spec.objects {
        let rect = Rect {
            x: o.x as usize,
            y: o.y as usize,
            w: o.width as usize,
            h: o.height as usize,
        };
        let texture = block_texture(&mut rng, rect.h, rect.w, o.texture_scale as usize, o.color);
        let phase = rng.random_range(0.0..TAU);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..rect.h {
            for x in 0..rect.w {
                if in_shape(o.shape, rect.h, rect.w, y, x) {
                    let (py, px) = (rect.y + y, rect.x + x);
                    labels[[py, px]] = Label::Obstacle as u8;
                    object_region[[py, px]] = true;
                    (x0, y0, x1, y1) = (x0.min(px), y0.min(py), x1.max(px + 1), y1.max(py + 1));
                }
            }
        }
        boxes.push(BoundingBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32));
        objects.push(Patch {
            rect,
            shape: o.shape,
            texture,
            phase,
            reflection: o.reflection.unwrap_or(spec.reflection.strength),
        });
    }
    let mut ghosts = Vec::new();
    for g in &spec.ghosts {
        let rect = Rect {
            x: g.x as usize,
            y: g.y as usize,
            w: g.width as usize,
            h: g.height as usize,
        };
        let texture = block_texture(&mut rng, rect.h, rect.w, g.texture_scale as usize, g.color);
        ghosts.push(Patch {
            rect,
            shape: Shape::Rect,
            texture,
            phase: rng.random_range(0.0..TAU),
            reflection: 1.0,
        });
    }

    // Reflection footprints are fixed; objects drawn later cover any overlap.
    for p in &objects {
        if p.reflection <= 0.0 {
            continue;
        }
        for i in 0..p.rect.h {
            let py = p.rect.y + p.rect.h + i;
            if py >= h {
                break;
            }
            for x in 0..p.rect.w {
                if in_shape(p.shape, p.rect.h, p.rect.w, p.rect.h - 1 - i, x) && !object_region[[py, p.rect.x + x]] {
                    reflection_region[[py, p.rect.x + x]] = true;
                }
            }
        }
    }
    for p in &ghosts {
        for y in p.rect.y..p.rect.y + p.rect.h {
            for x in p.rect.x..p.rect.x + p.rect.w {
                ghost_region[[y, x]] = true;
            }
        }
    }

    let water_pixels: Vec<(usize, usize)> = (spec.horizon..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| !object_region[[y, x]])
        .collect();
    let n_specks = (spec.glitter.density * water_pixels.len() as f64).round() as usize;
    let mut specks: Vec<(usize, usize)> = (0..n_specks)
        .map(|_| water_pixels[rng.random_range(0..water_pixels.len())])
        .collect();

    let mut frames = Vec::with_capacity(spec.length);
    let id = spec.sequence_id();
    for t in 0..spec.length {
        let mut img = background.clone();
        let shift = TAU * 0.2 * t as f64;
        for y in spec.horizon..h {
            for x in 0..w {
                let wave = WAVE_AMPLITUDE * (TAU * (x as f64 / 11.0 + y as f64 / 5.0) - shift + wave_phase).sin();
                for c in 0..3 {
                    img[[c, y, x]] = WATER[c] + wave;
                }
            }
        }
        for p in &objects {
            if p.reflection <= 0.0 {
                continue;
            }
            for i in 0..p.rect.h {
                let py = p.rect.y + p.rect.h + i;
                if py >= h {
                    break;
                }
                let row = p.rect.h - 1 - i;
                let d = displacement(&spec.reflection, i, t, p.phase);
                for x in 0..p.rect.w {
                    let px = p.rect.x + x;
                    if !reflection_region[[py, px]] {
                        continue;
                    }
                    for c in 0..3 {
                        let v = sample_row(&p.texture, c, row, x as f64 - d);
                        img[[c, py, px]] = p.reflection * v + (1.0 - p.reflection) * img[[c, py, px]];
                    }
                }
            }
        }
        for p in &ghosts {
            for y in 0..p.rect.h {
                let d = displacement(&spec.reflection, y, t, p.phase);
                for x in 0..p.rect.w {
                    for c in 0..3 {
                        img[[c, p.rect.y + y, p.rect.x + x]] = sample_row(&p.texture, c, y, x as f64 - d);
                    }
                }
            }
        }
        for p in &objects {
            for y in 0..p.rect.h {
                let d = displacement(&spec.reflection, y, 0, p.phase);
                for x in 0..p.rect.w {
                    if in_shape(p.shape, p.rect.h, p.rect.w, y, x) {
                        for c in 0..3 {
                            img[[c, p.rect.y + y, p.rect.x + x]] = sample_row(&p.texture, c, y, x as f64 - d);
                        }
                    }
                }
            }
        }
        if t > 0 {
            for s in specks.iter_mut() {
                if rng.random_bool(spec.glitter.flicker_rate) {
                    *s = water_pixels[rng.random_range(0..water_pixels.len())];
                }
            }
        }
        for &(y, x) in &specks {
            for c in 0..3 {
                img[[c, y, x]] = GLITTER[c];
            }
        }
        img.mapv_inplace(|v| (v + rng.random_range(-SENSOR_NOISE..SENSOR_NOISE)).clamp(0.0, 1.0));
        frames.push(Frame::new(img, id.clone(), t)?);
    }

    let zone_start = h - (DANGER_BAND * h as f64).round() as usize;
    let zone = Array2::from_shape_fn((h, w), |(y, _)| y >= zone_start);
    let annotation = FrameAnnotation::new(
        SegmentationMask::new(labels)?,
        boxes,
        vec![(0, spec.horizon as u32), (w as u32 - 1, spec.horizon as u32)],
        zone,
    )?;
    Ok(GeneratedSequence {
        sequence_id: id,
        subset: spec.subset(),
        annotations: vec![annotation; spec.length],
        frames,
        object_region,
        reflection_region,
        ghost_region,
    })
}

/// Mean over `region` of the per-pixel temporal variance (averaged over
/// channels). `None` for an empty region.
pub fn mean_temporal_variance(frames: &[Frame], region: &Array2<bool>) -> Option<f64> {
    let n = frames.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((y, x), &inside) in region.indexed_iter() {
        if !inside {
            continue;
        }
        for c in 0..3 {
            let mean = frames.iter().map(|f| f.image()[[c, y, x]]).sum::<f64>() / n;
            total += frames.iter().map(|f| (f.image()[[c, y, x]] - mean).powi(2)).sum::<f64>() / n;
        }
        count += 3;
    }
    (count > 0).then(|| total / count as f64)
}

/// Writes every scene under `out_dir` and returns the manifest, also saved
/// as [`MANIFEST_FILE`]. Each sequence goes to `<id>/NNNN.png` with the
/// annotation in `<id>/NNNN.json`.
pub fn emit_corpus(specs: &[SceneSpec], out_dir: &Path, context_len: usize, front_padding: bool) -> Result<CorpusManifest> {
    if specs.is_empty() {
        return Err(Error::Spec("empty scene list".into()));
    }
    let mut ids = BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !ids.insert(s.sequence_id()) {
            return Err(Error::Spec(format!("duplicate sequence id {}", s.sequence_id())));
        }
        if s.length < context_len + 1 {
            return Err(Error::Spec(format!(
                "scene {} has {} frames, T = {context_len} needs at least {}",
                s.sequence_id(),
                s.length,
                context_len + 1
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_scene: Vec<Vec<ManifestEntry>> = specs
        .par_iter()
        .map(|spec| {
            let seq = generate_sequence(spec)?;
            let dir = out_dir.join(&seq.sequence_id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let rel = |i: usize, ext: &str| PathBuf::from(&seq.sequence_id).join(format!("{i:04}.{ext}"));
            for (i, (f, a)) in seq.frames.iter().zip(&seq.annotations).enumerate() {
                f.save(&out_dir.join(rel(i, "png")))?;
                a.save(&out_dir.join(rel(i, "json")))?;
            }
            let start = if front_padding { 0 } else { context_len };
            Ok((start..spec.length)
                .map(|i| ManifestEntry {
                    sequence_id: seq.sequence_id.clone(),
                    frame_index: i,
                    subset: seq.subset,
                    target_path: rel(i, "png"),
                    annotation_path: rel(i, "json"),
                    context_paths: context_indices(i, context_len).into_iter().map(|j| rel(j, "png")).collect(),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut manifest = CorpusManifest::new(context_len, out_dir);
    manifest.entries = per_scene.into_iter().flatten().collect();
    manifest.metadata.insert("generator".into(), "synthcorpus".into());
    manifest.metadata.insert("danger_zone".into(), format!("bottom_band:{DANGER_BAND}"));
    manifest.metadata.insert("front_padding".into(), front_padding.to_string());
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Parameters for a batch of random scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomScenes {
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Fraction of scenes generated reflection-heavy.
    #[serde(default = "default_extension_fraction")]
    pub extension_fraction: f64,
}

fn default_extension_fraction() -> f64 {
    0.25
}

impl RandomScenes {
    pub fn scenes(&self) -> Vec<SceneSpec> {
        let n_ext = (self.extension_fraction.clamp(0.0, 1.0) * self.count as f64).round() as usize;
        (0..self.count)
            .map(|i| {
                let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let mut s = SceneSpec::random(seed, self.height, self.width, self.length, i < n_ext);
                s.name = Some(format!("rand{}_{i:04}", self.seed));
                s
            })
            .collect()
    }
}

/// Human-editable TOML description of a corpus: explicit `[[scenes]]`,
/// a `[random]` batch, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub context_len: usize,
    #[serde(default)]
    pub front_padding: bool,
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
    #[serde(default)]
    pub random: Option<RandomScenes>,
}

impl CorpusSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        CorpusSpec::parse(&text).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))
    }

    pub fn all_scenes(&self) -> Vec<SceneSpec> {
        let mut out = self.scenes.clone();
        if let Some(r) = &self.random {
            out.extend(r.scenes());
        }
        out
    }
}
