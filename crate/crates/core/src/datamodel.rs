//! Domain types shared by every stage of the pipeline, plus corpus I/O.
//!
//! Label encoding is fixed crate-wide: `0 = obstacle`, `1 = water`, `2 = sky`.
//! Masks are stored as single-channel 8-bit PNG files holding the raw label
//! values; frames are 8-bit RGB PNG files normalized to `[0, 1]` on load.
//!
//! # Manifest format
//!
//! A manifest is UTF-8 text with one record per line. Blank lines and lines
//! starting with `#` are ignored. The first record is the header:
//!
//! ```text
//! marseg-manifest<TAB>version=1<TAB>context=<T>[<TAB>key=value ...]
//! ```
//!
//! Every following record describes one trainable target frame, with fields
//! separated by a single tab, in this order:
//!
//! ```text
//! sequence_id  frame_index  subset  target_path  annotation_path  context_paths
//! ```
//!
//! `subset` is `base` or `extension`. `context_paths` holds exactly `T` paths,
//! oldest first, joined by `,` (empty when `T = 0`). All paths are relative to
//! the directory containing the manifest.
//!
//! # Annotation format
//!
//! Annotations are JSON objects; `mask` and `danger_zone` are paths relative
//! to the annotation file:
//!
//! ```json
//! {"mask": "mask_0003.png", "danger_zone": "zone_0003.png",
//!  "obstacle_boxes": [[10, 4, 18, 12]], "water_edge": [[0, 7], [63, 9]]}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_MAGIC: &str = "marseg-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Per-pixel class. The discriminants are the on-disk label values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Obstacle = 0,
    Water = 1,
    Sky = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Obstacle, Label::Water, Label::Sky];
    pub const COUNT: usize = 3;

    pub fn from_u8(value: u8) -> Option<Label> {
        match value {
            0 => Some(Label::Obstacle),
            1 => Some(Label::Water),
            2 => Some(Label::Sky),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A normalized RGB frame, `3 × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    image: Array3<f64>,
    pub sequence_id: String,
    pub frame_index: usize,
}

impl Frame {
    pub fn new(image: Array3<f64>, sequence_id: impl Into<String>, frame_index: usize) -> Result<Self> {
        let (c, h, w) = image.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame must be 3 x H x W with H, W > 0, got {c} x {h} x {w}")));
        }
        if let Some(v) = image.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Data(format!("frame pixel value {v} outside [0, 1]")));
        }
        Ok(Frame {
            image,
            sequence_id: sequence_id.into(),
            frame_index,
        })
    }

    pub fn image(&self) -> ArrayView3<'_, f64> {
        self.image.view()
    }

    pub fn into_image(self) -> Array3<f64> {
        self.image
    }

    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Reads an 8-bit RGB image file.
    pub fn load(path: &Path, sequence_id: impl Into<String>, frame_index: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::<f64>::zeros((3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = f64::from(px[c]) / 255.0;
            }
        }
        Frame::new(data, sequence_id, frame_index)
    }

    /// Writes the frame as an 8-bit RGB image, rounding to the nearest level.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (_, h, w) = self.image.dim();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let q = |c: usize| (self.image[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
            Rgb([q(0), q(1), q(2)])
        });
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Per-pixel 3-class labeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    labels: Array2<u8>,
}

impl SegmentationMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(v) = labels.iter().find(|v| Label::from_u8(**v).is_none()) {
            return Err(Error::Data(format!("mask label {v} outside {{0, 1, 2}}")));
        }
        Ok(SegmentationMask { labels })
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        SegmentationMask {
            labels: Array2::from_elem((height, width), label as u8),
        }
    }

    /// Per-pixel argmax over `3 × H × W` class scores. Ties resolve to the
    /// lower label.
    pub fn from_class_scores(scores: ArrayView3<'_, f64>) -> Self {
        let (c, h, w) = scores.dim();
        assert_eq!(c, Label::COUNT, "class scores must have 3 channels");
        let labels = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for k in 1..c {
                if scores[[k, y, x]] > scores[[best, y, x]] {
                    best = k;
                }
            }
            best as u8
        });
        SegmentationMask { labels }
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        // Labels are validated on construction.
        Label::from_u8(self.labels[[y, x]]).unwrap()
    }

    pub fn set(&mut self, y: usize, x: usize, label: Label) {
        self.labels[[y, x]] = label as u8;
    }

    pub fn is(&self, y: usize, x: usize, label: Label) -> bool {
        self.labels[[y, x]] == label as u8
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = self.labels.clone();
        labels.invert_axis(Axis(1));
        SegmentationMask { labels }
    }
}

/// Axis-aligned box in pixel coordinates, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BoundingBox {
    fn from(v: [u32; 4]) -> Self {
        BoundingBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.x1.saturating_sub(self.x0)) * u64::from(self.y1.saturating_sub(self.y0))
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0 as usize..self.x1 as usize).contains(&x) && (self.y0 as usize..self.y1 as usize).contains(&y)
    }

    /// Integer center pixel, rounded down.
    pub fn center(&self) -> (usize, usize) {
        (((self.x0 + self.x1) / 2) as usize, ((self.y0 + self.y1) / 2) as usize)
    }

    pub fn flip_horizontal(&self, width: u32) -> Self {
        BoundingBox {
            x0: width - self.x1,
            y0: self.y0,
            x1: width - self.x0,
            y1: self.y1,
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 as usize > width || self.y1 as usize > height {
            return Err(Error::Data(format!(
                "box {:?} is empty or outside a {height} x {width} image",
                <[u32; 4]>::from(*self)
            )));
        }
        Ok(())
    }
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub mask: SegmentationMask,
    pub obstacle_boxes: Vec<BoundingBox>,
    /// Ordered `(x, y)` polyline of the static-obstacle/water boundary.
    pub water_edge: Vec<(u32, u32)>,
    /// `true` where the pixel is inside the danger zone.
    pub danger_zone: Array2<bool>,
}

impl FrameAnnotation {
    pub fn new(
        mask: SegmentationMask,
        obstacle_boxes: Vec<BoundingBox>,
        water_edge: Vec<(u32, u32)>,
        danger_zone: Array2<bool>,
    ) -> Result<Self> {
        let (h, w) = mask.dims();
        if danger_zone.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "danger zone {:?} does not match mask {:?}",
                danger_zone.dim(),
                (h, w)
            )));
        }
        for b in &obstacle_boxes {
            b.validate(h, w)?;
        }
        Ok(FrameAnnotation {
            mask,
            obstacle_boxes,
            water_edge,
            danger_zone,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.mask.width() as u32;
        let mut danger_zone = self.danger_zone.clone();
        danger_zone.invert_axis(Axis(1));
        FrameAnnotation {
            mask: self.mask.flip_horizontal(),
            obstacle_boxes: self.obstacle_boxes.iter().map(|b| b.flip_horizontal(w)).collect(),
            water_edge: self.water_edge.iter().rev().map(|&(x, y)| (w - 1 - x, y)).collect(),
            danger_zone,
        }
    }

    /// Reads the JSON annotation record and the image files it references.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        let record: AnnotationRecord =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mask = read_mask(&dir.join(&record.mask))?;
        let danger_zone = read_binary_mask(&dir.join(&record.danger_zone))?;
        FrameAnnotation::new(mask, record.obstacle_boxes, record.water_edge, danger_zone)
    }

    /// Writes the annotation record plus `<stem>_mask.png` and
    /// `<stem>_zone.png` next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad annotation path {}", path.display())))?;
        let mask_name = format!("{stem}_mask.png");
        let zone_name = format!("{stem}_zone.png");
        write_mask(&self.mask, &dir.join(&mask_name))?;
        write_binary_mask(&self.danger_zone, &dir.join(&zone_name))?;
        let record = AnnotationRecord {
            mask: mask_name,
            danger_zone: zone_name,
            obstacle_boxes: self.obstacle_boxes.clone(),
            water_edge: self.water_edge.clone(),
        };
        let text = serde_json::to_string(&record).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    mask: String,
    danger_zone: String,
    obstacle_boxes: Vec<BoundingBox>,
    water_edge: Vec<(u32, u32)>,
}

/// A target frame with its `T` preceding context frames, oldest first.
#[derive(Debug, Clone)]
pub struct TemporalSample {
    pub target: Frame,
    pub context: Vec<Frame>,
    pub annotation: Option<FrameAnnotation>,
}

impl TemporalSample {
    pub fn new(target: Frame, context: Vec<Frame>, annotation: Option<FrameAnnotation>) -> Result<Self> {
        let dims = target.dims();
        if let Some((i, f)) = context.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::Shape(format!(
                "context frame {i} is {:?}, target is {dims:?}",
                f.dims()
            )));
        }
        if let Some(a) = &annotation {
            if a.mask.dims() != dims {
                return Err(Error::Shape(format!(
                    "annotation mask {:?} does not match frame {dims:?}",
                    a.mask.dims()
                )));
            }
        }
        Ok(TemporalSample {
            target,
            context,
            annotation,
        })
    }

    pub fn context_len(&self) -> usize {
        self.context.len()
    }

    /// Keeps only the `t` most recent context frames.
    pub fn truncate_context(&self, t: usize) -> Result<Self> {
        if t > self.context.len() {
            return Err(Error::Config(format!(
                "requested {t} context frames but the sample holds {}",
                self.context.len()
            )));
        }
        Ok(TemporalSample {
            target: self.target.clone(),
            context: self.context[self.context.len() - t..].to_vec(),
            annotation: self.annotation.clone(),
        })
    }
}

/// Frame indices of the `t` context frames for `frame_index`, oldest first,
/// repeating the sequence's first frame when fewer than `t` predecessors exist.
pub fn context_indices(frame_index: usize, t: usize) -> Vec<usize> {
    (0..t).map(|j| (frame_index + j).saturating_sub(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Base,
    Extension,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Base => "base",
            Subset::Extension => "extension",
        })
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Subset::Base),
            "extension" => Ok(Subset::Extension),
            other => Err(format!("unknown subset '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sequence_id: String,
    pub frame_index: usize,
    pub subset: Subset,
    pub target_path: PathBuf,
    pub annotation_path: PathBuf,
    pub context_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub version: u32,
    pub context_len: usize,
    /// Free-form header fields, e.g. how danger zones were produced.
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn new(context_len: usize, root: impl Into<PathBuf>) -> Self {
        CorpusManifest {
            version: MANIFEST_VERSION,
            context_len,
            metadata: BTreeMap::new(),
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subset_indices(&self, subset: Subset) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.subset == subset)
            .map(|(i, _)| i)
            .collect()
    }

    /// `(base, extension)` entry counts.
    pub fn subset_counts(&self) -> (usize, usize) {
        let ext = self.entries.iter().filter(|e| e.subset == Subset::Extension).count();
        (self.entries.len() - ext, ext)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Serializes to the line format described in the module docs.
    pub fn to_text(&self) -> Result<String> {
        let mut out = format!("{MANIFEST_MAGIC}\tversion={}\tcontext={}", self.version, self.context_len);
        for (k, v) in &self.metadata {
            check_field(k, "metadata key")?;
            check_field(v, "metadata value")?;
            if k.contains('=') {
                return Err(Error::schema("header", format!("metadata key '{k}' contains '='")));
            }
            out.push_str(&format!("\t{k}={v}"));
        }
        out.push('\n');
        for e in &self.entries {
            check_field(&e.sequence_id, "sequence_id")?;
            let ctx: Vec<String> = e
                .context_paths
                .iter()
                .map(|p| path_field(p, true))
                .collect::<Result<_>>()?;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.sequence_id,
                e.frame_index,
                e.subset,
                path_field(&e.target_path, false)?,
                path_field(&e.annotation_path, false)?,
                ctx.join(",")
            ));
        }
        Ok(out)
    }

    /// Parses manifest text. Does not touch the filesystem.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, header) = lines.next().ok_or_else(|| Error::schema("header", "empty manifest"))?;
        let mut fields = header.split('\t');
        if fields.next() != Some(MANIFEST_MAGIC) {
            return Err(Error::schema("header", format!("first record must start with '{MANIFEST_MAGIC}'")));
        }
        let mut version = None;
        let mut context_len = None;
        let mut metadata = BTreeMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::schema("header", format!("malformed header field '{f}'")))?;
            match k {
                "version" => version = Some(v.parse::<u32>().map_err(|e| Error::schema("header", format!("version: {e}")))?),
                "context" => {
                    context_len = Some(v.parse::<usize>().map_err(|e| Error::schema("header", format!("context: {e}")))?)
                }
                _ => {
                    metadata.insert(k.to_string(), v.to_string());
                }
            }
        }
        let version = version.ok_or_else(|| Error::schema("header", "missing version"))?;
        if version != MANIFEST_VERSION {
            return Err(Error::schema("header", format!("unsupported version {version}, expected {MANIFEST_VERSION}")));
        }
        let context_len = context_len.ok_or_else(|| Error::schema("header", "missing context length"))?;

        let mut entries = Vec::new();
        for (lineno, line) in lines {
            let loc = |id: &str| format!("line {}, entry '{id}'", lineno + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::schema(loc(f[0]), format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            let frame_index = f[1]
                .parse::<usize>()
                .map_err(|e| Error::schema(loc(f[0]), format!("frame_index: {e}")))?;
            let subset = f[2].parse::<Subset>().map_err(|e| Error::schema(loc(f[0]), e))?;
            let context_paths: Vec<PathBuf> = if f[5].is_empty() {
                Vec::new()
            } else {
                f[5].split(',').map(PathBuf::from).collect()
            };
            if context_paths.len() != context_len {
                return Err(Error::schema(
                    loc(f[0]),
                    format!("has {} context paths, manifest context length is {context_len}", context_paths.len()),
                ));
            }
            entries.push(ManifestEntry {
                sequence_id: f[0].to_string(),
                frame_index,
                subset,
                target_path: PathBuf::from(f[3]),
                annotation_path: PathBuf::from(f[4]),
                context_paths,
            });
        }
        Ok(CorpusManifest {
            version,
            context_len,
            metadata,
            entries,
            root: root.into(),
        })
    }

    /// Fails naming the first referenced file that does not exist.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for rel in std::iter::once(&e.target_path)
                .chain(std::iter::once(&e.annotation_path))
                .chain(e.context_paths.iter())
            {
                let p = self.resolve(rel);
                if !p.is_file() {
                    return Err(Error::Load {
                        path: p,
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file missing"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_field(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.contains(['\t', '\n', '\r', ',']) {
        return Err(Error::schema(what, format!("'{s}' is empty or contains a tab, newline or comma")));
    }
    Ok(())
}

fn path_field(p: &Path, in_list: bool) -> Result<String> {
    let s = p
        .to_str()
        .ok_or_else(|| Error::schema("path", format!("{} is not UTF-8", p.display())))?;
    if in_list || !s.is_empty() {
        check_field(s, "path")?;
    }
    Ok(s.to_string())
}

/// Reads and validates a manifest, checking every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = CorpusManifest::parse(&text, root)?;
    manifest.check_files()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    fs::write(path, manifest.to_text()?).map_err(|e| Error::io(path, e))
}

/// Decodes the target, its context frames and the annotation of one entry.
pub fn load_sample(manifest: &CorpusManifest, index: usize) -> Result<TemporalSample> {
    let entry = manifest.entries.get(index).ok_or_else(|| {
        Error::Config(format!("sample index {index} out of range for {} entries", manifest.len()))
    })?;
    let target = Frame::load(&manifest.resolve(&entry.target_path), &entry.sequence_id, entry.frame_index)?;
    let indices = context_indices(entry.frame_index, entry.context_paths.len());
    let context = entry
        .context_paths
        .iter()
        .zip(indices)
        .map(|(p, i)| Frame::load(&manifest.resolve(p), &entry.sequence_id, i))
        .collect::<Result<Vec<_>>>()?;
    let annotation = FrameAnnotation::load(&manifest.resolve(&entry.annotation_path))?;
    TemporalSample::new(target, context, Some(annotation))
}

/// Writes a mask as a single-channel 8-bit PNG holding raw label values.
pub fn write_mask(mask: &SegmentationMask, path: &Path) -> Result<()> {
    let (h, w) = mask.dims();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([mask.labels[[y as usize, x as usize]]]));
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_mask(path: &Path) -> Result<SegmentationMask> {
    let img = open_gray(path)?;
    let (w, h) = img.dimensions();
    let labels = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]);
    SegmentationMask::new(labels).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Boolean masks are stored as 0 / 255 grayscale; any nonzero value reads as `true`.
pub fn write_binary_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }]));
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_binary_mask(path: &Path) -> Result<Array2<bool>> {
    let img = open_gray(path)?;
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] != 0
    }))
}

fn open_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::Data(format!(
            "{}: expected single-channel 8-bit image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Rasterizes a danger zone from camera geometry over a flat water plane.
///
/// Non-normative convenience: the zone is every row whose ground ray hits the
/// water within `radius_m` of the camera. Pitch is positive when looking down.
pub fn danger_zone_from_camera(
    height: usize,
    width: usize,
    camera_height_m: f64,
    pitch_rad: f64,
    vertical_fov_rad: f64,
    radius_m: f64,
) -> Array2<bool> {
    let focal = (height as f64 / 2.0) / (vertical_fov_rad / 2.0).tan();
    let cy = (height as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((height, width), |(y, _)| {
        let depression = pitch_rad + ((y as f64 - cy) / focal).atan();
        depression > 0.0 && camera_height_m / depression.tan() <= radius_m
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(value: f64, h: usize, w: usize, idx: usize) -> Frame {
        Frame::new(Array3::from_elem((3, h, w), value), "s", idx).unwrap()
    }

    #[test]
    fn frame_rejects_out_of_range_pixels() {
        let mut img = Array3::from_elem((3, 2, 2), 0.5);
        img[[1, 0, 0]] = 1.5;
        assert!(Frame::new(img.clone(), "s", 0).is_err());
        img[[1, 0, 0]] = f64::NAN;
        assert!(Frame::new(img, "s", 0).is_err());
        assert!(Frame::new(Array3::zeros((3, 0, 4)), "s", 0).is_err());
    }

    #[test]
    fn context_indices_pad_at_sequence_start() {
        assert_eq!(context_indices(0, 5), vec![0; 5]);
        assert_eq!(context_indices(7, 5), vec![2, 3, 4, 5, 6]);
        assert_eq!(context_indices(2, 5), vec![0, 0, 0, 0, 1]);
        assert!(context_indices(3, 0).is_empty());
    }

    #[test]
    fn mask_rejects_unknown_label() {
        let labels = Array2::from_elem((2, 2), 3u8);
        assert!(matches!(SegmentationMask::new(labels), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let scores = Array3::zeros((3, 1, 2));
        let m = SegmentationMask::from_class_scores(scores.view());
        assert_eq!(m.get(0, 0), Label::Obstacle);
    }

    #[test]
    fn box_flip_reflects_coordinates() {
        let b = BoundingBox::new(2, 1, 5, 4);
        assert_eq!(b.flip_horizontal(10), BoundingBox::new(5, 1, 8, 4));
        assert_eq!(b.flip_horizontal(10).flip_horizontal(10), b);
    }

    #[test]
    fn truncate_keeps_most_recent() {
        let ctx = (0..5).map(|i| frame(0.1 * i as f64, 2, 2, i)).collect();
        let s = TemporalSample::new(frame(0.9, 2, 2, 5), ctx, None).unwrap();
        let t = s.truncate_context(2).unwrap();
        assert_eq!(t.context.iter().map(|f| f.frame_index).collect::<Vec<_>>(), vec![3, 4]);
        assert!(s.truncate_context(6).is_err());
    }

    #[test]
    fn sample_rejects_mixed_resolution() {
        let r = TemporalSample::new(frame(0.5, 2, 2, 1), vec![frame(0.5, 2, 3, 0)], None);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn manifest_parse_reports_context_count() {
        let text = "marseg-manifest\tversion=1\tcontext=5\nseq\t7\tbase\tt.png\ta.json\tc1.png,c2.png,c3.png,c4.png\n";
        match CorpusManifest::parse(text, ".") {
            Err(Error::Schema { location, .. }) => assert!(location.contains("seq"), "{location}"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_rejects_other_versions() {
        let text = "marseg-manifest\tversion=2\tcontext=0\n";
        assert!(matches!(CorpusManifest::parse(text, "."), Err(Error::Schema { .. })));
    }

    #[test]
    fn manifest_text_roundtrip_with_zero_context() {
        let mut m = CorpusManifest::new(0, ".");
        m.metadata.insert("danger_zone".into(), "bottom_band:0.4".into());
        m.entries.push(ManifestEntry {
            sequence_id: "a".into(),
            frame_index: 0,
            subset: Subset::Extension,
            target_path: "a/f.png".into(),
            annotation_path: "a/f.json".into(),
            context_paths: vec![],
        });
        let text = m.to_text().unwrap();
        assert_eq!(CorpusManifest::parse(&text, ".").unwrap(), m);
    }

    #[test]
    fn danger_zone_helper_covers_bottom_rows() {
        let zone = danger_zone_from_camera(40, 8, 1.0, 0.05, 0.8, 15.0);
        assert!(zone[[39, 0]]);
        assert!(!zone[[0, 0]]);
        // Monotone: once a row is in the zone, every row below it is too.
        let first = (0..40).position(|y| zone[[y, 0]]).unwrap();
        assert!((first..40).all(|y| zone[[y, 3]]));
    }
}
