use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use marseg::datamodel::{
    load_manifest, load_sample, read_mask, write_mask, CorpusManifest, Frame, FrameAnnotation, ManifestEntry,
    SegmentationMask,
};
use marseg::evaluation::{
    config_header, evaluate_frame, format_ablation_table, format_comparison_table, summarize, AblationRow,
    ComparisonRow, DetectionReport, EvalConfig, Rates,
};
use marseg::inference::StreamEngine;
use marseg::network::{scores_to_mask, Aggregation, Checkpoint, Network};
use marseg::synthcorpus::{emit_corpus, CorpusSpec, MANIFEST_FILE};
use marseg::training::{append_loss_log, train};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::record::{self, RecordBuilder};

/// Tolerance for stored F1 values when re-deriving them from Pr and Re.
pub const F1_TOLERANCE: f64 = 0.05;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// `<dir>/<sequence>/<frame_index>.png`
pub fn prediction_path(dir: &Path, sequence_id: &str, frame_index: usize) -> PathBuf {
    dir.join(sequence_id).join(format!("{frame_index:04}.png"))
}

pub fn synth(spec_path: &Path, out: &Path, context_len: Option<usize>, rec: &mut RecordBuilder) -> Result<(), CliError> {
    rec.default_path(out);
    let mut spec = CorpusSpec::load(spec_path)?;
    if let Some(t) = context_len {
        spec.context_len = t;
    }
    rec.config = to_json(&spec);
    let manifest = emit_corpus(&spec.all_scenes(), out, spec.context_len, spec.front_padding)?;
    let path = out.join(MANIFEST_FILE);
    let (base, ext) = manifest.subset_counts();
    rec.outputs.push(path.clone());
    rec.metrics = Some(json!({ "entries": manifest.len(), "base": base, "extension": ext }));
    println!("{}", path.display());
    Ok(())
}

pub fn train_cmd(
    manifest_path: &Path,
    config: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    rec: &mut RecordBuilder,
) -> Result<(), CliError> {
    rec.default_path(out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")));
    let mut cfg = RunConfig::load(config)?;
    overrides.apply(&mut cfg);
    rec.config = to_json(&cfg);
    rec.seed = Some(cfg.training.seed);
    let net_cfg = cfg.network.build()?;
    cfg.training.validate(&net_cfg)?;
    let manifest = load_manifest(manifest_path)?;
    let outcome = train(&manifest, &net_cfg, &cfg.training)?;
    outcome.network.to_checkpoint().save(out)?;
    let log = out.with_extension("losses.jsonl");
    if log.exists() {
        fs::remove_file(&log).map_err(|e| io_err(&log, e))?;
    }
    append_loss_log(&outcome.losses, &log)?;
    let first = outcome.losses.first().map(|r| r.total);
    let last = outcome.losses.last().map(|r| r.total);
    rec.outputs.extend([out.to_path_buf(), log]);
    rec.metrics = Some(json!({ "steps": outcome.losses.len(), "initial_loss": first, "final_loss": last }));
    println!("{}", out.display());
    Ok(())
}

/// Frame paths of one sequence in stream order: the first entry's context,
/// then every target.
fn stream_order(entries: &[&ManifestEntry]) -> Vec<PathBuf> {
    let mut seen = HashSet::new();
    let mut order = Vec::new();
    let context = entries.first().map(|e| e.context_paths.clone()).unwrap_or_default();
    for p in context.into_iter().chain(entries.iter().map(|e| e.target_path.clone())) {
        if seen.insert(p.clone()) {
            order.push(p);
        }
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InferMode {
    /// One embedding per frame, reused through the buffer.
    Stream,
    /// Independent forward pass per manifest entry with its listed context.
    Batch,
}

pub struct Predictions {
    /// Per manifest entry.
    pub masks: Vec<SegmentationMask>,
    pub encoder_invocations: usize,
    pub frames_streamed: usize,
    pub seconds: f64,
}

pub fn predict(net: &Network, manifest: &CorpusManifest, mode: InferMode) -> Result<Predictions, CliError> {
    let start = std::time::Instant::now();
    let t = net.config().context_len;
    match mode {
        InferMode::Batch => {
            let masks = (0..manifest.len())
                .map(|i| {
                    let s = load_sample(manifest, i)?.truncate_context(t)?;
                    Ok(scores_to_mask(&net.forward(&s)?))
                })
                .collect::<Result<Vec<_>, marseg::Error>>()?;
            let calls = masks.len() * (t + 1);
            Ok(Predictions {
                frames_streamed: 0,
                encoder_invocations: calls,
                masks,
                seconds: start.elapsed().as_secs_f64(),
            })
        }
        InferMode::Stream => {
            let mut by_seq: BTreeMap<&str, Vec<(usize, &ManifestEntry)>> = BTreeMap::new();
            for (i, e) in manifest.entries.iter().enumerate() {
                by_seq.entry(&e.sequence_id).or_default().push((i, e));
            }
            let mut masks: Vec<Option<SegmentationMask>> = vec![None; manifest.len()];
            let (mut calls, mut frames) = (0, 0);
            for (seq, mut list) in by_seq {
                list.sort_by_key(|(_, e)| e.frame_index);
                let entries: Vec<&ManifestEntry> = list.iter().map(|(_, e)| *e).collect();
                let mut engine = StreamEngine::new(net);
                let mut by_path: BTreeMap<PathBuf, SegmentationMask> = BTreeMap::new();
                for (k, p) in stream_order(&entries).into_iter().enumerate() {
                    let frame = Frame::load(&manifest.resolve(&p), seq, k)?;
                    by_path.insert(p, engine.step(&frame)?.mask);
                }
                calls += engine.encoder_invocations();
                frames += engine.steps();
                for (i, e) in list {
                    masks[i] = by_path.get(&e.target_path).cloned();
                }
            }
            Ok(Predictions {
                masks: masks.into_iter().map(|m| m.expect("every target is streamed")).collect(),
                encoder_invocations: calls,
                frames_streamed: frames,
                seconds: start.elapsed().as_secs_f64(),
            })
        }
    }
}

pub fn infer(
    checkpoint: &Path,
    manifest_path: &Path,
    out: &Path,
    mode: InferMode,
    rec: &mut RecordBuilder,
) -> Result<(), CliError> {
    rec.default_path(out);
    rec.config = json!({ "checkpoint": checkpoint, "manifest": manifest_path, "mode": format!("{mode:?}").to_lowercase() });
    let net = Network::from_checkpoint(Checkpoint::load(checkpoint)?)?;
    let manifest = load_manifest(manifest_path)?;
    let preds = predict(&net, &manifest, mode)?;
    for (e, m) in manifest.entries.iter().zip(&preds.masks) {
        let path = prediction_path(out, &e.sequence_id, e.frame_index);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|err| io_err(dir, err))?;
        }
        write_mask(m, &path)?;
    }
    rec.outputs.push(out.to_path_buf());
    let per_step = (preds.frames_streamed > 0).then(|| preds.encoder_invocations as f64 / preds.frames_streamed as f64);
    rec.metrics = Some(json!({
        "entries": manifest.len(),
        "frames_streamed": preds.frames_streamed,
        "encoder_invocations": preds.encoder_invocations,
        "encoder_invocations_per_step": per_step,
        "seconds": preds.seconds,
    }));
    println!("{}", out.display());
    Ok(())
}

pub fn report_metrics(label: &str, r: &DetectionReport) -> Value {
    json!({
        "label": label,
        "frames": r.frames,
        "mu_r": r.mu_r,
        "precision": r.overall_rates.precision,
        "recall": r.overall_rates.recall,
        "f1": r.overall_rates.f1,
        "precision_defined": r.overall_rates.precision_defined,
        "precision_danger": r.danger_rates.precision,
        "recall_danger": r.danger_rates.recall,
        "f1_danger": r.danger_rates.f1,
        "tp": r.overall.tp,
        "fp": r.overall.fp,
        "fn": r.overall.fn_,
        "tp_danger": r.danger.tp,
        "fp_danger": r.danger.fp,
        "fn_danger": r.danger.fn_,
    })
}

fn evaluate_all(pairs: &[(FrameAnnotation, SegmentationMask)], cfg: &EvalConfig) -> Result<DetectionReport, CliError> {
    let frames = pairs
        .iter()
        .map(|(a, m)| evaluate_frame(m, a, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize(&frames, cfg)?)
}

pub fn eval(
    pred_dir: &Path,
    manifest_path: &Path,
    config: Option<&Path>,
    label: Option<String>,
    out: &Path,
    rec: &mut RecordBuilder,
) -> Result<(), CliError> {
    rec.default_path(out);
    let cfg = RunConfig::load(config)?.evaluation;
    cfg.validate()?;
    rec.config = json!({ "evaluation": cfg, "predictions": pred_dir, "manifest": manifest_path });
    let manifest = load_manifest(manifest_path)?;
    let mut pairs = Vec::with_capacity(manifest.len());
    for e in &manifest.entries {
        let ann = FrameAnnotation::load(&manifest.resolve(&e.annotation_path))?;
        let pred = read_mask(&prediction_path(pred_dir, &e.sequence_id, e.frame_index))?;
        pairs.push((ann, pred));
    }
    let report = evaluate_all(&pairs, &cfg)?;
    let label = label.unwrap_or_else(|| {
        pred_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "predictions".into())
    });
    let json_path = out.join("report.json");
    let txt_path = out.join("report.txt");
    let text = format!(
        "{}\n{}",
        config_header(&cfg),
        format_comparison_table(&[ComparisonRow::from_report(label.clone(), &report)])
    );
    write_text(&json_path, &serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    write_text(&txt_path, &text)?;
    print!("{text}");
    rec.outputs.extend([json_path, txt_path]);
    rec.metrics = Some(report_metrics(&label, &report));
    Ok(())
}

/// One grid point of an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GridPoint {
    pub context_len: usize,
    pub aggregation: Aggregation,
    pub kernel: usize,
}

impl GridPoint {
    pub fn label(&self) -> String {
        format!("T={} {} k={}", self.context_len, self.aggregation, self.kernel)
    }
}

pub fn grid(ts: &[usize], aggs: &[Aggregation], kernels: &[usize]) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &context_len in ts {
        for &aggregation in aggs {
            for &kernel in kernels {
                out.push(GridPoint {
                    context_len,
                    aggregation,
                    kernel,
                });
            }
        }
    }
    out
}

pub fn ablate(
    manifest_path: &Path,
    eval_manifest: Option<&Path>,
    config: Option<&Path>,
    points: &[GridPoint],
    overrides: &Overrides,
    out: &Path,
    rec: &mut RecordBuilder,
) -> Result<(), CliError> {
    rec.default_path(out);
    let mut base = RunConfig::load(config)?;
    overrides.apply(&mut base);
    rec.config = json!({ "base": base, "grid": points, "eval_manifest": eval_manifest });
    rec.seed = Some(base.training.seed);
    if points.is_empty() {
        return Err(CliError::Usage("empty ablation grid".into()));
    }
    base.evaluation.validate()?;
    let configs = points
        .iter()
        .map(|p| {
            let mut c = base.clone();
            c.network.context_len = p.context_len;
            c.network.aggregation = p.aggregation;
            c.network.spatial_kernel = p.kernel;
            let n = c.network.build()?;
            c.training.validate(&n)?;
            Ok((c, n))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let manifest = load_manifest(manifest_path)?;
    let eval_manifest = match eval_manifest {
        Some(p) => load_manifest(p)?,
        None => manifest.clone(),
    };
    let samples = (0..eval_manifest.len())
        .map(|i| load_sample(&eval_manifest, i))
        .collect::<Result<Vec<_>, _>>()?;
    let results = configs
        .par_iter()
        .map(|(c, n)| -> Result<DetectionReport, CliError> {
            let outcome = train(&manifest, n, &c.training)?;
            let pairs = samples
                .iter()
                .map(|s| {
                    let s = s.truncate_context(n.context_len)?;
                    let mask = scores_to_mask(&outcome.network.forward(&s)?);
                    let ann = s.annotation.clone().ok_or_else(|| marseg::Error::Data("sample without annotation".into()))?;
                    Ok((ann, mask))
                })
                .collect::<Result<Vec<_>, marseg::Error>>()?;
            evaluate_all(&pairs, &c.evaluation)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let rows: Vec<AblationRow> = points
        .iter()
        .zip(&results)
        .map(|(p, r)| AblationRow::from_report(p.label(), r))
        .collect();
    let table = format!(
        "{}\n{}",
        config_header(&base.evaluation),
        format_ablation_table("config", &rows)
    );
    let txt = out.join("ablation.txt");
    let js = out.join("ablation.json");
    write_text(&txt, &table)?;
    let detail: Vec<Value> = points
        .iter()
        .zip(&results)
        .map(|(p, r)| json!({ "point": p, "report": r }))
        .collect();
    write_text(&js, &serde_json::to_string_pretty(&detail).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    print!("{table}");
    rec.outputs.extend([txt, js]);
    rec.metrics = Some(json!(rows));
    Ok(())
}

/// A row rebuilt from stored metrics, with any F1 inconsistency.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub row: ComparisonRow,
    pub inconsistencies: Vec<String>,
}

fn field(m: &Value, k: &str) -> Option<f64> {
    m.get(k).and_then(Value::as_f64)
}

/// Rebuilds a comparison row from stored metrics. F1 is always recomputed
/// from Pr and Re; a stored F1 that differs by more than [`F1_TOLERANCE`]
/// is reported.
pub fn row_from_metrics(m: &Value) -> Option<ReportRow> {
    let label = m.get("label").and_then(Value::as_str).unwrap_or("run").to_string();
    let overall = Rates::from_precision_recall(field(m, "precision")?, field(m, "recall")?);
    let danger = match (field(m, "precision_danger"), field(m, "recall_danger")) {
        (Some(p), Some(r)) => Rates::from_precision_recall(p, r),
        _ => Rates::from_precision_recall(0.0, 0.0),
    };
    let mut inconsistencies = Vec::new();
    for (key, rates) in [("f1", &overall), ("f1_danger", &danger)] {
        if let Some(stored) = field(m, key) {
            if (stored - rates.f1).abs() > F1_TOLERANCE {
                inconsistencies.push(format!(
                    "{label}: stored {key} {stored:.2} differs from recomputed {:.2}",
                    rates.f1
                ));
            }
        }
    }
    Some(ReportRow {
        row: ComparisonRow {
            label,
            mu_r: field(m, "mu_r"),
            overall,
            danger,
        },
        inconsistencies,
    })
}

pub fn report(runs: &[PathBuf], out: Option<&Path>, rec: &mut RecordBuilder) -> Result<(), CliError> {
    if let Some(o) = out {
        rec.default_path(o.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")));
    }
    rec.config = json!({ "runs": runs });
    let mut rows = Vec::new();
    for path in runs {
        for r in record::read_all(path).map_err(CliError::Data)? {
            if r.status != "ok" {
                continue;
            }
            let Some(metrics) = r.metrics.as_ref() else { continue };
            let items: Vec<&Value> = match metrics {
                Value::Array(a) => a.iter().collect(),
                m => vec![m],
            };
            rows.extend(items.into_iter().filter_map(row_from_metrics));
        }
    }
    if rows.is_empty() {
        return Err(CliError::Data("no run record carries precision/recall metrics".into()));
    }
    let mut text = format_comparison_table(&rows.iter().map(|r| r.row.clone()).collect::<Vec<_>>());
    let flagged: Vec<&String> = rows.iter().flat_map(|r| &r.inconsistencies).collect();
    for f in &flagged {
        text.push_str(&format!("INCONSISTENT {f}\n"));
    }
    print!("{text}");
    if let Some(o) = out {
        write_text(o, &text)?;
        rec.outputs.push(o.to_path_buf());
    }
    rec.metrics = Some(json!({ "rows": rows.len(), "inconsistent": flagged.len() }));
    Ok(())
}
