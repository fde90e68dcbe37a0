use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use asd_core::data::{
    generate_synthetic, parse_annotations, parse_predictions, serialize_annotations, serialize_predictions,
    split_validation, AnnotationRecord, PredictionRow, SyntheticConfig, TrackBundle,
};
use asd_core::encoders::EncoderConfig;
use asd_core::eval::{evaluate_predictions, pr_curve, pr_curve_csv};
use asd_core::model::{self, LogEntry, Model, ModelConfig, PreparedTrack, TrainOptions};
use asd_core::numcore::checkpoint;
use asd_core::postprocess::{smooth_interleaved, SmoothMethod};
use asd_core::{Error, Result};

use crate::config::RunConfig;

/// Frame period in milliseconds at 25 fps.
const FRAME_MS: f64 = 40.0;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Per-split row of the dataset table: videos, frames, speaking, not speaking.
fn split_stats(bundles: &[&TrackBundle], cfg: &RunConfig) -> (usize, usize, usize, usize) {
    let mut videos: Vec<&str> = bundles.iter().map(|b| b.video_id.as_str()).collect();
    videos.sort_unstable();
    videos.dedup();
    let labels: Vec<bool> = bundles.iter().flat_map(|b| b.binary_labels(cfg.mapping())).collect();
    let speaking = labels.iter().filter(|&&l| l).count();
    (videos.len(), labels.len(), speaking, labels.len() - speaking)
}

pub fn synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let synth_cfg = SyntheticConfig {
        num_tracks: cfg.num_tracks,
        frames_per_track: cfg.frames_per_track,
        size: cfg.resolution,
        clip_len: cfg.clip_len,
        ..SyntheticConfig::default()
    };
    let bundles = generate_synthetic(&synth_cfg, cfg.seed)?;
    let (train_idx, val_idx) = split_validation(bundles.len(), cfg.val_fraction);
    for b in &bundles {
        b.write(&cfg.bundles_dir().join(&b.entity_id))?;
    }
    writeln!(out, "{:<6} {:>8} {:>8} {:>10} {:>14}", "set", "videos", "frames", "speaking", "not speaking")?;
    for (name, idx, path) in [
        ("train", &train_idx, cfg.train_annotations()),
        ("val", &val_idx, cfg.val_annotations()),
    ] {
        let split: Vec<&TrackBundle> = idx.iter().map(|&i| &bundles[i]).collect();
        let records: Vec<AnnotationRecord> = split.iter().flat_map(|b| b.annotation_records()).collect();
        write_file(&path, serialize_annotations(&records))?;
        let (videos, frames, speaking, silent) = split_stats(&split, cfg);
        writeln!(out, "{name:<6} {videos:>8} {frames:>8} {speaking:>10} {silent:>14}")?;
    }
    Ok(())
}

/// Entity ids in order of first appearance.
fn entities(records: &[AnnotationRecord]) -> Vec<&str> {
    let mut seen = std::collections::HashSet::new();
    records
        .iter()
        .map(|r| r.entity_id.as_str())
        .filter(|e| seen.insert(*e))
        .collect()
}

/// Tracks named by an annotation CSV, read from the bundle directory.
pub fn load_tracks(cfg: &RunConfig, records: &[AnnotationRecord]) -> Result<Vec<PreparedTrack>> {
    entities(records)
        .into_iter()
        .map(|e| PreparedTrack::new(TrackBundle::read(&cfg.bundles_dir().join(e), records)?))
        .collect()
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(ModelConfig {
        encoder: EncoderConfig {
            preset: cfg.preset,
            resolution: cfg.resolution,
        },
        backend: cfg.backend,
        clip_len: cfg.clip_len,
        freeze_frontend: cfg.freeze_frontend,
        ..ModelConfig::default()
    })
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<LogEntry>> {
    let train_records = parse_annotations(&read_text(&cfg.train_annotations())?)?;
    let train_tracks = load_tracks(cfg, &train_records)?;
    let val_path = cfg.val_annotations();
    let val_tracks = if val_path.exists() {
        load_tracks(cfg, &parse_annotations(&read_text(&val_path)?)?)?
    } else {
        Vec::new()
    };
    let model = build_model(cfg)?;
    let mut params = model.init(cfg.seed)?;
    let opts = TrainOptions {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch_size,
        max_steps: cfg.max_steps,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        target_map: cfg.target_map,
        mapping: cfg.mapping(),
    };
    let mut io_result = Ok(());
    let log = model::train(&model, &mut params, &train_tracks, &val_tracks, &opts, |e| {
        let line = match e.val_map {
            Some(m) => format!("step {:>5}  loss {:.4}  val mAP {m:.4}", e.step, e.loss),
            None => format!("step {:>5}  loss {:.4}", e.step, e.loss),
        };
        if io_result.is_ok() {
            io_result = writeln!(out, "{line}");
        }
    })?;
    io_result?;
    if let Some(parent) = cfg.checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save(&params, &cfg.checkpoint)?;
    let mut csv = String::from("step,loss,val_map\n");
    for e in &log {
        let val = e.val_map.map(|m| m.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{val}\n", e.step, e.loss));
    }
    write_file(&cfg.checkpoint.with_extension("log.csv"), csv)?;
    writeln!(out, "checkpoint written to {}", cfg.checkpoint.display())?;
    Ok(log)
}

/// Scores for every ground-truth row, in row order.
pub fn predict_rows(cfg: &RunConfig, gt: &[AnnotationRecord]) -> Result<Vec<PredictionRow>> {
    let model = build_model(cfg)?;
    let mut params = model.init(0)?;
    let loaded = checkpoint::load::<f32>(&cfg.checkpoint)?;
    checkpoint::restore_into(&mut params, &loaded, "")?;
    let mut scores: HashMap<&str, (i64, Vec<f64>)> = HashMap::new();
    for track in load_tracks(cfg, gt)? {
        let s = model.score_track(&params, &track)?;
        let entity = gt
            .iter()
            .find(|r| r.entity_id == track.bundle.entity_id)
            .map(|r| r.entity_id.as_str())
            .expect("track was loaded from these rows");
        scores.insert(entity, (track.bundle.start_ms, s));
    }
    let mut rows: Vec<PredictionRow> = gt
        .iter()
        .map(|r| {
            let (start, s) = &scores[r.entity_id.as_str()];
            let frame = ((r.key().1 - start) as f64 / FRAME_MS).round() as usize;
            PredictionRow {
                record: r.clone(),
                score: s[frame],
            }
        })
        .collect();
    if cfg.smoothing != SmoothMethod::None {
        smooth_rows(&mut rows, cfg.smoothing, cfg.window_seconds)?;
    }
    Ok(rows)
}

pub fn infer(cfg: &RunConfig, gt_path: &Path, out: &mut dyn Write) -> Result<()> {
    let gt = parse_annotations(&read_text(gt_path)?)?;
    let rows = predict_rows(cfg, &gt)?;
    write_file(&cfg.output, serialize_predictions(&rows))?;
    writeln!(out, "{} predictions written to {}", rows.len(), cfg.output.display())?;
    Ok(())
}

fn smooth_rows(rows: &mut [PredictionRow], method: SmoothMethod, window_seconds: f64) -> Result<()> {
    let ids: Vec<&str> = rows.iter().map(|r| r.record.entity_id.as_str()).collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.record.frame_timestamp).collect();
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let smoothed = smooth_interleaved(&ids, &ts, &scores, method, window_seconds)?;
    for (r, s) in rows.iter_mut().zip(smoothed) {
        r.score = s;
    }
    Ok(())
}

pub fn smooth(input: &Path, output: &Path, method: SmoothMethod, window_seconds: f64, out: &mut dyn Write) -> Result<()> {
    let mut rows = parse_predictions(&read_text(input)?)?;
    smooth_rows(&mut rows, method, window_seconds)?;
    write_file(output, serialize_predictions(&rows))?;
    writeln!(out, "{} rows smoothed ({method}) to {}", rows.len(), output.display())?;
    Ok(())
}

pub fn score(cfg: &RunConfig, gt_path: &Path, pred_path: &Path, pr: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let gt = parse_annotations(&read_text(gt_path)?)?;
    let preds = parse_predictions(&read_text(pred_path)?)?;
    let report = evaluate_predictions(&gt, &preds, cfg.mapping())?;
    writeln!(out, "{report}")?;
    if let Some(path) = pr {
        write_file(path, pr_curve_csv(&pr_curve(&report.items)?))?;
    }
    Ok(())
}
