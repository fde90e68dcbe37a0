//! The full detector: front-end encoders plus one or both back-ends, with
//! batched training and per-track scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio_features::{compute_mfcc, CepstralFrames};
use crate::backends::{ensemble, lstm, speaking_probability, tc, BackendKind, Readout};
use crate::data::{balanced_batches, check_clip_len, make_examples_with, LabelMapping, TrackBundle, TrainingExample};
use crate::encoders::{EncoderConfig, Encoders, TrackClip, EMBEDDING_DIM, VIDEO_PREFIX, AUDIO_PREFIX, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::eval::{average_precision, ScoredLabel};
use crate::numcore::{adam_step, AdamState, ParamSet, Tape, Var};

/// Clips scored per forward pass during inference.
const SCORE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// `Ensemble` trains both back-ends on a shared front-end.
    pub backend: BackendKind,
    pub clip_len: usize,
    pub readout: Readout,
    pub freeze_frontend: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            backend: BackendKind::Lstm,
            clip_len: 9,
            readout: Readout::Center,
            freeze_frontend: false,
        }
    }
}

/// A track with its mean-normalised cepstra.
#[derive(Debug, Clone)]
pub struct PreparedTrack {
    pub bundle: TrackBundle,
    pub cepstra: CepstralFrames,
}

impl PreparedTrack {
    pub fn new(bundle: TrackBundle) -> Result<Self> {
        let mut cepstra = compute_mfcc(&bundle.waveform)?;
        cepstra.subtract_mean();
        Ok(PreparedTrack { bundle, cepstra })
    }

    fn window_clip(&self, start: i64) -> TrackClip<'_> {
        let last = self.bundle.num_frames() as i64 - 1;
        TrackClip {
            frames: (start..start + WINDOW_LEN as i64)
                .map(|i| self.bundle.frame(i.clamp(0, last) as usize))
                .collect(),
            height: self.bundle.height,
            width: self.bundle.width,
            cepstra: &self.cepstra,
            first_frame: start,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoders: Encoders,
}

fn members(kind: BackendKind) -> &'static [BackendKind] {
    match kind {
        BackendKind::Lstm => &[BackendKind::Lstm],
        BackendKind::Tc => &[BackendKind::Tc],
        BackendKind::Ensemble => &[BackendKind::Lstm, BackendKind::Tc],
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        check_clip_len(config.clip_len)?;
        Ok(Model {
            config,
            encoders: Encoders::new(config.encoder)?,
        })
    }

    /// Fresh parameters for the front-end and every configured back-end.
    pub fn init(&self, seed: u64) -> Result<ParamSet<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = self.encoders.init(&mut rng)?;
        for &m in members(self.config.backend) {
            params.extend(match m {
                BackendKind::Lstm => lstm::init(EMBEDDING_DIM, lstm::HIDDEN, &mut rng)?,
                _ => tc::init(EMBEDDING_DIM, tc::FILTERS, &mut rng)?,
            })?;
        }
        if self.config.freeze_frontend {
            freeze_frontend(&mut params);
        }
        Ok(params)
    }

    fn member_logits<'t>(
        &self,
        tape: &'t Tape<f32>,
        params: &ParamSet<f32>,
        kind: BackendKind,
        audio: Var<'t, f32>,
        video: Var<'t, f32>,
    ) -> Result<Var<'t, f32>> {
        match kind {
            BackendKind::Lstm => lstm::logits(tape, params, audio, video, self.config.readout),
            _ => tc::logits(tape, params, audio, video, self.config.readout),
        }
    }

    /// Mean cross-entropy over the configured back-ends for a batch of clips.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape<f32>,
        params: &ParamSet<f32>,
        clips: &[TrackClip<'_>],
        targets: &[usize],
    ) -> Result<Var<'t, f32>> {
        let (audio, video) = self.encoders.embed_clips(tape, params, clips)?;
        let ms = members(self.config.backend);
        let mut total: Option<Var<'t, f32>> = None;
        for &m in ms {
            let ce = self.member_logits(tape, params, m, audio, video)?.softmax_cross_entropy(targets)?;
            total = Some(match total {
                None => ce,
                Some(t) => t.add(&ce)?,
            });
        }
        total
            .expect("at least one back-end")
            .scale(1.0 / ms.len() as f32)
    }

    /// One Adam update; returns the batch loss before the update.
    pub fn train_step(
        &self,
        params: &mut ParamSet<f32>,
        adam: &mut AdamState<f32>,
        lr: f32,
        clips: &[TrackClip<'_>],
        targets: &[usize],
    ) -> Result<f64> {
        let tape = Tape::new();
        let loss = self.batch_loss(&tape, params, clips, targets)?;
        let value = f64::from(loss.value()[0]);
        let grads = tape.backward(loss)?;
        grads.write_to(params)?;
        adam_step(params, adam, lr)?;
        Ok(value)
    }

    /// Speaking probability for every frame of a track, per back-end member.
    /// Each frame is the centre of a `T`-frame clip with edge replication.
    pub fn score_members(&self, params: &ParamSet<f32>, track: &PreparedTrack) -> Result<Vec<Vec<f64>>> {
        let n = track.bundle.num_frames();
        let t = self.config.clip_len;
        let half = (t / 2) as i64;
        let steps = t - (WINDOW_LEN - 1);
        // every window any clip needs, indexed by start frame offset by `half`
        let starts: Vec<i64> = (-half..n as i64 - half + (steps as i64 - 1)).collect();
        let mut audio_rows = Vec::with_capacity(starts.len() * EMBEDDING_DIM);
        let mut video_rows = Vec::with_capacity(starts.len() * EMBEDDING_DIM);
        for chunk in starts.chunks(SCORE_CHUNK * steps) {
            let tape = Tape::inference();
            let clips: Vec<TrackClip<'_>> = chunk.iter().map(|&s| track.window_clip(s)).collect();
            let (a, v) = self.encoders.embed_clips(&tape, params, &clips)?;
            audio_rows.extend_from_slice(&a.value());
            video_rows.extend_from_slice(&v.value());
        }
        let ms = members(self.config.backend);
        let mut out = vec![Vec::with_capacity(n); ms.len()];
        let frame_ids: Vec<usize> = (0..n).collect();
        for frames in frame_ids.chunks(SCORE_CHUNK) {
            let gather = |rows: &[f32]| -> Vec<f32> {
                // frame i's clip uses windows i .. i + steps in `starts` order
                frames
                    .iter()
                    .flat_map(|&i| rows[i * EMBEDDING_DIM..(i + steps) * EMBEDDING_DIM].iter().copied())
                    .collect()
            };
            let tape = Tape::inference();
            let shape = [frames.len(), steps, EMBEDDING_DIM];
            let audio = tape.constant(&shape, gather(&audio_rows))?;
            let video = tape.constant(&shape, gather(&video_rows))?;
            for (k, &m) in ms.iter().enumerate() {
                let logits = self.member_logits(&tape, params, m, audio, video)?.value();
                out[k].extend(
                    logits
                        .chunks_exact(2)
                        .map(|l| speaking_probability([f64::from(l[0]), f64::from(l[1])])),
                );
            }
        }
        Ok(out)
    }

    /// Per-frame scores from the configured back-end, or the member mean for the ensemble.
    pub fn score_track(&self, params: &ParamSet<f32>, track: &PreparedTrack) -> Result<Vec<f64>> {
        let members = self.score_members(params, track)?;
        let n = track.bundle.num_frames();
        Ok((0..n)
            .map(|i| ensemble(&members.iter().map(|m| m[i]).collect::<Vec<_>>()))
            .collect())
    }

    /// Pooled AP of [`Model::score_track`] over every frame of `tracks`.
    pub fn evaluate(&self, params: &ParamSet<f32>, tracks: &[PreparedTrack], mapping: LabelMapping) -> Result<f64> {
        let mut items = Vec::new();
        for t in tracks {
            let scores = self.score_track(params, t)?;
            items.extend(
                scores
                    .iter()
                    .zip(t.bundle.binary_labels(mapping))
                    .map(|(&s, l)| ScoredLabel::new(s, l)),
            );
        }
        average_precision(&items)
    }
}

/// Stops front-end parameters from receiving updates.
pub fn freeze_frontend(params: &mut ParamSet<f32>) {
    for (name, t) in params.iter_mut() {
        if name.starts_with(VIDEO_PREFIX) || name.starts_with(AUDIO_PREFIX) {
            t.requires_grad = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Validate every this many steps (and after the last step).
    pub eval_every: usize,
    /// Stop once validation mAP reaches this value.
    pub target_map: Option<f64>,
    pub mapping: LabelMapping,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            learning_rate: 1e-2,
            batch_size: 64,
            max_steps: 2000,
            seed: 0,
            eval_every: 50,
            target_map: None,
            mapping: LabelMapping::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub val_map: Option<f64>,
}

/// Clips of every frame of every track, with their track index.
pub fn examples_for(tracks: &[PreparedTrack], clip_len: usize, mapping: LabelMapping) -> Result<Vec<(usize, TrainingExample)>> {
    let mut out = Vec::new();
    for (k, t) in tracks.iter().enumerate() {
        out.extend(make_examples_with(&t.bundle, clip_len, mapping)?.into_iter().map(|e| (k, e)));
    }
    Ok(out)
}

/// Trains on balanced batches, calling `on_log` after every step. Returns the
/// log; stops early when `target_map` is reached on `val`.
pub fn train(
    model: &Model,
    params: &mut ParamSet<f32>,
    train_tracks: &[PreparedTrack],
    val_tracks: &[PreparedTrack],
    opts: &TrainOptions,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<Vec<LogEntry>> {
    if !(opts.learning_rate > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", opts.learning_rate)));
    }
    let examples = examples_for(train_tracks, model.config.clip_len, opts.mapping)?;
    let labels: Vec<bool> = examples.iter().map(|(_, e)| e.binary_label).collect();
    let sampler = balanced_batches(&labels, opts.batch_size, opts.seed)?;
    let mut adam = AdamState::new(params);
    let mut log = Vec::new();
    for (step, batch) in sampler.take(opts.max_steps).enumerate() {
        let clips: Vec<TrackClip<'_>> = batch
            .iter()
            .map(|&i| {
                let (k, e) = &examples[i];
                e.clip(&train_tracks[*k].bundle, &train_tracks[*k].cepstra)
            })
            .collect();
        let targets: Vec<usize> = batch.iter().map(|&i| usize::from(labels[i])).collect();
        let loss = model
            .train_step(params, &mut adam, opts.learning_rate, &clips, &targets)
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("training diverged at step {step}: {m}")),
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {step}")));
        }
        let last = step + 1 == opts.max_steps;
        let val_map = if !val_tracks.is_empty() && opts.eval_every > 0 && ((step + 1) % opts.eval_every == 0 || last) {
            Some(model.evaluate(params, val_tracks, opts.mapping)?)
        } else {
            None
        };
        let entry = LogEntry { step, loss, val_map };
        on_log(&entry);
        log.push(entry);
        if let (Some(target), Some(m)) = (opts.target_map, val_map) {
            if m >= target {
                break;
            }
        }
    }
    Ok(log)
}
