//! Seeded synthetic talking-bar dataset.
//!
//! Each track alternates speaking and silent runs of geometric length. While
//! speaking, a bright bar in the middle of the frame changes height from
//! frame to frame and the audio is a harmonic tone whose amplitude follows
//! that height. While silent, the bar holds one height for the whole run and
//! the audio is noise of random per-frame loudness.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use super::annotations::AvaLabel;
use super::bundle::{dequantize_sample, quantize_sample, TrackBundle, FPS, SAMPLE_RATE};
use super::examples::check_clip_len;
use crate::audio_features::Waveform;
use crate::error::{Error, Result};

const SAMPLES_PER_FRAME: usize = (SAMPLE_RATE / FPS) as usize;
const BACKGROUND: u8 = 40;
const BACKGROUND_NOISE: u8 = 16;
const BAR_COLOUR: [u8; 3] = [230, 210, 190];
const HARMONICS: usize = 5;
const BOX: [f64; 4] = [0.25, 0.2, 0.75, 0.8];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_tracks: usize,
    pub frames_per_track: usize,
    /// Height and width of the square frames.
    pub size: usize,
    /// Long-run fraction of speaking frames.
    pub speaking_rate: f64,
    /// Mean speaking-run length in frames.
    pub mean_speaking_run: f64,
    /// Clip length the data will be cut into; tracks must be at least this long.
    pub clip_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_tracks: 20,
            frames_per_track: 200,
            size: 112,
            speaking_rate: 0.5,
            mean_speaking_run: 28.0,
            clip_len: 9,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        check_clip_len(self.clip_len)?;
        if self.frames_per_track < self.clip_len {
            return Err(Error::Config(format!(
                "{} frames per track is shorter than the clip length {}",
                self.frames_per_track, self.clip_len
            )));
        }
        if self.num_tracks == 0 {
            return Err(Error::Config("need at least one track".into()));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("frame size {} is below 8 pixels", self.size)));
        }
        if !(self.speaking_rate > 0.0 && self.speaking_rate < 1.0) {
            return Err(Error::Config(format!(
                "speaking rate must lie in (0, 1), got {}",
                self.speaking_rate
            )));
        }
        if !(self.mean_speaking_run >= 1.0) {
            return Err(Error::Config(format!(
                "mean speaking run must be at least one frame, got {}",
                self.mean_speaking_run
            )));
        }
        Ok(())
    }

    fn mean_silent_run(&self) -> f64 {
        (self.mean_speaking_run * (1.0 - self.speaking_rate) / self.speaking_rate).max(1.0)
    }
}

pub fn synthetic_video_id(track: usize) -> String {
    format!("synth_{track:03}")
}

pub fn synthetic_entity_id(track: usize) -> String {
    format!("synth_{track:03}_e0")
}

pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<TrackBundle>> {
    cfg.validate()?;
    (0..cfg.num_tracks)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            generate_track(cfg, k, &mut rng)
        })
        .collect()
}

/// Run lengths with mean `mean` frames: one plus a geometric count of failures.
fn run_length(mean: f64, rng: &mut impl Rng) -> usize {
    let g = Geometric::new(1.0 / mean).expect("probability in (0, 1]");
    1 + g.sample(rng) as usize
}

/// Per-frame speaking flags and bar heights (fraction of the frame height).
fn plan_track(cfg: &SyntheticConfig, rng: &mut impl Rng) -> (Vec<bool>, Vec<f64>, Vec<f64>) {
    let n = cfg.frames_per_track;
    let mut speaking = Vec::with_capacity(n);
    let mut heights = Vec::with_capacity(n);
    let mut pitch = Vec::with_capacity(n);
    let mut state = rng.random_bool(cfg.speaking_rate);
    while speaking.len() < n {
        let mean = if state { cfg.mean_speaking_run } else { cfg.mean_silent_run() };
        let len = run_length(mean, rng).min(n - speaking.len());
        if state {
            let rate_hz = rng.random_range(2.0..5.0);
            let phase = rng.random_range(0.0..TAU);
            let f0 = rng.random_range(100.0..220.0);
            for t in 0..len {
                heights.push(0.45 + 0.3 * (TAU * rate_hz * t as f64 / FPS as f64 + phase).sin());
                pitch.push(f0);
            }
        } else {
            let h = rng.random_range(0.15..0.75);
            heights.extend(std::iter::repeat_n(h, len));
            pitch.extend(std::iter::repeat_n(0.0, len));
        }
        speaking.extend(std::iter::repeat_n(state, len));
        state = !state;
    }
    (speaking, heights, pitch)
}

fn render_frame(size: usize, height: f64, rng: &mut impl Rng, out: &mut Vec<u8>) {
    let bar_rows = ((height * size as f64).round() as usize).clamp(1, size);
    let top = (size - bar_rows) / 2;
    let bar_cols = (size / 4).max(1);
    let left = (size - bar_cols) / 2;
    for y in 0..size {
        for x in 0..size {
            if (top..top + bar_rows).contains(&y) && (left..left + bar_cols).contains(&x) {
                out.extend_from_slice(&BAR_COLOUR);
            } else {
                for _ in 0..3 {
                    out.push(BACKGROUND + rng.random_range(0..BACKGROUND_NOISE));
                }
            }
        }
    }
}

fn generate_track(cfg: &SyntheticConfig, k: usize, rng: &mut ChaCha8Rng) -> Result<TrackBundle> {
    let n = cfg.frames_per_track;
    let (speaking, heights, pitch) = plan_track(cfg, rng);
    let mut frames = Vec::with_capacity(n * cfg.size * cfg.size * 3);
    for &h in &heights {
        render_frame(cfg.size, h, rng, &mut frames);
    }
    let norm = (0..HARMONICS).map(|j| 0.5 / ((j + 1) * (j + 1)) as f64).sum::<f64>().sqrt();
    let mut samples = Vec::with_capacity(n * SAMPLES_PER_FRAME);
    for t in 0..n {
        let loudness = if speaking[t] {
            0.5 * heights[t]
        } else {
            rng.random_range(0.02..0.3)
        };
        for s in 0..SAMPLES_PER_FRAME {
            let time = (t * SAMPLES_PER_FRAME + s) as f64 / SAMPLE_RATE as f64;
            let x = if speaking[t] {
                let tone: f64 = (1..=HARMONICS)
                    .map(|j| (TAU * j as f64 * pitch[t] * time).sin() / j as f64)
                    .sum();
                loudness * tone / norm / 2.0 + rng.random_range(-0.005..0.005)
            } else {
                loudness * rng.random_range(-1.0..1.0)
            };
            samples.push(dequantize_sample(quantize_sample(x as f32)));
        }
    }
    let labels = speaking
        .iter()
        .map(|&s| if s { AvaLabel::SpeakingAudible } else { AvaLabel::NotSpeaking })
        .collect();
    TrackBundle::new(
        synthetic_entity_id(k),
        synthetic_video_id(k),
        0,
        BOX,
        cfg.size,
        cfg.size,
        frames,
        Waveform::new(samples, SAMPLE_RATE),
        labels,
    )
}

/// Track indices for training and validation; the last `round(n·fraction)`
/// tracks (at least one when `n ≥ 2`) are held out.
pub fn split_validation(num_tracks: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut val = (num_tracks as f64 * fraction).round() as usize;
    if num_tracks >= 2 {
        val = val.clamp(1, num_tracks - 1);
    } else {
        val = 0;
    }
    let cut = num_tracks - val;
    ((0..cut).collect(), (cut..num_tracks).collect())
}
