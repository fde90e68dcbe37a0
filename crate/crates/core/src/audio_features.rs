//! MFCC extraction at 100 frames per second and 13×20 windowing aligned to
//! five 25 fps video frames.
//!
//! Per frame: pre-emphasis (0.97, first sample against itself) → Hamming
//! window → 512-point magnitude spectrum → 40 triangular mel filters from
//! 0 Hz to Nyquist → natural log floored at 1e−10 → DCT-II → c0..c12.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const NUM_COEFFS: usize = 13;
pub const FRAME_RATE: f64 = 100.0;
pub const VIDEO_FPS: f64 = 25.0;
/// Cepstral frames per video frame at the fixed rates.
pub const FRAMES_PER_VIDEO_FRAME: usize = 4;
/// Cepstral frames in one audio-encoder window (0.2 s).
pub const WINDOW_FRAMES: usize = 20;
pub const NUM_MEL_FILTERS: usize = 40;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// `13 × N` coefficients, coefficient-major (`coefficients[c * N + k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct CepstralFrames {
    coefficients: Vec<f32>,
    num_frames: usize,
    /// Centre time of frame 0, seconds.
    pub origin_time: f64,
    /// Analysis window length, seconds.
    pub window_seconds: f64,
}

impl CepstralFrames {
    pub fn from_columns(columns: &[[f32; NUM_COEFFS]], origin_time: f64, window_seconds: f64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Input("no cepstral frames".into()));
        }
        let n = columns.len();
        let mut coefficients = vec![0.0; NUM_COEFFS * n];
        for (k, col) in columns.iter().enumerate() {
            for (c, &v) in col.iter().enumerate() {
                coefficients[c * n + k] = v;
            }
        }
        Ok(CepstralFrames {
            coefficients,
            num_frames: n,
            origin_time,
            window_seconds,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn frame_rate(&self) -> f64 {
        FRAME_RATE
    }

    pub fn get(&self, coeff: usize, frame: usize) -> f32 {
        self.coefficients[coeff * self.num_frames + frame]
    }

    pub fn column(&self, frame: usize) -> [f32; NUM_COEFFS] {
        std::array::from_fn(|c| self.get(c, frame))
    }

    /// Start of the analysis window of `frame`, seconds.
    pub fn frame_start_time(&self, frame: i64) -> f64 {
        self.origin_time - self.window_seconds / 2.0 + frame as f64 / FRAME_RATE
    }

    /// Subtracts the per-coefficient mean over all frames.
    pub fn subtract_mean(&mut self) {
        let n = self.num_frames;
        for row in self.coefficients.chunks_mut(n) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            row.iter_mut().for_each(|v| *v = (f64::from(*v) - mean) as f32);
        }
    }
}

/// Reusable MFCC pipeline for one sample rate.
pub struct MfccExtractor {
    sample_rate: u32,
    window: usize,
    hop: usize,
    nfft: usize,
    hamming: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("sample_rate", &self.sample_rate)
            .field("window", &self.window)
            .field("hop", &self.hop)
            .field("nfft", &self.nfft)
            .finish()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MfccExtractor {
    pub fn new(sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let sr = f64::from(sample_rate);
        let window = (0.025 * sr).round() as usize;
        let hop = (0.010 * sr).round() as usize;
        let nfft = window.next_power_of_two();
        let hamming = (0..window)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (window as f64 - 1.0)).cos())
            .collect();

        let bins = nfft / 2 + 1;
        let top = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..NUM_MEL_FILTERS + 2)
            .map(|i| mel_to_hz(top * i as f64 / (NUM_MEL_FILTERS + 1) as f64))
            .collect();
        let filters = (0..NUM_MEL_FILTERS)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .filter_map(|k| {
                        let f = k as f64 * sr / nfft as f64;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();

        let m = NUM_MEL_FILTERS as f64;
        let dct = (0..NUM_COEFFS)
            .flat_map(|n| {
                let scale = if n == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                (0..NUM_MEL_FILTERS)
                    .map(move |j| scale * (PI * n as f64 * (j as f64 + 0.5) / m).cos())
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(nfft);
        Ok(MfccExtractor {
            sample_rate,
            window,
            hop,
            nfft,
            hamming,
            filters,
            dct,
            fft,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window
    }

    pub fn hop_len(&self) -> usize {
        self.hop
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.window {
            0
        } else {
            (num_samples - self.window) / self.hop + 1
        }
    }

    /// Pre-emphasised, Hamming-windowed copy of one analysis frame.
    pub fn prepare_frame(&self, frame: &[f32]) -> Vec<f64> {
        (0..self.window)
            .map(|n| {
                let x = f64::from(frame[n]);
                let prev = f64::from(frame[n.saturating_sub(1)]);
                (x - PRE_EMPHASIS * prev) * self.hamming[n]
            })
            .collect()
    }

    /// `|X[k]|` for `k = 0..=nfft/2` of the zero-padded prepared frame.
    pub fn magnitude_spectrum(&self, prepared: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = prepared
            .iter()
            .map(|&re| Complex::new(re, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.nfft)
            .collect();
        self.fft.process(&mut buf);
        buf[..self.nfft / 2 + 1].iter().map(|c| c.norm()).collect()
    }

    /// Cepstra from a magnitude spectrum.
    pub fn cepstrum(&self, spectrum: &[f64]) -> [f64; NUM_COEFFS] {
        let logmel: Vec<f64> = self
            .filters
            .iter()
            .map(|f| {
                let e: f64 = f.iter().map(|&(k, w)| w * spectrum[k]).sum();
                e.max(LOG_FLOOR).ln()
            })
            .collect();
        std::array::from_fn(|n| {
            self.dct[n * NUM_MEL_FILTERS..(n + 1) * NUM_MEL_FILTERS]
                .iter()
                .zip(&logmel)
                .map(|(a, b)| a * b)
                .sum()
        })
    }

    pub fn filterbank(&self) -> &[Vec<(usize, f64)>] {
        &self.filters
    }

    pub fn compute(&self, w: &Waveform) -> Result<CepstralFrames> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::Input(format!(
                "waveform at {} Hz given to a {} Hz extractor",
                w.sample_rate, self.sample_rate
            )));
        }
        if w.samples.len() < self.window {
            return Err(Error::Input(format!(
                "waveform has {} samples, at least {} (25 ms) needed",
                w.samples.len(),
                self.window
            )));
        }
        if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("sample {i} is not finite")));
        }
        let n = self.num_frames(w.samples.len());
        let columns: Vec<[f32; NUM_COEFFS]> = (0..n)
            .map(|k| {
                let frame = &w.samples[k * self.hop..k * self.hop + self.window];
                let c = self.cepstrum(&self.magnitude_spectrum(&self.prepare_frame(frame)));
                c.map(|v| v as f32)
            })
            .collect();
        let sr = f64::from(self.sample_rate);
        let window_seconds = self.window as f64 / sr;
        CepstralFrames::from_columns(&columns, window_seconds / 2.0, window_seconds)
    }
}

/// MFCCs of a waveform with a freshly built extractor.
pub fn compute_mfcc(w: &Waveform) -> Result<CepstralFrames> {
    MfccExtractor::new(w.sample_rate)?.compute(w)
}

/// The 13×20 block (coefficient-major) aligned with video frames `[i, i+4]`.
/// Columns outside the available range replicate the nearest edge column.
pub fn slice_audio_window(c: &CepstralFrames, video_frame_index: i64) -> Result<Vec<f32>> {
    let n = c.num_frames();
    if n == 0 {
        return Err(Error::Input("empty cepstral frames".into()));
    }
    let start = video_frame_index * FRAMES_PER_VIDEO_FRAME as i64;
    let mut out = vec![0.0; NUM_COEFFS * WINDOW_FRAMES];
    for t in 0..WINDOW_FRAMES {
        let k = (start + t as i64).clamp(0, n as i64 - 1) as usize;
        for coeff in 0..NUM_COEFFS {
            out[coeff * WINDOW_FRAMES + t] = c.get(coeff, k);
        }
    }
    Ok(out)
}

/// Start time (s) of video frame `i` at the fixed 25 fps.
pub fn video_frame_start(i: i64) -> f64 {
    i as f64 / VIDEO_FPS
}
