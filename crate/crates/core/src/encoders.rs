//! Front-end encoders and their sliding-window application.
//!
//! The video encoder sees five RGB frames and collapses time in its first
//! (3-D) convolution; the audio encoder sees a 13×20 MFCC block. Both end in
//! a linear map to a 512-D embedding. Sliding the five-frame window one
//! frame at a time over a `T`-frame clip yields `T − 4` embeddings per stream.

use rand::Rng;

use crate::audio_features::{slice_audio_window, CepstralFrames, NUM_COEFFS, WINDOW_FRAMES};
use crate::error::{Error, Result};
use crate::numcore::{LayerSpec, ParamSet, Scalar, Stack, Tape, Var};

pub const EMBEDDING_DIM: usize = 512;
pub const WINDOW_LEN: usize = 5;
pub const VIDEO_PREFIX: &str = "video_encoder";
pub const AUDIO_PREFIX: &str = "audio_encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Channel widths divided by 8.
    Tiny,
    Full,
}

impl Preset {
    fn divisor(self) -> usize {
        match self {
            Preset::Tiny => 8,
            Preset::Full => 1,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Audio,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub preset: Preset,
    /// Square face-crop side in pixels.
    pub resolution: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            preset: Preset::Full,
            resolution: 112,
        }
    }
}

/// The two front-end layer stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub video: Stack,
    pub audio: Stack,
}

impl Encoders {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let d = config.preset.divisor();
        let pool = LayerSpec::maxpool([3, 3], [2, 2]);
        let video = Stack::new(
            VIDEO_PREFIX,
            vec![
                LayerSpec::Conv3d {
                    out_channels: 96 / d,
                    kernel: [WINDOW_LEN, 7, 7],
                    stride: [1, 2, 2],
                    pad: [0, 0, 0],
                },
                LayerSpec::Relu,
                LayerSpec::FoldTime,
                pool,
                LayerSpec::conv2d(256 / d, 5, 2, 1),
                LayerSpec::Relu,
                pool,
                LayerSpec::conv2d(512 / d, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv2d(512 / d, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv2d(512 / d, 3, 1, 1),
                LayerSpec::Relu,
                pool,
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    out_dim: EMBEDDING_DIM,
                },
            ],
        );
        let audio = Stack::new(
            AUDIO_PREFIX,
            vec![
                LayerSpec::conv2d(64 / d, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::maxpool([1, 2], [1, 2]),
                LayerSpec::conv2d(192 / d, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::conv2d(256 / d, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::maxpool([2, 2], [2, 2]),
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    out_dim: EMBEDDING_DIM,
                },
            ],
        );
        let enc = Encoders {
            config,
            video,
            audio,
        };
        enc.video.shapes(&enc.video_input_shape(1)).map_err(|e| {
            Error::Config(format!(
                "resolution {} is too small for the video encoder: {e}",
                config.resolution
            ))
        })?;
        Ok(enc)
    }

    pub fn video_input_shape(&self, batch: usize) -> Vec<usize> {
        let r = self.config.resolution;
        vec![batch, 3, WINDOW_LEN, r, r]
    }

    pub fn audio_input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, 1, NUM_COEFFS, WINDOW_FRAMES]
    }

    pub fn init<T: Scalar>(&self, rng: &mut impl Rng) -> Result<ParamSet<T>> {
        let mut params = self.video.init(&self.video_input_shape(1), rng)?;
        params.extend(self.audio.init(&self.audio_input_shape(1), rng)?)?;
        Ok(params)
    }

    /// `[N, 3, 5, H, W]` pixels in [0, 1] to `[N, 512]`.
    pub fn video_forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamSet<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        let expect = self.video_input_shape(s.first().copied().unwrap_or(1));
        check_shape("video encoder", &s, &expect)?;
        self.video.forward(tape, params, x)
    }

    /// `[N, 1, 13, 20]` cepstra to `[N, 512]`.
    pub fn audio_forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamSet<T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        let expect = self.audio_input_shape(s.first().copied().unwrap_or(1));
        check_shape("audio encoder", &s, &expect)?;
        self.audio.forward(tape, params, x)
    }

    /// Embeds every five-frame window of every clip.
    /// Returns `(audio, video)` variables shaped `[B, T − 4, 512]`.
    pub fn embed_clips<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        params: &ParamSet<T>,
        clips: &[TrackClip<'_>],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Input("no clips to encode".into()))?;
        let t = first.len();
        if t < WINDOW_LEN {
            return Err(Error::Input(format!(
                "clip has {t} frames, at least {WINDOW_LEN} needed"
            )));
        }
        let l = t - (WINDOW_LEN - 1);
        let r = self.config.resolution;
        let plane = r * r;
        let win_px = 3 * WINDOW_LEN * plane;
        let mut pixels = vec![T::zero(); clips.len() * l * win_px];
        let mut cepstra = vec![T::zero(); clips.len() * l * NUM_COEFFS * WINDOW_FRAMES];
        let lut: Vec<T> = (0..256).map(|v| T::of(v as f64 / 255.0)).collect();
        for (b, clip) in clips.iter().enumerate() {
            if clip.len() != t {
                return Err(Error::Input("clips in one batch must share their length".into()));
            }
            if clip.height != r || clip.width != r {
                return Err(Error::dim(
                    "embed_clips",
                    3,
                    format!("frames are {}x{}, encoder expects {r}x{r}", clip.height, clip.width),
                ));
            }
            for j in 0..l {
                let win = &mut pixels[(b * l + j) * win_px..(b * l + j + 1) * win_px];
                for (dt, frame) in clip.frames[j..j + WINDOW_LEN].iter().enumerate() {
                    if frame.len() != plane * 3 {
                        return Err(Error::Input(format!(
                            "frame has {} bytes, expected {}",
                            frame.len(),
                            plane * 3
                        )));
                    }
                    for (p, px) in frame.chunks_exact(3).enumerate() {
                        for c in 0..3 {
                            win[(c * WINDOW_LEN + dt) * plane + p] = lut[px[c] as usize];
                        }
                    }
                }
                let block = slice_audio_window(clip.cepstra, clip.first_frame + j as i64)?;
                let dst = &mut cepstra[(b * l + j) * block.len()..(b * l + j + 1) * block.len()];
                for (d, &s) in dst.iter_mut().zip(&block) {
                    *d = T::of(f64::from(s));
                }
            }
        }
        let n = clips.len() * l;
        let video_in = tape.constant(&self.video_input_shape(n), pixels)?;
        let audio_in = tape.constant(&self.audio_input_shape(n), cepstra)?;
        let video = self
            .video_forward(tape, params, video_in)?
            .reshape(&[clips.len(), l, EMBEDDING_DIM])?;
        let audio = self
            .audio_forward(tape, params, audio_in)?
            .reshape(&[clips.len(), l, EMBEDDING_DIM])?;
        Ok((audio, video))
    }
}

fn check_shape(what: &'static str, got: &[usize], expect: &[usize]) -> Result<()> {
    if got.len() != expect.len() {
        return Err(Error::dim(what, 0, format!("expected rank {}, got {got:?}", expect.len())));
    }
    match got.iter().zip(expect).position(|(a, b)| a != b) {
        Some(ax) => Err(Error::dim(what, ax, format!("expected {expect:?}, got {got:?}"))),
        None => Ok(()),
    }
}

/// A run of video frames (row-major RGB bytes) with the track's cepstra.
/// `first_frame` is the cepstral-timeline index of `frames[0]`; it may lie
/// outside the track when frames were edge-replicated.
#[derive(Debug, Clone)]
pub struct TrackClip<'a> {
    pub frames: Vec<&'a [u8]>,
    pub height: usize,
    pub width: usize,
    pub cepstra: &'a CepstralFrames,
    pub first_frame: i64,
}

impl TrackClip<'_> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One stream's `512 × (T − 4)` embeddings, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub stream: Stream,
    embeddings: Vec<f32>,
    pub center_frame_indices: Vec<i64>,
}

impl EmbeddingSequence {
    pub fn new(stream: Stream, embeddings: Vec<f32>, center_frame_indices: Vec<i64>) -> Result<Self> {
        if embeddings.len() != center_frame_indices.len() * EMBEDDING_DIM {
            return Err(Error::dim(
                "embedding sequence",
                1,
                format!(
                    "{} values for {} columns",
                    embeddings.len(),
                    center_frame_indices.len()
                ),
            ));
        }
        Ok(EmbeddingSequence {
            stream,
            embeddings,
            center_frame_indices,
        })
    }

    pub fn rows(&self) -> usize {
        EMBEDDING_DIM
    }

    pub fn cols(&self) -> usize {
        self.center_frame_indices.len()
    }

    pub fn column(&self, j: usize) -> &[f32] {
        &self.embeddings[j * EMBEDDING_DIM..(j + 1) * EMBEDDING_DIM]
    }

    /// Time-major `[cols, 512]` buffer.
    pub fn as_time_major(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn reversed(&self) -> Self {
        let mut embeddings = Vec::with_capacity(self.embeddings.len());
        for j in (0..self.cols()).rev() {
            embeddings.extend_from_slice(self.column(j));
        }
        EmbeddingSequence {
            stream: self.stream,
            embeddings,
            center_frame_indices: self.center_frame_indices.iter().rev().copied().collect(),
        }
    }
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

/// Embedding of one `3 × 5 × H × W` window (pixels in [0, 1], channel-major).
pub fn encode_video_window<T: Scalar>(encoders: &Encoders, window: &[T], params: &ParamSet<T>) -> Result<Vec<T>> {
    let tape = Tape::inference();
    let shape = encoders.video_input_shape(1);
    let need: usize = shape.iter().product();
    if window.len() != need {
        return Err(Error::dim(
            "encode_video_window",
            0,
            format!("window has {} values, expected {need} for {:?}", window.len(), &shape[1..]),
        ));
    }
    let x = tape.constant(&shape, window.to_vec())?;
    Ok(encoders.video_forward(&tape, params, x)?.value().to_vec())
}

/// Embedding of one 13×20 MFCC block (coefficient-major).
pub fn encode_audio_window<T: Scalar>(encoders: &Encoders, block: &[T], params: &ParamSet<T>) -> Result<Vec<T>> {
    let tape = Tape::inference();
    let shape = encoders.audio_input_shape(1);
    if block.len() != NUM_COEFFS * WINDOW_FRAMES {
        return Err(Error::dim(
            "encode_audio_window",
            0,
            format!("block has {} values, expected 13x20", block.len()),
        ));
    }
    let x = tape.constant(&shape, block.to_vec())?;
    Ok(encoders.audio_forward(&tape, params, x)?.value().to_vec())
}

/// Audio and video embedding sequences for a clip of `T ≥ 5` frames.
pub fn sliding_encode<T: Scalar>(
    encoders: &Encoders,
    clip: &TrackClip<'_>,
    params: &ParamSet<T>,
) -> Result<(EmbeddingSequence, EmbeddingSequence)> {
    if clip.len() < WINDOW_LEN {
        return Err(Error::Input(format!(
            "sliding_encode needs at least {WINDOW_LEN} frames, got {}",
            clip.len()
        )));
    }
    let tape = Tape::inference();
    let (audio, video) = encoders.embed_clips(&tape, params, std::slice::from_ref(clip))?;
    let l = clip.len() - (WINDOW_LEN - 1);
    let centers: Vec<i64> = (0..l as i64).map(|j| clip.first_frame + j + 2).collect();
    Ok((
        EmbeddingSequence::new(Stream::Audio, to_f32(&audio.value()), centers.clone())?,
        EmbeddingSequence::new(Stream::Video, to_f32(&video.value()), centers)?,
    ))
}
