use super::annotations::{AvaLabel, LabelMapping};
use super::bundle::TrackBundle;
use crate::audio_features::CepstralFrames;
use crate::encoders::{TrackClip, WINDOW_LEN};
use crate::error::{Error, Result};

/// A `T`-frame clip centred on one frame of a track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub center: usize,
    /// Track frame shown at each clip position, clamped at the track ends.
    pub frame_indices: Vec<usize>,
    /// Unclamped timeline index of the clip's first frame; may be negative.
    pub first_frame: i64,
    pub label: AvaLabel,
    pub binary_label: bool,
}

impl TrainingExample {
    pub fn clip<'a>(&self, bundle: &'a TrackBundle, cepstra: &'a CepstralFrames) -> TrackClip<'a> {
        TrackClip {
            frames: self.frame_indices.iter().map(|&i| bundle.frame(i)).collect(),
            height: bundle.height,
            width: bundle.width,
            cepstra,
            first_frame: self.first_frame,
        }
    }
}

pub fn check_clip_len(t: usize) -> Result<()> {
    if t < WINDOW_LEN || t % 2 == 0 {
        return Err(Error::Config(format!(
            "clip length must be odd and at least {WINDOW_LEN}, got {t}"
        )));
    }
    Ok(())
}

/// Frame indices `[i − (T−1)/2, i + (T−1)/2]` clamped to the track.
pub fn clip_frame_indices(center: usize, t: usize, num_frames: usize) -> Vec<usize> {
    let half = (t / 2) as i64;
    let last = num_frames as i64 - 1;
    (-half..=half)
        .map(|d| (center as i64 + d).clamp(0, last) as usize)
        .collect()
}

pub fn make_examples(bundle: &TrackBundle, t: usize) -> Result<Vec<TrainingExample>> {
    make_examples_with(bundle, t, LabelMapping::default())
}

pub fn make_examples_with(bundle: &TrackBundle, t: usize, mapping: LabelMapping) -> Result<Vec<TrainingExample>> {
    check_clip_len(t)?;
    let n = bundle.num_frames();
    Ok(bundle
        .labels
        .iter()
        .enumerate()
        .map(|(i, &label)| TrainingExample {
            center: i,
            frame_indices: clip_frame_indices(i, t, n),
            first_frame: i as i64 - (t / 2) as i64,
            label,
            binary_label: mapping.is_positive(label),
        })
        .collect())
}
