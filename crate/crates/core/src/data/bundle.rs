//! Directory-per-entity track bundles.
//!
//! ```text
//! <dir>/manifest.txt   key=value lines
//! <dir>/frames.rgb     num_frames × height × width × 3 bytes, row-major RGB
//! <dir>/audio.s16le    mono 16-bit little-endian PCM
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::annotations::{AnnotationRecord, AvaLabel, LabelMapping};
use crate::audio_features::Waveform;
use crate::error::{Error, Result};

pub const FPS: u32 = 25;
pub const SAMPLE_RATE: u32 = 16_000;
pub const MIN_FRAMES: usize = 5;
const DURATION_SLACK: f64 = 0.02;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FRAMES_FILE: &str = "frames.rgb";
pub const AUDIO_FILE: &str = "audio.s16le";

/// One face track: cropped frames, the matching audio and per-frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackBundle {
    pub entity_id: String,
    pub video_id: String,
    /// Timestamp of frame 0 in milliseconds.
    pub start_ms: i64,
    pub bbox: [f64; 4],
    pub height: usize,
    pub width: usize,
    frames: Vec<u8>,
    pub waveform: Waveform,
    pub labels: Vec<AvaLabel>,
}

impl TrackBundle {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        entity_id: impl Into<String>,
        video_id: impl Into<String>,
        start_ms: i64,
        bbox: [f64; 4],
        height: usize,
        width: usize,
        frames: Vec<u8>,
        waveform: Waveform,
        labels: Vec<AvaLabel>,
    ) -> Result<Self> {
        let entity_id = entity_id.into();
        let frame_bytes = height * width * 3;
        if frame_bytes == 0 || frames.len() % frame_bytes != 0 {
            return Err(Error::Input(format!(
                "track `{entity_id}`: {} frame bytes is not a multiple of {height}x{width}x3",
                frames.len()
            )));
        }
        let n = frames.len() / frame_bytes;
        if n < MIN_FRAMES {
            return Err(Error::Input(format!(
                "track `{entity_id}` has {n} frames, need at least {MIN_FRAMES}"
            )));
        }
        if labels.len() != n {
            return Err(Error::Input(format!(
                "track `{entity_id}`: {} labels for {n} frames",
                labels.len()
            )));
        }
        let needed = n as f64 / FPS as f64 - DURATION_SLACK;
        if waveform.duration() < needed {
            return Err(Error::Input(format!(
                "track `{entity_id}`: audio lasts {:.3} s but frames need {needed:.3} s",
                waveform.duration()
            )));
        }
        Ok(TrackBundle {
            entity_id,
            video_id: video_id.into(),
            start_ms,
            bbox,
            height,
            width,
            frames,
            waveform,
            labels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.labels.len()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn frame_bytes(&self) -> &[u8] {
        &self.frames
    }

    /// Timestamp of frame `i` in seconds, rounded to whole milliseconds.
    pub fn timestamp(&self, i: usize) -> f64 {
        (self.start_ms + 40 * i as i64) as f64 / 1000.0
    }

    pub fn binary_labels(&self, mapping: LabelMapping) -> Vec<bool> {
        self.labels.iter().map(|&l| mapping.is_positive(l)).collect()
    }

    /// One annotation row per frame.
    pub fn annotation_records(&self) -> Vec<AnnotationRecord> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, &label)| AnnotationRecord {
                video_id: self.video_id.clone(),
                frame_timestamp: self.timestamp(i),
                bbox: self.bbox,
                label,
                entity_id: self.entity_id.clone(),
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = format!(
            "entity_id={}\nfps={FPS}\nheight={}\nwidth={}\nnum_frames={}\nsample_rate={}\n",
            self.entity_id,
            self.height,
            self.width,
            self.num_frames(),
            self.waveform.sample_rate
        );
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        fs::write(dir.join(FRAMES_FILE), &self.frames)?;
        fs::write(dir.join(AUDIO_FILE), encode_pcm(&self.waveform.samples))?;
        Ok(())
    }

    /// Reads a bundle and attaches labels from the annotation rows of its entity.
    /// Frame `i` is the row whose timestamp is `i / 25` s after the entity's earliest row.
    pub fn read(dir: &Path, annotations: &[AnnotationRecord]) -> Result<Self> {
        let manifest = Manifest::read(&dir.join(MANIFEST_FILE))?;
        let frames = fs::read(dir.join(FRAMES_FILE))?;
        let expected = manifest.num_frames * manifest.height * manifest.width * 3;
        if frames.len() != expected {
            return Err(Error::Input(format!(
                "{}: {} frame bytes, manifest implies {expected}",
                dir.display(),
                frames.len()
            )));
        }
        let pcm = fs::read(dir.join(AUDIO_FILE))?;
        let waveform = Waveform::new(decode_pcm(&pcm)?, manifest.sample_rate);
        let rows: Vec<&AnnotationRecord> = annotations
            .iter()
            .filter(|r| r.entity_id == manifest.entity_id)
            .collect();
        let (video_id, start_ms, bbox, labels) = labels_from_rows(&manifest.entity_id, &rows, manifest.num_frames)?;
        Self::new(
            manifest.entity_id,
            video_id,
            start_ms,
            bbox,
            manifest.height,
            manifest.width,
            frames,
            waveform,
            labels,
        )
    }
}

type FrameLabels = (String, i64, [f64; 4], Vec<AvaLabel>);

fn labels_from_rows(entity: &str, rows: &[&AnnotationRecord], num_frames: usize) -> Result<FrameLabels> {
    let first = rows
        .iter()
        .min_by(|a, b| a.frame_timestamp.total_cmp(&b.frame_timestamp))
        .ok_or_else(|| Error::Input(format!("no annotation rows for entity `{entity}`")))?;
    let start_ms = (first.frame_timestamp * 1000.0).round() as i64;
    let mut by_frame: BTreeMap<usize, AvaLabel> = BTreeMap::new();
    for r in rows {
        let offset = ((r.frame_timestamp * 1000.0).round() as i64 - start_ms) as f64 / 40.0;
        let index = offset.round() as usize;
        if index >= num_frames {
            return Err(Error::Input(format!(
                "entity `{entity}`: row at {} s is frame {index}, bundle has {num_frames}",
                r.frame_timestamp
            )));
        }
        if by_frame.insert(index, r.label).is_some() {
            return Err(Error::Input(format!(
                "entity `{entity}`: two rows map to frame {index}"
            )));
        }
    }
    let labels = (0..num_frames)
        .map(|i| {
            by_frame
                .get(&i)
                .copied()
                .ok_or_else(|| Error::Input(format!("entity `{entity}`: frame {i} has no annotation row")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((first.video_id.clone(), start_ms, first.bbox, labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entity_id: String,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub sample_rate: u32,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n as u64 + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Input(format!("manifest is missing `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Input(format!("manifest `{k}` is not a non-negative integer")))
        };
        let fps = num("fps")?;
        if fps != FPS as usize {
            return Err(Error::Input(format!("manifest fps={fps}, only {FPS} is supported")));
        }
        let sample_rate = num("sample_rate")? as u32;
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "manifest sample_rate={sample_rate}, only {SAMPLE_RATE} is supported"
            )));
        }
        Ok(Manifest {
            entity_id: get("entity_id")?.clone(),
            height: num("height")?,
            width: num("width")?,
            num_frames: num("num_frames")?,
            sample_rate,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Nearest 16-bit level for a sample in [-1, 1].
pub fn quantize_sample(x: f32) -> i16 {
    (x.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16
}

pub fn dequantize_sample(v: i16) -> f32 {
    v as f32 / i16::MAX as f32
}

pub fn encode_pcm(samples: &[f32]) -> Vec<u8> {
    samples.iter().flat_map(|&x| quantize_sample(x).to_le_bytes()).collect()
}

pub fn decode_pcm(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Input(format!("s16le audio has odd byte count {}", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| dequantize_sample(i16::from_le_bytes([b[0], b[1]])))
        .collect())
}

/// Builds a bundle from pre-cropped frames and PCM audio, as produced by an
/// external face-cropping step, labelled from that entity's annotation rows.
pub fn bundle_from_frame_dump(
    entity_id: &str,
    height: usize,
    width: usize,
    frames: Vec<u8>,
    pcm_s16le: &[u8],
    annotations: &[AnnotationRecord],
) -> Result<TrackBundle> {
    let frame_bytes = (height * width * 3).max(1);
    let rows: Vec<&AnnotationRecord> = annotations.iter().filter(|r| r.entity_id == entity_id).collect();
    let (video_id, start_ms, bbox, labels) = labels_from_rows(entity_id, &rows, frames.len() / frame_bytes)?;
    let waveform = Waveform::new(decode_pcm(pcm_s16le)?, SAMPLE_RATE);
    TrackBundle::new(entity_id, video_id, start_ms, bbox, height, width, frames, waveform, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(n: usize) -> TrackBundle {
        let frames = (0..n * 4 * 4 * 3).map(|i| (i % 251) as u8).collect();
        let samples = (0..n * 640).map(|i| dequantize_sample((i % 200) as i16 - 100)).collect();
        let labels = (0..n)
            .map(|i| if i % 3 == 0 { AvaLabel::SpeakingAudible } else { AvaLabel::NotSpeaking })
            .collect();
        TrackBundle::new(
            "v_e0",
            "v",
            1500,
            [0.1, 0.1, 0.9, 0.9],
            4,
            4,
            frames,
            Waveform::new(samples, SAMPLE_RATE),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn write_read_roundtrip() {
        let b = bundle(12);
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        let back = TrackBundle::read(dir.path(), &b.annotation_records()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn rows_may_arrive_in_any_order() {
        let b = bundle(8);
        let mut rows = b.annotation_records();
        rows.reverse();
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        assert_eq!(TrackBundle::read(dir.path(), &rows).unwrap().labels, b.labels);
        rows.pop();
        assert!(matches!(TrackBundle::read(dir.path(), &rows), Err(Error::Input(_))));
    }

    #[test]
    fn invariants() {
        let w = Waveform::new(vec![0.0; 16000], SAMPLE_RATE);
        let labels = vec![AvaLabel::NotSpeaking; 4];
        assert!(TrackBundle::new("e", "v", 0, [0.0, 0.0, 1.0, 1.0], 2, 2, vec![0; 48], w.clone(), labels).is_err());
        let short = Waveform::new(vec![0.0; 1000], SAMPLE_RATE);
        let labels = vec![AvaLabel::NotSpeaking; 5];
        assert!(TrackBundle::new("e", "v", 0, [0.0, 0.0, 1.0, 1.0], 2, 2, vec![0; 60], short, labels).is_err());
    }

    #[test]
    fn manifest_tolerates_unknown_keys() {
        let m = Manifest::parse("entity_id=a\nfps=25\nheight=2\nwidth=3\nnum_frames=7\nsample_rate=16000\ncodec=raw\n")
            .unwrap();
        assert_eq!((m.height, m.width, m.num_frames), (2, 3, 7));
        assert!(Manifest::parse("entity_id=a\nfps=30\nheight=2\nwidth=3\nnum_frames=7\nsample_rate=16000\n").is_err());
    }

    #[test]
    fn pcm_levels_roundtrip() {
        for v in [i16::MIN + 1, -1, 0, 1, 12345, i16::MAX] {
            assert_eq!(quantize_sample(dequantize_sample(v)), v);
        }
        assert!(decode_pcm(&[1, 2, 3]).is_err());
    }
}
