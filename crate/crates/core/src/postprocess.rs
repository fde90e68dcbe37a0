//! Temporal smoothing of per-entity speaking scores.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const FPS: f64 = 25.0;
pub const DEFAULT_WINDOW_SECONDS: f64 = 0.5;
const SPACING_TOL: f64 = 1e-6;

/// Speaking scores of one entity at consecutive 25 fps frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrack {
    pub entity_id: String,
    frame_timestamps: Vec<f64>,
    scores: Vec<f64>,
}

impl ScoreTrack {
    pub fn new(entity_id: impl Into<String>, frame_timestamps: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        let entity_id = entity_id.into();
        if frame_timestamps.len() != scores.len() {
            return Err(Error::Input(format!(
                "track `{entity_id}`: {} timestamps but {} scores",
                frame_timestamps.len(),
                scores.len()
            )));
        }
        for w in frame_timestamps.windows(2) {
            if ((w[1] - w[0]) - 1.0 / FPS).abs() > SPACING_TOL {
                return Err(Error::Input(format!(
                    "track `{entity_id}`: timestamps {} and {} are not one 25 fps frame apart",
                    w[0], w[1]
                )));
            }
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Input(format!("track `{entity_id}`: score {s} outside [0, 1]")));
        }
        Ok(ScoreTrack {
            entity_id,
            frame_timestamps,
            scores,
        })
    }

    /// Track starting at `start` seconds with one score per frame.
    pub fn from_scores(entity_id: impl Into<String>, start: f64, scores: Vec<f64>) -> Result<Self> {
        let ts = (0..scores.len()).map(|i| start + i as f64 / FPS).collect();
        Self::new(entity_id, ts, scores)
    }

    pub fn frame_timestamps(&self) -> &[f64] {
        &self.frame_timestamps
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn with_scores(&self, scores: Vec<f64>) -> Self {
        ScoreTrack {
            entity_id: self.entity_id.clone(),
            frame_timestamps: self.frame_timestamps.clone(),
            scores,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothMethod {
    #[default]
    None,
    Median,
    Wiener,
}

impl std::str::FromStr for SmoothMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SmoothMethod::None),
            "median" => Ok(SmoothMethod::Median),
            "wiener" => Ok(SmoothMethod::Wiener),
            other => Err(Error::Config(format!("unknown smoothing method `{other}`"))),
        }
    }
}

impl std::fmt::Display for SmoothMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SmoothMethod::None => "none",
            SmoothMethod::Median => "median",
            SmoothMethod::Wiener => "wiener",
        })
    }
}

/// Smallest odd frame count covering `window_seconds` at 25 fps (0.5 s → 13).
pub fn window_frames(window_seconds: f64) -> Result<usize> {
    if !(window_seconds > 0.0) || !window_seconds.is_finite() {
        return Err(Error::Config(format!("window must be positive, got {window_seconds}")));
    }
    let w = (window_seconds * FPS - 1e-9).ceil().max(1.0) as usize;
    Ok(if w % 2 == 0 { w + 1 } else { w })
}

/// Values of the `w`-window centred at `i` with edge replication.
fn window(x: &[f64], i: usize, w: usize) -> impl Iterator<Item = f64> + '_ {
    let half = (w / 2) as isize;
    let last = x.len() as isize - 1;
    (-half..=half).map(move |d| x[(i as isize + d).clamp(0, last) as usize])
}

pub fn median_filter(x: &[f64], w: usize) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Input("cannot smooth an empty track".into()));
    }
    if w % 2 == 0 {
        return Err(Error::Config(format!("median window must be odd, got {w}")));
    }
    let mut buf = Vec::with_capacity(w);
    Ok((0..x.len())
        .map(|i| {
            buf.clear();
            buf.extend(window(x, i, w));
            *buf.select_nth_unstable_by(w / 2, f64::total_cmp).1
        })
        .collect())
}

/// Local-statistics Wiener filter with the noise power taken as the mean local variance.
pub fn wiener_filter(x: &[f64], w: usize) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Input("cannot smooth an empty track".into()));
    }
    if w % 2 == 0 {
        return Err(Error::Config(format!("Wiener window must be odd, got {w}")));
    }
    let stats: Vec<(f64, f64)> = (0..x.len())
        .map(|i| {
            let (lo, hi) = window(x, i, w).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
            if lo == hi {
                return (lo, 0.0);
            }
            let mean = window(x, i, w).sum::<f64>() / w as f64;
            let var = window(x, i, w).map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            (mean, var)
        })
        .collect();
    let noise = stats.iter().map(|&(_, v)| v).sum::<f64>() / x.len() as f64;
    Ok(x
        .iter()
        .zip(&stats)
        .map(|(&xi, &(mean, var))| {
            let denom = var.max(noise);
            let gain = if denom > 0.0 {
                (var - noise).max(0.0) / denom
            } else {
                0.0
            };
            (mean + gain * (xi - mean)).clamp(0.0, 1.0)
        })
        .collect())
}

pub fn median_smooth(t: &ScoreTrack, window_seconds: f64) -> Result<ScoreTrack> {
    let w = window_frames(window_seconds)?;
    Ok(t.with_scores(median_filter(&t.scores, w)?))
}

pub fn wiener_smooth(t: &ScoreTrack, window_seconds: f64) -> Result<ScoreTrack> {
    let w = window_frames(window_seconds)?;
    Ok(t.with_scores(wiener_filter(&t.scores, w)?))
}

pub fn smooth_track(t: &ScoreTrack, method: SmoothMethod, window_seconds: f64) -> Result<ScoreTrack> {
    match method {
        SmoothMethod::None => Ok(t.clone()),
        SmoothMethod::Median => median_smooth(t, window_seconds),
        SmoothMethod::Wiener => wiener_smooth(t, window_seconds),
    }
}

/// Smooths rows that may interleave several entities. Rows are grouped by
/// entity, ordered by timestamp within each group, smoothed, and the
/// results returned in the original row order.
pub fn smooth_interleaved(
    entity_ids: &[&str],
    timestamps: &[f64],
    scores: &[f64],
    method: SmoothMethod,
    window_seconds: f64,
) -> Result<Vec<f64>> {
    if entity_ids.len() != scores.len() || timestamps.len() != scores.len() {
        return Err(Error::Input("entity, timestamp and score columns differ in length".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (row, &e) in entity_ids.iter().enumerate() {
        groups.entry(e).or_default().push(row);
    }
    let mut out = scores.to_vec();
    for (entity, mut rows) in groups {
        rows.sort_by(|&a, &b| timestamps[a].total_cmp(&timestamps[b]));
        let track = ScoreTrack::new(
            entity,
            rows.iter().map(|&r| timestamps[r]).collect(),
            rows.iter().map(|&r| scores[r]).collect(),
        )?;
        let smoothed = smooth_track(&track, method, window_seconds)?;
        for (&r, &s) in rows.iter().zip(smoothed.scores()) {
            out[r] = s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(scores: &[f64]) -> ScoreTrack {
        ScoreTrack::from_scores("e", 10.0, scores.to_vec()).unwrap()
    }

    #[test]
    fn half_second_is_thirteen_frames() {
        assert_eq!(window_frames(0.5).unwrap(), 13);
        assert_eq!(window_frames(0.12).unwrap(), 3);
        assert_eq!(window_frames(0.48).unwrap(), 13);
        assert!(window_frames(0.0).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_filter(&[0.0, 1.0, 0.0], 3).unwrap(), vec![0.0, 0.0, 0.0]);
        let mut spike = vec![0.0; 40];
        spike[20] = 1.0;
        assert_eq!(median_smooth(&track(&spike), 0.5).unwrap().scores(), &[0.0; 40][..]);
        let s = smooth_track(&track(&[0.0, 1.0, 0.0]), SmoothMethod::Median, 0.12).unwrap();
        assert_eq!(s.scores(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_are_fixed_points() {
        let c = track(&[0.37; 30]);
        assert_eq!(median_smooth(&c, 0.5).unwrap(), c);
        assert_eq!(wiener_smooth(&c, 0.5).unwrap(), c);
        assert_eq!(smooth_track(&c, SmoothMethod::None, 0.5).unwrap(), c);
    }

    #[test]
    fn timestamps_and_length_pass_through() {
        let t = track(&[0.1, 0.9, 0.3, 0.4, 0.8]);
        for m in [SmoothMethod::None, SmoothMethod::Median, SmoothMethod::Wiener] {
            let s = smooth_track(&t, m, 0.5).unwrap();
            assert_eq!(s.frame_timestamps(), t.frame_timestamps());
            assert_eq!(s.len(), t.len());
            assert!(s.scores().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn empty_and_invalid_tracks() {
        let empty = ScoreTrack::from_scores("e", 0.0, vec![]).unwrap();
        assert!(matches!(median_smooth(&empty, 0.5), Err(Error::Input(_))));
        assert!(matches!(wiener_smooth(&empty, 0.5), Err(Error::Input(_))));
        assert!(ScoreTrack::new("e", vec![0.0, 0.05], vec![0.1, 0.2]).is_err());
        assert!(ScoreTrack::from_scores("e", 0.0, vec![1.5]).is_err());
    }

    #[test]
    fn interleaved_entities_do_not_mix() {
        // entity a is all zeros, entity b all ones, rows alternate
        let ids: Vec<&str> = (0..20).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let ts: Vec<f64> = (0..20).map(|i| (i / 2) as f64 * 0.04).collect();
        let scores: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        for m in [SmoothMethod::Median, SmoothMethod::Wiener] {
            assert_eq!(smooth_interleaved(&ids, &ts, &scores, m, 0.5).unwrap(), scores);
        }
    }
}
