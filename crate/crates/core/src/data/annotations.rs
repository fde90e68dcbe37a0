//! AVA-ActiveSpeaker style CSV rows:
//! `video_id, frame_timestamp, x1, y1, x2, y2, label, entity_id[, score]`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AvaLabel {
    SpeakingAudible,
    SpeakingNotAudible,
    NotSpeaking,
}

impl AvaLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            AvaLabel::SpeakingAudible => "SPEAKING_AUDIBLE",
            AvaLabel::SpeakingNotAudible => "SPEAKING_NOT_AUDIBLE",
            AvaLabel::NotSpeaking => "NOT_SPEAKING",
        }
    }
}

impl std::str::FromStr for AvaLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "SPEAKING_AUDIBLE" => Ok(AvaLabel::SpeakingAudible),
            "SPEAKING_NOT_AUDIBLE" => Ok(AvaLabel::SpeakingNotAudible),
            "NOT_SPEAKING" => Ok(AvaLabel::NotSpeaking),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

/// Which AVA labels count as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelMapping {
    pub not_audible_is_positive: bool,
}

impl LabelMapping {
    pub fn is_positive(self, label: AvaLabel) -> bool {
        match label {
            AvaLabel::SpeakingAudible => true,
            AvaLabel::SpeakingNotAudible => self.not_audible_is_positive,
            AvaLabel::NotSpeaking => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub frame_timestamp: f64,
    /// Normalised `x1, y1, x2, y2`.
    pub bbox: [f64; 4],
    pub label: AvaLabel,
    pub entity_id: String,
}

impl AnnotationRecord {
    pub fn is_positive(&self) -> bool {
        LabelMapping::default().is_positive(self.label)
    }

    /// Join key: video, timestamp in milliseconds, entity.
    pub fn key(&self) -> (String, i64, String) {
        (
            self.video_id.clone(),
            (self.frame_timestamp * 1000.0).round() as i64,
            self.entity_id.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub record: AnnotationRecord,
    pub score: f64,
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<AnnotationRecord> {
    let err = |message: String| Error::Parse { line, message };
    if row.len() < 8 {
        return Err(err(format!("expected 8 columns, found {}", row.len())));
    }
    let num = |i: usize, what: &str| -> Result<f64> {
        row[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(format!("{what} `{}` is not a number", &row[i])))
    };
    let frame_timestamp = num(1, "timestamp")?;
    if frame_timestamp < 0.0 {
        return Err(err(format!("negative timestamp {frame_timestamp}")));
    }
    let bbox = [num(2, "x1")?, num(3, "y1")?, num(4, "x2")?, num(5, "y2")?];
    if bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(err(format!("box {bbox:?} is not normalised to [0, 1]")));
    }
    if bbox[0] >= bbox[2] || bbox[1] >= bbox[3] {
        return Err(err(format!("box {bbox:?} needs x1 < x2 and y1 < y2")));
    }
    let label = row[6].parse::<AvaLabel>().map_err(err)?;
    Ok(AnnotationRecord {
        video_id: row[0].to_string(),
        frame_timestamp,
        bbox,
        label,
        entity_id: row[7].to_string(),
    })
}

fn is_header(row: &csv::StringRecord) -> bool {
    row.get(1).is_some_and(|t| t.parse::<f64>().is_err())
}

fn rows(text: &str) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut out = Vec::new();
    for (i, rec) in reader(text).records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if i == 0 && is_header(&rec) {
            continue;
        }
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

/// Parses annotation rows in file order. Columns past the eighth are ignored.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>> {
    rows(text)?
        .iter()
        .map(|(line, rec)| parse_row(rec, *line))
        .collect()
}

/// Parses prediction rows: the annotation columns plus a ninth `score` in [0, 1].
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRow>> {
    rows(text)?
        .iter()
        .map(|(line, rec)| {
            let record = parse_row(rec, *line)?;
            let raw = rec.get(8).ok_or_else(|| Error::Parse {
                line: *line,
                message: "missing score column".into(),
            })?;
            let score = raw
                .parse::<f64>()
                .ok()
                .filter(|s| (0.0..=1.0).contains(s))
                .ok_or_else(|| Error::Parse {
                    line: *line,
                    message: format!("score `{raw}` is not a number in [0, 1]"),
                })?;
            Ok(PredictionRow { record, score })
        })
        .collect()
}

fn write_record(out: &mut String, r: &AnnotationRecord) {
    let [x1, y1, x2, y2] = r.bbox;
    write!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.video_id,
        r.frame_timestamp,
        x1,
        y1,
        x2,
        y2,
        r.label.as_str(),
        r.entity_id
    )
    .expect("writing to a String");
}

pub fn serialize_annotations(records: &[AnnotationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write_record(&mut out, r);
        out.push('\n');
    }
    out
}

pub fn serialize_predictions(rows: &[PredictionRow]) -> String {
    let mut out = String::new();
    for p in rows {
        write_record(&mut out, &p.record);
        writeln!(out, ",{}", p.score).expect("writing to a String");
    }
    out
}
