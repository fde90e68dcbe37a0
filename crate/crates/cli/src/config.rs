//! Run configuration: a file of `key = value` lines, then `--set` overrides.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use asd_core::backends::BackendKind;
use asd_core::data::LabelMapping;
use asd_core::encoders::Preset;
use asd_core::postprocess::SmoothMethod;
use asd_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Frames per training clip; odd, 5..=25.
    pub clip_len: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub max_steps: usize,
    pub seed: u64,
    pub backend: BackendKind,
    pub smoothing: SmoothMethod,
    pub window_seconds: f64,
    pub preset: Preset,
    /// Side of the square face crops, for both synthesis and the video encoder.
    pub resolution: usize,
    pub freeze_frontend: bool,
    pub eval_every: usize,
    pub target_map: Option<f64>,
    pub not_audible_is_positive: bool,
    pub num_tracks: usize,
    pub frames_per_track: usize,
    pub val_fraction: f64,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            clip_len: 9,
            batch_size: 64,
            learning_rate: 1e-2,
            max_steps: 2000,
            seed: 0,
            backend: BackendKind::Lstm,
            smoothing: SmoothMethod::None,
            window_seconds: 0.5,
            preset: Preset::Tiny,
            resolution: 112,
            freeze_frontend: false,
            eval_every: 50,
            target_map: None,
            not_audible_is_positive: false,
            num_tracks: 20,
            frames_per_track: 200,
            val_fraction: 0.2,
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            output: PathBuf::from("predictions.csv"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "clip_len" | "T" => self.clip_len = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "backend" => self.backend = value.parse()?,
            "smoothing" => self.smoothing = value.parse()?,
            "window_seconds" => self.window_seconds = parse(key, value)?,
            "preset" => self.preset = value.parse()?,
            "resolution" => self.resolution = parse(key, value)?,
            "freeze_frontend" => self.freeze_frontend = parse_bool(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "target_map" => {
                self.target_map = match value {
                    "none" | "" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "not_audible_is_positive" => self.not_audible_is_positive = parse_bool(key, value)?,
            "num_tracks" => self.num_tracks = parse(key, value)?,
            "frames_per_track" => self.frames_per_track = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "output" => self.output = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(key.trim(), value.trim())
    }

    /// Blank lines and `#` comments are skipped.
    pub fn parse_file_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply(line).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse_file_text(&std::fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        for o in overrides {
            cfg.apply(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(5..=25).contains(&self.clip_len) || self.clip_len % 2 == 0 {
            return Err(Error::Config(format!("clip_len must be odd and in [5, 25], got {}", self.clip_len)));
        }
        if self.batch_size == 0 || self.batch_size % 2 == 1 {
            return Err(Error::Config(format!("batch_size must be even and positive, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.window_seconds > 0.0) {
            return Err(Error::Config(format!("window_seconds must be positive, got {}", self.window_seconds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    pub fn mapping(&self) -> LabelMapping {
        LabelMapping {
            not_audible_is_positive: self.not_audible_is_positive,
        }
    }

    pub fn bundles_dir(&self) -> PathBuf {
        self.data_dir.join("bundles")
    }

    pub fn train_annotations(&self) -> PathBuf {
        self.data_dir.join("annotations_train.csv")
    }

    pub fn val_annotations(&self) -> PathBuf {
        self.data_dir.join("annotations_val.csv")
    }
}
