//! Annotation CSVs, track bundles, training clips, balanced sampling and the
//! synthetic dataset.

mod annotations;
mod bundle;
mod examples;
mod sampler;
mod synth;

pub use annotations::{
    parse_annotations, parse_predictions, serialize_annotations, serialize_predictions, AnnotationRecord, AvaLabel,
    LabelMapping, PredictionRow,
};
pub use bundle::{
    bundle_from_frame_dump, decode_pcm, dequantize_sample, encode_pcm, quantize_sample, Manifest, TrackBundle,
    AUDIO_FILE, FPS, FRAMES_FILE, MANIFEST_FILE, MIN_FRAMES, SAMPLE_RATE,
};
pub use examples::{check_clip_len, clip_frame_indices, make_examples, make_examples_with, TrainingExample};
pub use sampler::{balanced_batches, spawn_producer, BalancedSampler, BatchQueue};
pub use synth::{generate_synthetic, split_validation, synthetic_entity_id, synthetic_video_id, SyntheticConfig};
