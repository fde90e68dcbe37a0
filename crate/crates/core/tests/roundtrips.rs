use asd_core::data::{
    balanced_batches, generate_synthetic, parse_annotations, serialize_annotations, spawn_producer, SyntheticConfig,
};
use asd_core::model::{Model, ModelConfig};
use asd_core::numcore::checkpoint;
use asd_core::Error;
use proptest::prelude::*;

#[test]
fn checkpoint_is_bit_identical() {
    let params = Model::new(ModelConfig::default()).unwrap().init(3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&params, &path).unwrap();
    let loaded = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(loaded.len(), params.len());
    for ((na, a), (nb, b)) in params.iter().zip(loaded.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(checkpoint::encode(&loaded).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn truncated_checkpoint_is_a_load_error() {
    let params = Model::new(ModelConfig::default()).unwrap().init(3).unwrap();
    let bytes = checkpoint::encode(&params).unwrap();
    assert!(matches!(checkpoint::decode::<f32>(&bytes[..bytes.len() / 2]), Err(Error::Load(_))));
}

#[test]
fn synthetic_annotations_roundtrip() {
    let cfg = SyntheticConfig {
        num_tracks: 3,
        frames_per_track: 40,
        size: 16,
        ..SyntheticConfig::default()
    };
    let records: Vec<_> = generate_synthetic(&cfg, 1)
        .unwrap()
        .iter()
        .flat_map(|b| b.annotation_records())
        .collect();
    let text = serialize_annotations(&records);
    assert_eq!(parse_annotations(&text).unwrap(), records);
    assert_eq!(serialize_annotations(&parse_annotations(&text).unwrap()), text);
}

#[test]
fn full_epoch_of_balanced_batches() {
    let labels: Vec<bool> = (0..997).map(|i| i % 7 < 2).collect();
    let sampler = balanced_batches(&labels, 64, 9).unwrap();
    let epoch = sampler.epoch_len();
    let mut seen = vec![0usize; labels.len()];
    for batch in sampler.take(epoch) {
        assert_eq!(batch.len(), 64);
        assert_eq!(batch.iter().filter(|&&i| labels[i]).count(), 32);
        batch.iter().for_each(|&i| seen[i] += 1);
    }
    assert!(seen.iter().all(|&n| n >= 1), "one epoch covers every example");
}

#[test]
fn producer_delivers_every_batch_once() {
    let labels: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
    let batches: Vec<Vec<usize>> = balanced_batches(&labels, 8, 2).unwrap().take(50).collect();
    let (queue, handle) = spawn_producer(batches.clone(), 4);
    let got: Vec<Vec<usize>> = std::iter::from_fn(|| queue.recv()).collect();
    handle.join().unwrap();
    assert_eq!(got, batches);
}

proptest! {
    #[test]
    fn every_batch_is_half_positive(
        labels in prop::collection::vec(any::<bool>(), 2..300),
        half in 1usize..40,
        seed in any::<u64>(),
    ) {
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let sampler = balanced_batches(&labels, 2 * half, seed).unwrap();
        for batch in sampler.take(20) {
            prop_assert_eq!(batch.iter().filter(|&&i| labels[i]).count(), half);
            prop_assert_eq!(batch.len(), 2 * half);
        }
    }
}
