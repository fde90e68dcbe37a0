//! Class-balanced minibatches and a bounded single-producer batch queue.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endless stream of index batches, half positive and half negative.
///
/// Each class is drawn from its own shuffled permutation; a class whose
/// permutation runs out is reshuffled, so the minority class repeats while
/// the majority class is still being covered.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    half: usize,
    classes: [ClassCursor; 2],
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct ClassCursor {
    order: Vec<usize>,
    next: usize,
}

impl ClassCursor {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// Sampler over `labels` (true = positive), yielding indices into `labels`.
pub fn balanced_batches(labels: &[bool], batch_size: usize, seed: u64) -> Result<BalancedSampler> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch size must be even and positive, got {batch_size}")));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config(format!(
            "balanced sampling needs both classes, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = [pos, neg].map(|order| ClassCursor { order, next: 0 });
    for c in &mut classes {
        c.order.shuffle(&mut rng);
    }
    Ok(BalancedSampler {
        half: batch_size / 2,
        classes,
        rng,
    })
}

impl BalancedSampler {
    /// Batches needed to show every example of the larger class once.
    pub fn epoch_len(&self) -> usize {
        let larger = self.classes.iter().map(|c| c.order.len()).max().unwrap_or(0);
        larger.div_ceil(self.half)
    }
}

impl Iterator for BalancedSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut batch = Vec::with_capacity(2 * self.half);
        for c in 0..2 {
            for _ in 0..self.half {
                batch.push(self.classes[c].draw(&mut self.rng));
            }
        }
        Some(batch)
    }
}

/// Receiving end of a bounded queue fed by one producer thread. Clones share
/// the queue, and every item is handed to exactly one receiver.
#[derive(Debug)]
pub struct BatchQueue<B> {
    rx: Arc<Mutex<Receiver<B>>>,
}

impl<B> Clone for BatchQueue<B> {
    fn clone(&self) -> Self {
        BatchQueue { rx: Arc::clone(&self.rx) }
    }
}

impl<B> BatchQueue<B> {
    /// Next item, or `None` once the producer has finished.
    pub fn recv(&self) -> Option<B> {
        self.rx.lock().ok()?.recv().ok()
    }
}

/// Runs `items` on a producer thread holding at most `capacity` unclaimed items.
pub fn spawn_producer<B, I>(items: I, capacity: usize) -> (BatchQueue<B>, JoinHandle<()>)
where
    B: Send + 'static,
    I: IntoIterator<Item = B> + Send + 'static,
{
    let (tx, rx) = sync_channel(capacity);
    let handle = std::thread::spawn(move || {
        for item in items {
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    (
        BatchQueue {
            rx: Arc::new(Mutex::new(rx)),
        },
        handle,
    )
}
