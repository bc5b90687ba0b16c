//! [`FeedSensor`]: turns a [`Source`] into a stream of batches.
//!
//! Training batches walk a fresh permutation of the training split every
//! epoch and run through the jokers; validation batches are sequential and
//! bypass the jokers entirely. The final partial batch of an epoch is kept,
//! so one epoch covers every training example exactly once.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sensor::joker::{apply_jokers, Joker};
use crate::sensor::Source;
use crate::tensor::{streams, Pcg32, Tensor};

/// Joker rng payload for the setup batch; far above any reachable batch
/// counter, so it never collides with a training batch's stream.
const SETUP_PAYLOAD: u64 = (1 << 48) - 1;

/// Batch producer over a ready [`Source`].
///
/// All randomness derives from `(seed, epoch)` for the shuffle and
/// `(seed, batches_drawn)` for augmentation, so a sensor can be re-wound to
/// any step with [`FeedSensor::seek`] and reproduce the original stream.
#[derive(Clone, Debug)]
pub struct FeedSensor<S: Scalar> {
    source: Source<S>,
    batch_size: usize,
    jokers: Vec<Joker>,
    seed: u64,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
    batches_drawn: u64,
}

impl<S: Scalar> FeedSensor<S> {
    pub fn new(
        source: Source<S>,
        batch_size: usize,
        jokers: Vec<Joker>,
        seed: u64,
    ) -> Result<Self> {
        if !source.is_ready() {
            return Err(Error::NotSetup(format!("source {}", source.name())));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(FeedSensor {
            source,
            batch_size,
            jokers,
            seed,
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
            batches_drawn: 0,
        })
    }

    pub fn source(&self) -> &Source<S> {
        &self.source
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Completed passes over the training split.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Total training batches handed out so far.
    pub fn batches_drawn(&self) -> u64 {
        self.batches_drawn
    }

    /// Batches per epoch; the last one may be partial.
    pub fn steps_per_epoch(&self) -> usize {
        self.source.num_train().div_ceil(self.batch_size)
    }

    pub fn val_batch_count(&self) -> usize {
        self.source.num_val().div_ceil(self.batch_size)
    }

    /// The next shuffled, augmented training batch.
    pub fn next_train_batch(&mut self) -> Result<(Tensor<S>, Tensor<S>)> {
        let n = self.source.num_train();
        if self.cursor == 0 {
            self.perm = (0..n).collect();
            let mut rng = Pcg32::for_stream(self.seed, streams::SHUFFLE, self.epoch);
            rng.shuffle(&mut self.perm);
        }
        let end = (self.cursor + self.batch_size).min(n);
        let indices = &self.perm[self.cursor..end];
        let (data, labels) = self.source.batch(indices)?;
        let mut rng = Pcg32::for_stream(self.seed, streams::AUGMENT, self.batches_drawn);
        let data = apply_jokers(&self.jokers, &data, &mut rng)?;
        self.cursor = end;
        if self.cursor >= n {
            self.cursor = 0;
            self.epoch += 1;
        }
        self.batches_drawn += 1;
        Ok((data, labels))
    }

    /// Validation batch `i`: sequential slice of the validation split, no
    /// shuffling, no jokers. Stateless, so it can be called from a
    /// validation pass without disturbing training.
    pub fn val_batch(&self, i: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        let num_val = self.source.num_val();
        let start = i * self.batch_size;
        if start >= num_val {
            return Err(Error::shape(
                "sensor.val_batch",
                format!(
                    "validation batch {i} out of range ({} batches)",
                    self.val_batch_count()
                ),
            ));
        }
        let end = (start + self.batch_size).min(num_val);
        let base = self.source.num_train();
        let indices: Vec<usize> = (base + start..base + end).collect();
        self.source.batch(&indices)
    }

    /// A deterministic setup batch: the first training examples in file
    /// order, jokered with a reserved stream so its shape matches real
    /// training batches. Does not advance the sensor.
    pub fn setup_batch(&self) -> Result<(Tensor<S>, Tensor<S>)> {
        let count = self.batch_size.min(self.source.num_train());
        let indices: Vec<usize> = (0..count).collect();
        let (data, labels) = self.source.batch(&indices)?;
        let mut rng = Pcg32::for_stream(self.seed, streams::AUGMENT, SETUP_PAYLOAD);
        let data = apply_jokers(&self.jokers, &data, &mut rng)?;
        Ok((data, labels))
    }

    /// Rewinds (or fast-forwards) to the state after `clock` training
    /// batches, reproducing exactly the stream an uninterrupted run would
    /// have produced. Used when resuming from a checkpoint.
    pub fn seek(&mut self, clock: u64) {
        let spe = self.steps_per_epoch() as u64;
        self.epoch = clock / spe;
        self.cursor = (clock % spe) as usize * self.batch_size;
        self.batches_drawn = clock;
        if self.cursor == 0 {
            self.perm.clear();
        } else {
            self.perm = (0..self.source.num_train()).collect();
            let mut rng = Pcg32::for_stream(self.seed, streams::SHUFFLE, self.epoch);
            rng.shuffle(&mut self.perm);
        }
    }
}
