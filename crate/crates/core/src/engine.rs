//! In-process data-parallel training engine.
//!
//! Each step splits the batch across replica towers, runs forward/backward in
//! every tower concurrently, combines the tower gradients into a size-weighted
//! mean, applies exactly one optimizer step to the master parameters, and
//! copies the result back into every tower. Towers share nothing with each
//! other; the master is mutated only between the compute barriers, so a tower
//! always sees either the pre-step or the post-step parameters, never a mix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::brain::{Brain, TrainOutcome};
use crate::error::{Error, Result};
use crate::kongfu::KongFu;
use crate::scalar::Scalar;
use crate::tensor::{streams, Pcg32, Tensor};

/// Serde form: `{"name": "single"}` or
/// `{"name": "data_parallel", "num_towers": 2}` (`num_gpu` is accepted as an
/// alias for the tower count).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub name: String,
    #[serde(default, alias = "num_gpu")]
    pub num_towers: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            name: "single".into(),
            num_towers: None,
        }
    }
}

impl EngineConfig {
    /// Resolved tower count; `single` is data-parallel with one tower.
    pub fn towers(&self) -> Result<usize> {
        match self.name.as_str() {
            "single" => match self.num_towers {
                None | Some(1) => Ok(1),
                Some(k) => Err(Error::Config(format!(
                    "engine \"single\" runs one tower, not {k}"
                ))),
            },
            "data_parallel" => match self.num_towers.unwrap_or(1) {
                0 => Err(Error::Config("num_towers must be at least 1".into())),
                k => Ok(k),
            },
            other => Err(Error::Config(format!(
                "unknown engine {other:?} (single or data_parallel)"
            ))),
        }
    }
}

/// What one engine step reports. All values are size-weighted means over the
/// towers, so they equal what a single tower would have reported for the
/// whole batch.
#[derive(Clone, Debug)]
pub struct StepOutcome<S> {
    pub loss: S,
    pub total_loss: S,
    pub eval: Option<S>,
}

/// Splits a batch into `k` contiguous sub-batches whose sizes differ by at
/// most one; the first `B mod k` towers take the extra example. Labels split
/// identically, so alignment is preserved.
pub fn split_batch<S: Scalar>(
    data: &Tensor<S>,
    labels: &Tensor<S>,
    k: usize,
) -> Result<Vec<(Tensor<S>, Tensor<S>)>> {
    if data.rank() == 0 || labels.rank() != 1 {
        return Err(Error::shape(
            "engine.split_batch",
            format!(
                "expected batched data and rank-1 labels, got {:?} and {:?}",
                data.shape(),
                labels.shape()
            ),
        ));
    }
    let b = data.shape()[0];
    if labels.len() != b {
        return Err(Error::shape(
            "engine.split_batch",
            format!("{b} examples but {} labels", labels.len()),
        ));
    }
    if k == 0 {
        return Err(Error::Config("cannot split a batch across 0 towers".into()));
    }
    if b < k {
        return Err(Error::shape(
            "engine.split_batch",
            format!("batch of {b} cannot feed {k} towers without an empty tower"),
        ));
    }
    let base = b / k;
    let extra = b % k;
    let example = data.len() / b;
    let mut parts = Vec::with_capacity(k);
    let mut start = 0;
    for tower in 0..k {
        let size = base + usize::from(tower < extra);
        let mut shape = data.shape().to_vec();
        shape[0] = size;
        let part = Tensor::new(
            shape,
            data.data()[start * example..(start + size) * example].to_vec(),
        )?;
        let part_labels = Tensor::new(
            vec![size],
            labels.data()[start..start + size].to_vec(),
        )?;
        parts.push((part, part_labels));
        start += size;
    }
    Ok(parts)
}

/// Replica towers around a master brain.
pub struct Engine<S: Scalar> {
    towers: Vec<Brain<S>>,
    seed: u64,
}

impl<S: Scalar> Engine<S> {
    /// Builds `k` towers as deep replicas of the (already set up) master.
    pub fn new(config: &EngineConfig, master: &Brain<S>, seed: u64) -> Result<Self> {
        let k = config.towers()?;
        let towers = (0..k)
            .map(|_| master.clone_replica())
            .collect::<Result<Vec<_>>>()?;
        Ok(Engine { towers, seed })
    }

    pub fn num_towers(&self) -> usize {
        self.towers.len()
    }

    /// One data-parallel training step: tower gradients, size-weighted
    /// average, a single optimizer application on the master, then replica
    /// resynchronization.
    pub fn step(
        &mut self,
        master: &Brain<S>,
        kongfu: &mut KongFu<S>,
        data: &Tensor<S>,
        labels: &Tensor<S>,
        clock: u64,
    ) -> Result<StepOutcome<S>> {
        let k = self.towers.len();
        let b = data.shape().first().copied().unwrap_or(0);
        let parts = split_batch(data, labels, k)?;
        let sizes: Vec<usize> = parts.iter().map(|(d, _)| d.shape()[0]).collect();
        let seed = self.seed;

        // Barrier 1: all towers compute gradients concurrently. The master
        // is not touched until every tower has joined.
        let results: Vec<Result<TrainOutcome<S>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .towers
                .iter_mut()
                .zip(parts)
                .enumerate()
                .map(|(tower, (brain, (part, part_labels)))| {
                    scope.spawn(move || {
                        // One reserved sub-stream per (step, tower) keeps
                        // dropout draws reproducible for a fixed tower count.
                        let rng = Pcg32::for_stream(
                            seed,
                            streams::TRAIN,
                            clock * TOWER_STRIDE + tower as u64,
                        );
                        brain.forward_backward(&[part, part_labels], rng)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });

        // Combine in tower order so the floating-point sum is deterministic.
        let mut loss = S::zero();
        let mut total_loss = S::zero();
        let mut eval = None;
        let mut combined: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        let mut start = 0usize;
        for (tower, result) in results.into_iter().enumerate() {
            let outcome = result?;
            let size = sizes[tower];
            let weight = S::from_f64_lossy(size as f64 / b as f64);
            loss += weight * outcome.loss;
            total_loss += weight * outcome.total_loss;
            if let Some(e) = outcome.eval {
                *eval.get_or_insert(S::zero()) += weight * e;
            }
            for (name, grad) in outcome.grads {
                match combined.get_mut(&name) {
                    Some(acc) => {
                        for (a, &g) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += weight * g;
                        }
                    }
                    None => {
                        let mut scaled = grad;
                        for g in scaled.data_mut() {
                            *g *= weight;
                        }
                        combined.insert(name, scaled);
                    }
                }
            }
            start += size;
        }
        debug_assert_eq!(start, b);

        // Barrier 2: master mutation happens only here, in the coordinator.
        // Batch-norm running statistics come from tower 0 alone.
        let master_params = master.param_map();
        if k > 0 {
            for param in self.towers[0].params() {
                if !param.kind().trainable() {
                    let target = master_params.get(param.name()).ok_or_else(|| {
                        Error::UnknownName(format!("tower state {}", param.name()))
                    })?;
                    target.set_value(param.value())?;
                }
            }
        }
        kongfu.step(&master.trainable_params(), &combined, clock)?;
        self.sync_replicas(master)?;
        Ok(StepOutcome {
            loss,
            total_loss,
            eval,
        })
    }

    /// Copies every master parameter into every tower (k·p tensor copies).
    pub fn sync_replicas(&mut self, master: &Brain<S>) -> Result<()> {
        let master_params = master.params();
        for tower in &self.towers {
            let tower_params = tower.param_map();
            for param in &master_params {
                let target = tower_params.get(param.name()).ok_or_else(|| {
                    Error::UnknownName(format!("tower parameter {}", param.name()))
                })?;
                target.set_value(param.value())?;
            }
        }
        Ok(())
    }

    /// Direct access for equivalence tests.
    pub fn towers(&self) -> &[Brain<S>] {
        &self.towers
    }
}

/// Stream payloads are `clock · TOWER_STRIDE + tower`, so two steps never
/// share a tower stream as long as fewer towers than this exist.
const TOWER_STRIDE: u64 = 64;
