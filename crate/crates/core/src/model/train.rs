//! Minibatch SGD training. Runs per-sample gradients in parallel, reduces
//! them in index order, so fixed seeds give bit-identical parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{Dataset, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamSlot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum { momentum: f32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.02,
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid_argument("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid_argument("learning rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_argument("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Accumulated minibatch gradients keyed by (node, slot).
pub(crate) type GradMap = BTreeMap<(usize, ParamSlot), Tensor>;

pub(crate) fn accumulate_grads(total: &mut GradMap, g: &Gradients) {
    for (key, tensor) in &g.params {
        match total.get_mut(key) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(*key, tensor.clone());
            }
        }
    }
}

/// One SGD step over already-summed batch gradients.
pub(crate) struct SgdState {
    velocity: GradMap,
}

impl SgdState {
    pub(crate) fn new() -> Self {
        SgdState { velocity: GradMap::new() }
    }

    pub(crate) fn step(
        &mut self,
        model: &mut ModelGraph,
        grads: &GradMap,
        batch_len: usize,
        lr: f32,
        optimizer: OptimizerKind,
    ) {
        let scale = 1.0 / batch_len as f32;
        for (&(node, slot), g) in grads {
            let slot_idx = match slot {
                ParamSlot::Weight => 0,
                ParamSlot::Bias => 1,
            };
            let update: Vec<f32> = match optimizer {
                OptimizerKind::Sgd => g.data().iter().map(|v| v * scale).collect(),
                OptimizerKind::SgdMomentum { momentum } => {
                    let v = self
                        .velocity
                        .entry((node, slot))
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = momentum * *vi + gi * scale;
                    }
                    v.data().to_vec()
                }
            };
            let param = &mut model.nodes_mut()[node].params[slot_idx];
            for (p, u) in param.data_mut().iter_mut().zip(&update) {
                *p -= lr * u;
            }
        }
    }
}

/// Train a copy of `model` on `data`. Returns the trained model and the
/// per-epoch mean loss trace.
pub fn train(model: &ModelGraph, data: &Dataset, cfg: &TrainConfig) -> Result<(ModelGraph, Vec<f32>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid_argument("training dataset is empty"));
    }
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut state = SgdState::new();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;

        for batch in order.chunks(cfg.batch_size) {
            let per_sample: Vec<Result<(f32, Gradients)>> =
                crate::par::map_indexed(batch.len(), |bi| {
                    let idx = batch[bi];
                    model.loss_and_gradients(&data.images[idx], data.labels[idx])
                });
            let mut grads = GradMap::new();
            for r in per_sample {
                let (loss, g) = r?;
                epoch_loss += loss as f64;
                accumulate_grads(&mut grads, &g);
            }
            state.step(&mut model, &grads, batch.len(), cfg.learning_rate, cfg.optimizer);
        }

        let mean = (epoch_loss / data.len() as f64) as f32;
        if !mean.is_finite()
            || model
                .nodes()
                .iter()
                .any(|n| n.params.iter().any(|p| !p.is_finite()))
        {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.push(mean);
    }
    Ok((model, trace))
}
