//! Defensive distillation: a teacher trained with temperature-T softmax
//! produces soft labels; the student trains on a blend of hard and soft
//! labels and serves at temperature 1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{config_hash, DistillationConfig};
use crate::error::{Error, Result};
use crate::model::train::{accumulate_grads, GradMap, SgdState};
use crate::model::{Dataset, DefenseProvenance, ModelGraph, TrainConfig};
use crate::tensor::{backward_vjp, Tensor};

/// Softmax of logits divided by a temperature, in f64 for the tail classes.
fn tempered_softmax(logits: &[f32], temperature: f32) -> Vec<f32> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z as f64 / temperature as f64).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

/// SGD over a custom per-sample loss given as (loss value, d loss / d logits).
fn train_with_logit_grad<F>(
    init: &ModelGraph,
    data: &Dataset,
    tc: &TrainConfig,
    per_sample: F,
) -> Result<(ModelGraph, Vec<f32>)>
where
    F: Fn(&[f32], usize) -> (f32, Vec<f32>) + Sync,
{
    let mut model = init.clone();
    let mut state = SgdState::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(tc.batch_size) {
            let results: Vec<Result<(f32, crate::tensor::Gradients)>> =
                crate::par::map_indexed(batch.len(), |bi| {
                    let idx = batch[bi];
                    let (tape, _, logits_id) = model.forward_recorded(&data.images[idx])?;
                    let logits = tape.value(logits_id);
                    let (loss, seed) = per_sample(logits.data(), idx);
                    let seed_t = Tensor::new(vec![seed.len()], seed)?;
                    let grads = backward_vjp(&tape, logits_id, &seed_t)?;
                    Ok((loss, grads))
                });
            let mut grads = GradMap::new();
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss as f64;
                accumulate_grads(&mut grads, &g);
            }
            state.step(&mut model, &grads, batch.len(), tc.learning_rate, tc.optimizer);
        }
        let mean = (epoch_loss / data.len() as f64) as f32;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.push(mean);
    }
    Ok((model, trace))
}

/// Train teacher and student; the returned student classifies at temperature
/// one. Teacher and student share the template architecture.
pub fn distill_train(
    template: &ModelGraph,
    data: &Dataset,
    cfg: &DistillationConfig,
) -> Result<ModelGraph> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid_argument("distillation dataset is empty"));
    }
    let temperature = cfg.temperature;
    let classes = template.num_classes();

    // Teacher: hard labels under the tempered softmax.
    let teacher_init = template.reinitialized(cfg.train.seed ^ 0x7EAC);
    let labels = data.labels.clone();
    let (teacher, _) = train_with_logit_grad(&teacher_init, data, &cfg.train, |logits, idx| {
        let p = tempered_softmax(logits, temperature);
        let y = labels[idx];
        let loss = -(p[y].max(1e-30)).ln();
        let seed: Vec<f32> = p
            .iter()
            .enumerate()
            .map(|(k, &pk)| (pk - if k == y { 1.0 } else { 0.0 }) / temperature)
            .collect();
        (loss, seed)
    })?;

    // Fixed soft labels from the trained teacher.
    let soft: Vec<Vec<f32>> = crate::par::map_indexed(data.len(), |i| {
        let logits = teacher.forward(&data.images[i]).expect("teacher forward");
        tempered_softmax(logits.data(), temperature)
    });

    // Student: alpha-blended hard and soft cross-entropy.
    let alpha = cfg.alpha;
    let student_init = template.reinitialized(cfg.train.seed ^ 0x51D);
    let (mut student, _) = train_with_logit_grad(&student_init, data, &cfg.train, |logits, idx| {
        let y = labels[idx];
        let p1 = tempered_softmax(logits, 1.0);
        let pt = tempered_softmax(logits, temperature);
        let q = &soft[idx];
        let hard_loss = -(p1[y].max(1e-30)).ln();
        let soft_loss: f32 = q
            .iter()
            .zip(&pt)
            .map(|(&qk, &pk)| -qk * pk.max(1e-30).ln())
            .sum();
        let loss = alpha * hard_loss + (1.0 - alpha) * soft_loss;
        let seed: Vec<f32> = (0..classes)
            .map(|k| {
                let hard = p1[k] - if k == y { 1.0 } else { 0.0 };
                let soft_term = (pt[k] - q[k]) / temperature;
                alpha * hard + (1.0 - alpha) * soft_term
            })
            .collect();
        (loss, seed)
    })?;

    student.provenance = Some(DefenseProvenance {
        kind: "defensive-distillation".into(),
        config_hash: config_hash(cfg),
    });
    Ok(student)
}
