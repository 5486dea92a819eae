//! Adversarial training: PGD-based retraining, the ensemble variant with a
//! static pre-generated pool from source models, and the Sinkhorn variant
//! that pulls clean and adversarial feature clouds together.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sinkhorn::{sinkhorn_divergence_with_grads, PointCloud};
use super::{config_hash, EnsembleAdvTrainConfig, PgdAdvTrainConfig, SinkhornAdvTrainConfig, SinkhornReduction};
use crate::attack::{fgsm, pgd, per_sample_seed, PgdConfig};
use crate::error::{Error, Result};
use crate::model::train::{accumulate_grads, GradMap, SgdState};
use crate::model::{Dataset, DefenseProvenance, ModelGraph};
use crate::oracle::FloatOracle;
use crate::tensor::{backward, backward_vjp, OpKind, Tensor};

/// PGD adversarial training: every minibatch is replaced by adversarial
/// examples crafted against the current parameters.
pub fn pgd_adversarial_train(
    template: &ModelGraph,
    data: &Dataset,
    cfg: &PgdAdvTrainConfig,
) -> Result<(ModelGraph, Vec<f32>)> {
    cfg.validate()?;
    let (mut model, trace) = adv_train_impl(template, data, cfg, None)?;
    model.provenance = Some(DefenseProvenance {
        kind: "pgd-adv-train".into(),
        config_hash: config_hash(cfg),
    });
    Ok((model, trace))
}

/// Sinkhorn adversarial training: PGD retraining plus a divergence term
/// between clean and adversarial penultimate-layer feature clouds.
pub fn sinkhorn_adversarial_train(
    template: &ModelGraph,
    data: &Dataset,
    cfg: &SinkhornAdvTrainConfig,
) -> Result<(ModelGraph, Vec<f32>)> {
    cfg.pgd.validate()?;
    let (mut model, trace) = adv_train_impl(template, data, &cfg.pgd, Some(cfg))?;
    model.provenance = Some(DefenseProvenance {
        kind: "sinkhorn-adv-train".into(),
        config_hash: config_hash(cfg),
    });
    Ok((model, trace))
}

fn adv_train_impl(
    template: &ModelGraph,
    data: &Dataset,
    cfg: &PgdAdvTrainConfig,
    sink: Option<&SinkhornAdvTrainConfig>,
) -> Result<(ModelGraph, Vec<f32>)> {
    if data.is_empty() {
        return Err(Error::invalid_argument("training dataset is empty"));
    }
    let tc = &cfg.train;
    // Zero weight must reproduce plain PGD adversarial training bit for bit,
    // so the divergence term is skipped entirely in that case.
    let sink_active = sink.filter(|s| s.weight != 0.0);
    let penultimate = template
        .penultimate_node()
        .ok_or_else(|| Error::invalid_argument("model lacks a dense head for features"))?;

    let mut model = template.clone();
    let mut state = SgdState::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;

        for batch in order.chunks(tc.batch_size) {
            // Craft the adversarial batch against the current parameters.
            let adv_batch: Vec<Result<Tensor>> = crate::par::map_indexed(batch.len(), |bi| {
                let idx = batch[bi];
                let oracle = FloatOracle::new(&model);
                let attack_cfg = PgdConfig {
                    eps: cfg.eps,
                    step: cfg.step,
                    max_iter: cfg.iters,
                    restarts: 1,
                    seed: per_sample_seed(tc.seed ^ ((epoch as u64) << 32), idx),
                };
                Ok(pgd(&oracle, &data.images[idx], data.labels[idx], &attack_cfg)?.adversarial)
            });
            let adv_batch: Vec<Tensor> = adv_batch.into_iter().collect::<Result<_>>()?;

            let mut grads = GradMap::new();
            match sink_active {
                None => {
                    let results: Vec<Result<(f32, crate::tensor::Gradients)>> =
                        crate::par::map_indexed(batch.len(), |bi| {
                            model.loss_and_gradients(&adv_batch[bi], data.labels[batch[bi]])
                        });
                    for r in results {
                        let (loss, g) = r?;
                        epoch_loss += loss as f64;
                        accumulate_grads(&mut grads, &g);
                    }
                }
                Some(scfg) => {
                    // Recorded passes over both clean and adversarial inputs.
                    type Recorded = (crate::tensor::Tape, crate::tensor::ValueId, Vec<f32>, f32, crate::tensor::Gradients);
                    let passes: Vec<Result<(Recorded, Recorded)>> =
                        crate::par::map_indexed(batch.len(), |bi| {
                            let idx = batch[bi];
                            let record = |x: &Tensor, with_loss: bool| -> Result<Recorded> {
                                let (mut tape, node_ids, logits) = model.forward_recorded(x)?;
                                let feat_id = node_ids[penultimate];
                                let feat = tape.value(feat_id).data().to_vec();
                                let (loss, g) = if with_loss {
                                    let loss_id = tape.apply(
                                        OpKind::CrossEntropyLoss { target: data.labels[idx] },
                                        &[logits],
                                    )?;
                                    let loss = tape.value(loss_id).item();
                                    (loss, backward(&tape, loss_id)?)
                                } else {
                                    (0.0, crate::tensor::Gradients {
                                        input: None,
                                        params: Default::default(),
                                    })
                                };
                                Ok((tape, feat_id, feat, loss, g))
                            };
                            let clean = record(&data.images[idx], false)?;
                            let adv = record(&adv_batch[bi], true)?;
                            Ok((clean, adv))
                        });
                    let passes: Vec<(Recorded, Recorded)> =
                        passes.into_iter().collect::<Result<_>>()?;

                    let clean_cloud = PointCloud::uniform(
                        passes.iter().map(|(c, _)| c.2.clone()).collect(),
                    );
                    let adv_cloud = PointCloud::uniform(
                        passes.iter().map(|(_, a)| a.2.clone()).collect(),
                    );
                    let (divergence, grad_clean, grad_adv) = sinkhorn_divergence_with_grads(
                        &clean_cloud,
                        &adv_cloud,
                        scfg.sink_eps,
                        scfg.sink_iters,
                    )?;
                    let reduction_scale = match scfg.reduction {
                        SinkhornReduction::Sum => 1.0f32,
                        SinkhornReduction::Mean => 1.0 / batch.len() as f32,
                    };
                    let term_weight = scfg.weight * reduction_scale;
                    epoch_loss += (term_weight * divergence as f32) as f64 * batch.len() as f64;

                    let seeded: Vec<Result<(f32, Vec<crate::tensor::Gradients>)>> =
                        crate::par::map_indexed(passes.len(), |bi| {
                            let (clean, adv) = &passes[bi];
                            let mut all = vec![];
                            let seed_c = Tensor::new(
                                vec![grad_clean[bi].len()],
                                grad_clean[bi].iter().map(|&v| v * term_weight).collect(),
                            )?;
                            all.push(backward_vjp(&clean.0, clean.1, &seed_c)?);
                            let seed_a = Tensor::new(
                                vec![grad_adv[bi].len()],
                                grad_adv[bi].iter().map(|&v| v * term_weight).collect(),
                            )?;
                            all.push(backward_vjp(&adv.0, adv.1, &seed_a)?);
                            Ok((adv.3, all))
                        });
                    for (bi, r) in seeded.into_iter().enumerate() {
                        let (ce_loss, gs) = r?;
                        epoch_loss += ce_loss as f64;
                        accumulate_grads(&mut grads, &passes[bi].1 .4);
                        for g in &gs {
                            accumulate_grads(&mut grads, g);
                        }
                    }
                }
            }
            state.step(&mut model, &grads, batch.len(), tc.learning_rate, tc.optimizer);
        }

        let mean = (epoch_loss / data.len() as f64) as f32;
        if !mean.is_finite()
            || model.nodes().iter().any(|n| n.params.iter().any(|p| !p.is_finite()))
        {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.push(mean);
    }
    Ok((model, trace))
}

/// Pool bookkeeping for ensemble adversarial training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsemblePoolStats {
    pub clean: usize,
    /// Adversarial examples contributed per source model.
    pub per_source: Vec<usize>,
    pub total: usize,
}

/// Ensemble adversarial training: FGSM and PGD examples are pre-generated
/// once on the source models (generation is decoupled from training), pooled
/// with the clean data, and the target trains normally on the pool.
pub fn ensemble_adversarial_train(
    template: &ModelGraph,
    data: &Dataset,
    cfg: &EnsembleAdvTrainConfig,
    sources: &[ModelGraph],
) -> Result<(ModelGraph, EnsemblePoolStats)> {
    if sources.is_empty() {
        return Err(Error::invalid_argument(
            "ensemble adversarial training needs at least one source model",
        ));
    }
    cfg.pgd.validate()?;

    let mut images = data.images.clone();
    let mut labels = data.labels.clone();
    let mut per_source = Vec::with_capacity(sources.len());
    for (s_idx, source) in sources.iter().enumerate() {
        let adv: Vec<Result<(Tensor, Tensor)>> = crate::par::map_indexed(data.len(), |i| {
            let oracle = FloatOracle::new(source);
            let seed = per_sample_seed(cfg.train.seed ^ ((s_idx as u64) << 48), i);
            let f = fgsm(&oracle, &data.images[i], data.labels[i], cfg.fgsm_eps)?;
            let p = pgd(
                &oracle,
                &data.images[i],
                data.labels[i],
                &PgdConfig {
                    eps: cfg.pgd.eps,
                    step: cfg.pgd.step,
                    max_iter: cfg.pgd.iters,
                    restarts: 1,
                    seed,
                },
            )?;
            Ok((f.adversarial, p.adversarial))
        });
        let mut count = 0usize;
        for (i, r) in adv.into_iter().enumerate() {
            let (f, p) = r?;
            images.push(f);
            labels.push(data.labels[i]);
            images.push(p);
            labels.push(data.labels[i]);
            count += 2;
        }
        per_source.push(count);
    }
    let stats = EnsemblePoolStats {
        clean: data.len(),
        per_source: per_source.clone(),
        total: images.len(),
    };
    let pool = Dataset::new(images, labels, data.classes, data.split)?;
    let (mut model, _) = crate::model::train(template, &pool, &cfg.train)?;
    model.provenance = Some(DefenseProvenance {
        kind: "ensemble-adv-train".into(),
        config_hash: config_hash(cfg),
    });
    Ok((model, stats))
}
