//! Training: Adam with teacher forcing and early stopping, the masked
//! language-model pretraining pass for the encoder, and the gradual
//! unfreezing schedule.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::model::{DropoutCtx, Param, ParamGroup, ParserModel, PreparedExample};
use super::ParserError;
use crate::dataset::Corpus;

/// Which encoder parameter groups may ever train, and whether they thaw one
/// per epoch or all at once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnfreezeSchedule {
    /// Fraction of encoder parameter groups (top-down) eligible for
    /// updates. The embedding group counts as the bottom-most group.
    pub rate: f64,
    /// Thaw one eligible group per epoch, starting from the top and from a
    /// fully frozen encoder at epoch 0.
    pub gradual: bool,
}

impl Default for UnfreezeSchedule {
    fn default() -> Self {
        UnfreezeSchedule { rate: 1.0, gradual: false }
    }
}

/// Freeze mask for one epoch over the `enc_layers + 1` encoder groups.
/// Index 0 is the embedding group, index `i` is encoder layer `i − 1`;
/// `true` means trainable. Eligibility is `ceil(rate · (enc_layers + 1))`
/// groups counted from the top layer downward.
pub fn freeze_mask_for_epoch(
    enc_layers: usize,
    schedule: &UnfreezeSchedule,
    epoch: usize,
) -> Vec<bool> {
    let groups = enc_layers + 1;
    let eligible = ((schedule.rate * groups as f64).ceil() as usize).min(groups);
    let unfrozen = if schedule.gradual { epoch.min(eligible) } else { eligible };
    let mut mask = vec![false; groups];
    // Top-down: layer enc_layers−1 (mask index enc_layers) thaws first,
    // the embedding group (index 0) last.
    for k in 0..unfrozen {
        mask[groups - 1 - k] = true;
    }
    mask
}

fn trainable_params(params: &[Param], encoder_mask: &[bool], decoder_trainable: bool) -> Vec<bool> {
    params
        .iter()
        .map(|p| match p.group {
            ParamGroup::SrcEmbed => encoder_mask[0],
            ParamGroup::Encoder(layer) => encoder_mask[layer + 1],
            ParamGroup::Decoder => decoder_trainable,
        })
        .collect()
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    fn new(params: &[Param], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
        }
    }

    /// One update; frozen parameters are left bit-identical (their moments
    /// do not advance either).
    fn step(
        &mut self,
        params: &mut [Param],
        grads: &[Option<Array2<f64>>],
        trainable: &[bool],
    ) {
        self.t += 1;
        let (lr, beta1, beta2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (idx, param) in params.iter_mut().enumerate() {
            if !trainable[idx] {
                continue;
            }
            let Some(grad) = &grads[idx] else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for (((m, v), value), g) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(param.value.iter_mut())
                .zip(grad.iter())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *value -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub unfrozen_groups: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub skipped_train_examples: usize,
    pub skipped_dev_examples: usize,
    /// Exact match of the final (best) model on the dev corpus, decoded
    /// with the configured beam size.
    pub final_dev_exact_match: Option<f64>,
}

fn prepare_corpus(model: &ParserModel, corpus: &Corpus) -> (Vec<PreparedExample>, usize) {
    let mut prepared = Vec::with_capacity(corpus.len());
    let mut skipped = 0;
    for example in &corpus.examples {
        match model.prepare(example) {
            Ok(p) => prepared.push(p),
            Err(_) => skipped += 1,
        }
    }
    (prepared, skipped)
}

fn mean_loss(model: &ParserModel, prepared: &[PreparedExample], batch_size: usize) -> f64 {
    if prepared.is_empty() {
        return f64::NAN;
    }
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in prepared.chunks(batch_size) {
        let batch: Vec<&PreparedExample> = chunk.iter().collect();
        let mut g = Graph::new(model.params());
        let (loss, n) = model.batch_loss_node(&mut g, &batch, None);
        total += g.value(loss)[[0, 0]] * n as f64;
        rows += n;
    }
    total / rows.max(1) as f64
}

/// Trains with teacher forcing and Adam, early-stopping on dev loss and
/// restoring the best-dev weights. The freeze mask is re-derived from the
/// schedule at the start of every epoch.
pub fn train_parser(
    model: &mut ParserModel,
    train: &Corpus,
    dev: &Corpus,
    schedule: &UnfreezeSchedule,
) -> Result<TrainHistory, ParserError> {
    let config = model.config.clone();
    let (train_prepared, skipped_train) = prepare_corpus(model, train);
    let (dev_prepared, skipped_dev) = prepare_corpus(model, dev);
    if train_prepared.is_empty() {
        return Err(ParserError::AllExamplesSkipped);
    }
    model.train_langs = train.langs();

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut history = TrainHistory {
        skipped_train_examples: skipped_train,
        skipped_dev_examples: skipped_dev,
        ..Default::default()
    };

    let mut best_dev = f64::INFINITY;
    let mut best_params: Option<Vec<Array2<f64>>> = None;
    let mut since_best = 0usize;

    for epoch in 0..config.max_epochs {
        let encoder_mask = freeze_mask_for_epoch(config.enc_layers, schedule, epoch);
        let trainable = trainable_params(model.params(), &encoder_mask, true);

        let mut order: Vec<usize> = (0..train_prepared.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedExample> =
                chunk.iter().map(|&i| &train_prepared[i]).collect();
            let mut g = Graph::new(model.params());
            let dropout = (config.dropout > 0.0)
                .then(|| DropoutCtx { rng: &mut rng, p: config.dropout });
            let (loss_node, rows) = model.batch_loss_node(&mut g, &batch, dropout);
            let loss = g.value(loss_node)[[0, 0]];
            if !loss.is_finite() {
                return Err(ParserError::DivergedLoss { epoch });
            }
            epoch_loss += loss * rows as f64;
            epoch_rows += rows;
            let grads = g.backward(loss_node);
            drop(g);
            adam.step(&mut model.params, &grads, &trainable);
        }

        let train_loss = epoch_loss / epoch_rows.max(1) as f64;
        let dev_loss = mean_loss(model, &dev_prepared, config.batch_size);
        if !dev_loss.is_finite() && !dev_prepared.is_empty() {
            return Err(ParserError::DivergedLoss { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            unfrozen_groups: encoder_mask.iter().filter(|&&t| t).count(),
        });

        if dev_loss < best_dev - 1e-12 {
            best_dev = dev_loss;
            history.best_epoch = epoch;
            best_params = Some(model.params.iter().map(|p| p.value.clone()).collect());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for (param, value) in model.params.iter_mut().zip(best) {
            param.value = value;
        }
    }

    if !dev.is_empty() {
        let mut correct = 0usize;
        for example in &dev.examples {
            let decoded = model.decode_beam(
                &example.question_tokens,
                &super::model::DecodeOptions {
                    beam_size: config.beam_size,
                    max_len: None,
                },
            );
            if decoded.mrl.split_whitespace().eq(example.mrl_string().split_whitespace()) {
                correct += 1;
            }
        }
        history.final_dev_exact_match = Some(correct as f64 / dev.len() as f64);
    }

    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmEpochRecord {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmHistory {
    pub epochs: Vec<MlmEpochRecord>,
    pub masked_positions: usize,
}

const MASK_FRACTION: f64 = 0.15;

/// Masked-language-model pass over unlabeled sentences: 15% of subword
/// positions are selected per batch (80% replaced by the mask symbol, 10%
/// by a random symbol, 10% kept) and the encoder plus a temporary
/// projection head learn to recover the originals. Only encoder-side
/// parameters are updated; the head is dropped afterwards.
pub fn mlm_pretrain(
    model: &mut ParserModel,
    sentences: &[Vec<String>],
    epochs: usize,
) -> Result<MlmHistory, ParserError> {
    let config = model.config.clone();
    let encoded: Vec<Vec<usize>> = sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            model
                .bpe
                .encode(s)
                .iter()
                .map(|sym| model.vocab.id_or_unk(sym))
                .collect()
        })
        .collect();
    if encoded.is_empty() {
        return Err(ParserError::AllExamplesSkipped);
    }

    // Temporary head, removed before returning.
    let base_params = model.params.len();
    let dim = config.model_dim;
    let vlen = model.vocab.len();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed.wrapping_add(2));
    let limit = (6.0 / (dim + vlen) as f64).sqrt();
    model.params.push(Param {
        name: "mlm.head_w".into(),
        group: ParamGroup::Decoder,
        value: Array2::from_shape_fn((dim, vlen), |_| rng.gen_range(-limit..limit)),
    });
    model.params.push(Param {
        name: "mlm.head_b".into(),
        group: ParamGroup::Decoder,
        value: Array2::zeros((1, vlen)),
    });

    let mut adam = Adam::new(model.params(), config.learning_rate);
    // Encoder + embedding + head train; the decoder stack stays put.
    let mut trainable = trainable_params(
        model.params(),
        &vec![true; config.enc_layers + 1],
        false,
    );
    trainable[base_params] = true;
    trainable[base_params + 1] = true;

    let mask_id = model.vocab.mask_id();
    let mut history = MlmHistory::default();

    let result = (|| -> Result<(), ParserError> {
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..encoded.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut epoch_masked = 0usize;

            for chunk in order.chunks(config.batch_size) {
                let originals: Vec<&Vec<usize>> =
                    chunk.iter().map(|&i| &encoded[i]).collect();
                let total_rows: usize = originals.iter().map(|s| s.len()).sum();
                let n_masked = ((total_rows as f64 * MASK_FRACTION).round() as usize)
                    .clamp(1, total_rows);

                let mut positions: Vec<usize> = (0..total_rows).collect();
                positions.shuffle(&mut rng);
                positions.truncate(n_masked);
                positions.sort_unstable();

                let mut corrupted: Vec<Vec<usize>> =
                    originals.iter().map(|s| (*s).clone()).collect();
                let mut targets_at: Vec<(usize, usize)> = Vec::with_capacity(n_masked);
                {
                    let mut offsets = Vec::with_capacity(corrupted.len());
                    let mut at = 0;
                    for s in &corrupted {
                        offsets.push(at);
                        at += s.len();
                    }
                    for &pos in &positions {
                        let sent = match offsets.binary_search(&pos) {
                            Ok(i) => i,
                            Err(i) => i - 1,
                        };
                        let within = pos - offsets[sent];
                        let original = corrupted[sent][within];
                        let roll: f64 = rng.gen();
                        corrupted[sent][within] = if roll < 0.8 {
                            mask_id
                        } else if roll < 0.9 {
                            rng.gen_range(0..vlen)
                        } else {
                            original
                        };
                        targets_at.push((pos, original));
                    }
                }

                let mut g = Graph::new(model.params());
                let batch_refs: Vec<&[usize]> =
                    corrupted.iter().map(|s| s.as_slice()).collect();
                let dropout = (config.dropout > 0.0)
                    .then(|| DropoutCtx { rng: &mut rng, p: config.dropout });
                let mut dropout = dropout;
                let (enc_out, _) = model.encoder_nodes(&mut g, &batch_refs, &mut dropout);
                let masked_rows = g.gather_rows(enc_out, targets_at.iter().map(|&(p, _)| p).collect());
                let head_w = g.param(base_params);
                let head_b = g.param(base_params + 1);
                let logits = g.matmul(masked_rows, head_w);
                let logits = g.add_row(logits, head_b);
                let nll = g.marginal_nll(
                    logits,
                    targets_at.iter().map(|&(_, t)| vec![t]).collect(),
                );
                let loss_node = g.scale(nll, 1.0 / n_masked as f64);
                let loss = g.value(loss_node)[[0, 0]];
                if !loss.is_finite() {
                    return Err(ParserError::DivergedLoss { epoch });
                }
                epoch_loss += loss * n_masked as f64;
                epoch_masked += n_masked;
                let grads = g.backward(loss_node);
                drop(g);
                adam.step(&mut model.params, &grads, &trainable);
            }

            history.epochs.push(MlmEpochRecord {
                epoch,
                loss: epoch_loss / epoch_masked.max(1) as f64,
            });
            history.masked_positions += epoch_masked;
        }
        Ok(())
    })();

    model.params.truncate(base_params);
    result.map(|()| history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_zero_freezes_everything() {
        for epoch in 0..10 {
            let mask =
                freeze_mask_for_epoch(2, &UnfreezeSchedule { rate: 0.0, gradual: false }, epoch);
            assert_eq!(mask, vec![false, false, false]);
            let mask =
                freeze_mask_for_epoch(2, &UnfreezeSchedule { rate: 0.0, gradual: true }, epoch);
            assert_eq!(mask, vec![false, false, false]);
        }
    }

    #[test]
    fn gradual_full_rate_unfreezes_one_group_per_epoch_top_down() {
        let schedule = UnfreezeSchedule { rate: 1.0, gradual: true };
        // 2 encoder layers + embedding = 3 groups; mask is
        // [embedding, layer0, layer1].
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 0), vec![false, false, false]);
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 1), vec![false, false, true]);
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 2), vec![false, true, true]);
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 3), vec![true, true, true]);
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 9), vec![true, true, true]);
    }

    #[test]
    fn ceiling_rule_on_small_rates() {
        // rate 0.1 with 2 encoder layers: ceil(0.1 * 3) = 1 group, the
        // topmost layer.
        let schedule = UnfreezeSchedule { rate: 0.1, gradual: false };
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 0), vec![false, false, true]);
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 7), vec![false, false, true]);
    }

    #[test]
    fn non_gradual_uses_full_eligibility_immediately() {
        let schedule = UnfreezeSchedule { rate: 1.0, gradual: false };
        assert_eq!(freeze_mask_for_epoch(2, &schedule, 0), vec![true, true, true]);
    }
}
