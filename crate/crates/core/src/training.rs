//! Bi-encoder training.
//!
//! Each instance pairs a query with one positive and hard-negative passages.
//! A batch embeds every query and every batch passage once; each query is
//! scored against all batch passages, so every other instance's passages act
//! as extra negatives. The loss is the mean negative log-likelihood of the
//! positive passage. Adam updates the encoder (unless the base is frozen)
//! and the attention-layer parameters; the entity embedding table is never
//! part of the parameter set, which enforces freezing structurally.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entity::EntityEmbeddingTable;
use crate::error::{KprError, Result};
use crate::linker::{AnchorDictionary, HyperlinkCorpus};
use crate::model::{
    embed_text_backward, embed_text_with_cache, score, score_backward, KprModel, ModelParams,
    Role, TextCache,
};
use crate::rng::Rng;
use crate::tensor::{Matrix, Mode};
use crate::tokenizer::format_passage;

/// One training instance: a query, one positive passage, hard negatives.
#[derive(Clone, Debug)]
pub struct TrainingInstance {
    pub query: String,
    pub positive: String,
    pub hard_negatives: Vec<String>,
}

impl TrainingInstance {
    pub fn new(
        query: String,
        positive: String,
        hard_negatives: Vec<String>,
    ) -> Result<TrainingInstance> {
        if hard_negatives.contains(&positive) {
            return Err(KprError::Batch(format!(
                "instance {query:?}: positive passage {positive} also listed as hard negative"
            )));
        }
        Ok(TrainingInstance {
            query,
            positive,
            hard_negatives,
        })
    }
}

/// JSON-lines row for training sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainRow {
    pub question: String,
    pub positive_ids: Vec<String>,
    pub hard_negative_ids: Vec<String>,
}

/// Loads a training set; the first positive id of each row is used.
pub fn load_train_jsonl(path: &Path) -> Result<Vec<TrainingInstance>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TrainRow = serde_json::from_str(&line)
            .map_err(|e| KprError::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let positive = row.positive_ids.first().cloned().ok_or_else(|| {
            KprError::Format(format!(
                "{}:{}: empty positive_ids",
                path.display(),
                lineno + 1
            ))
        })?;
        out.push(TrainingInstance::new(
            row.question,
            positive,
            row.hard_negative_ids,
        )?);
    }
    Ok(out)
}

/// Optimization settings. Scoring and architecture live in the model config.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub freeze_base: bool,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    /// Stop after this many epochs without loss improvement.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 2e-5,
            epochs: 40,
            freeze_base: false,
            seed: 0,
            clip_norm: 2.0,
            patience: 5,
            min_delta: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(KprError::Parameter(
                "train config: batch_size and epochs must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 || self.clip_norm <= 0.0 {
            return Err(KprError::Parameter(
                "train config: learning_rate and clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the positive passage per query row,
/// with the gradient w.r.t. the score matrix.
///
/// `scores` is B x C (queries by candidate passages); `positives[i]` is the
/// column of query i's positive.
pub fn nll_from_scores(scores: &Matrix, positives: &[usize]) -> Result<(f64, Matrix)> {
    let b = scores.rows();
    if b == 0 || positives.len() != b {
        return Err(KprError::Batch(format!(
            "nll: {b} score rows, {} positives",
            positives.len()
        )));
    }
    let c = scores.cols();
    let mut loss = 0.0;
    let mut d_scores = Matrix::zeros(b, c);
    for i in 0..b {
        let pos = positives[i];
        if pos >= c {
            return Err(KprError::Batch(format!(
                "nll: positive column {pos} outside {c} candidates"
            )));
        }
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[pos];
        for j in 0..c {
            let softmax = (row[j] - max).exp() / sum_exp;
            let indicator = if j == pos { 1.0 } else { 0.0 };
            d_scores.set(i, j, (softmax - indicator) / b as f64);
        }
    }
    Ok((loss / b as f64, d_scores))
}

fn passage_text(corpus: &HyperlinkCorpus, id: &str) -> Result<String> {
    let doc = corpus
        .get(id)
        .ok_or_else(|| KprError::Batch(format!("unknown passage id {id}")))?;
    Ok(format_passage(&doc.title, &doc.text))
}

/// Embeds a batch and returns (loss, gradients).
///
/// The candidate set of every query is all batch passages: each instance's
/// positive plus hard negatives, deduplicated ids rejected.
pub fn batch_loss(
    model: &KprModel,
    dict: &AnchorDictionary,
    table: &EntityEmbeddingTable,
    corpus: &HyperlinkCorpus,
    batch: &[TrainingInstance],
    mode: Mode,
    rng: &mut Rng,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(KprError::Batch("empty batch".into()));
    }
    let mut passage_ids: Vec<&str> = Vec::new();
    let mut positives = Vec::with_capacity(batch.len());
    for instance in batch {
        if instance.hard_negatives.contains(&instance.positive) {
            return Err(KprError::Batch(format!(
                "instance {:?}: positive also a hard negative",
                instance.query
            )));
        }
        positives.push(passage_ids.len());
        passage_ids.push(&instance.positive);
        for n in &instance.hard_negatives {
            passage_ids.push(n);
        }
    }
    {
        let mut seen = std::collections::HashSet::new();
        for id in &passage_ids {
            if !seen.insert(*id) {
                return Err(KprError::Batch(format!(
                    "duplicate passage id {id} in batch"
                )));
            }
        }
    }

    let mut query_embeddings: Vec<Matrix> = Vec::with_capacity(batch.len());
    let mut query_caches: Vec<TextCache> = Vec::with_capacity(batch.len());
    for instance in batch {
        let (e, cache) = embed_text_with_cache(
            model,
            dict,
            table,
            &instance.query,
            Role::Query,
            mode,
            rng,
        )?;
        query_embeddings.push(e);
        query_caches.push(cache);
    }
    let mut passage_embeddings: Vec<Matrix> = Vec::with_capacity(passage_ids.len());
    let mut passage_caches: Vec<TextCache> = Vec::with_capacity(passage_ids.len());
    for id in &passage_ids {
        let text = passage_text(corpus, id)?;
        let (e, cache) =
            embed_text_with_cache(model, dict, table, &text, Role::Passage, mode, rng)?;
        passage_embeddings.push(e);
        passage_caches.push(cache);
    }

    let b = batch.len();
    let c = passage_ids.len();
    let mut scores = Matrix::zeros(b, c);
    for i in 0..b {
        for j in 0..c {
            scores.set(
                i,
                j,
                score(
                    &query_embeddings[i],
                    &passage_embeddings[j],
                    model.config.similarity,
                    model.config.temperature,
                )?,
            );
        }
    }
    let (loss, d_scores) = nll_from_scores(&scores, &positives)?;
    if !loss.is_finite() {
        return Err(KprError::Numeric(format!("non-finite batch loss {loss}")));
    }

    let dim = model.config.encoder.hidden;
    let mut d_queries = vec![Matrix::zeros(1, dim); b];
    let mut d_passages = vec![Matrix::zeros(1, dim); c];
    for i in 0..b {
        for j in 0..c {
            let ds = d_scores.get(i, j);
            if ds == 0.0 {
                continue;
            }
            let (dq, dp) = score_backward(
                &query_embeddings[i],
                &passage_embeddings[j],
                model.config.similarity,
                model.config.temperature,
                ds,
            )?;
            d_queries[i].add_assign(&dq)?;
            d_passages[j].add_assign(&dp)?;
        }
    }

    let mut grads = model.params.zeros_like();
    for (cache, d) in query_caches.iter().zip(d_queries.iter()) {
        embed_text_backward(model, cache, d, &mut grads)?;
    }
    for (cache, d) in passage_caches.iter().zip(d_passages.iter()) {
        embed_text_backward(model, cache, d, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Adam with bias correction; state per tensor in canonical order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Adam {
        let m = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m,
            v,
        }
    }

    /// Applies one update. `trainable[i]` gates tensor i; frozen tensors keep
    /// their values and their moments stay zero.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &ModelParams,
        trainable: &[bool],
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let grad_tensors = grads.tensors();
        let mut target = params.tensors_mut();
        if trainable.len() != target.len() || grad_tensors.len() != target.len() {
            return Err(KprError::Usage(format!(
                "adam: {} tensors, {} grads, {} trainable flags",
                target.len(),
                grad_tensors.len(),
                trainable.len()
            )));
        }
        for (idx, tensor) in target.iter_mut().enumerate() {
            if !trainable[idx] {
                continue;
            }
            let g = grad_tensors[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..g.data().len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data()[i] / bc1;
                let v_hat = v.data()[i] / bc2;
                tensor.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales all trainable gradients so their global norm is at most `max_norm`.
fn clip_gradients(grads: &mut ModelParams, trainable: &[bool], max_norm: f64) {
    let mut squared = 0.0;
    for (idx, g) in grads.tensors().iter().enumerate() {
        if trainable[idx] {
            squared += g.squared_sum();
        }
    }
    let norm = squared.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (idx, g) in grads.tensors_mut().into_iter().enumerate() {
            if trainable[idx] {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

/// Packs shuffled instances into batches of at most `batch_size`, keeping
/// every passage id unique within a batch (batch_loss rejects duplicates).
/// Each instance goes into the first batch with room and no collision.
fn pack_batches(
    dataset: &[TrainingInstance],
    order: &[usize],
    batch_size: usize,
) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut batch_ids: Vec<std::collections::HashSet<&str>> = Vec::new();
    for &idx in order {
        let instance = &dataset[idx];
        let mut ids: Vec<&str> = vec![&instance.positive];
        ids.extend(instance.hard_negatives.iter().map(String::as_str));
        let slot = batches.iter().enumerate().position(|(b, members)| {
            members.len() < batch_size && ids.iter().all(|id| !batch_ids[b].contains(id))
        });
        match slot {
            Some(b) => {
                batches[b].push(idx);
                batch_ids[b].extend(ids);
            }
            None => {
                batches.push(vec![idx]);
                batch_ids.push(ids.into_iter().collect());
            }
        }
    }
    batches
}

/// Trains in place; returns mean loss per completed epoch.
///
/// Deterministic under the config seed: one generator drives shuffling and
/// dropout. Entity embeddings are structurally excluded from updates; with
/// `freeze_base` the encoder is gated out as well and only the attention
/// layer parameters move.
pub fn train(
    model: &mut KprModel,
    dict: &AnchorDictionary,
    table: &EntityEmbeddingTable,
    corpus: &HyperlinkCorpus,
    dataset: &[TrainingInstance],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(KprError::Input("train: empty dataset".into()));
    }
    let encoder_tensors = model.params.encoder_tensor_count();
    let total_tensors = model.params.tensors().len();
    let trainable: Vec<bool> = (0..total_tensors)
        .map(|i| i >= encoder_tensors || !config.freeze_base)
        .collect();
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut rng = Rng::new(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        for members in pack_batches(dataset, &order, config.batch_size) {
            let batch: Vec<TrainingInstance> =
                members.iter().map(|&i| dataset[i].clone()).collect();
            let (loss, mut grads) =
                batch_loss(model, dict, table, corpus, &batch, Mode::Train, &mut rng)?;
            if !loss.is_finite() {
                return Err(KprError::Numeric(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            clip_gradients(&mut grads, &trainable, config.clip_norm);
            adam.step(&mut model.params, &grads, &trainable)?;
            epoch_loss += loss;
            batches += 1.0;
        }
        let mean = epoch_loss / batches;
        epoch_losses.push(mean);
        if mean + config.min_delta < best {
            best = mean;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(epoch_losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_uniform_scores_is_log_candidate_count() {
        // B = 4, one hard negative each -> 8 candidates, all scores equal
        let scores = Matrix::zeros(4, 8);
        let (loss, _) = nll_from_scores(&scores, &[0, 2, 4, 6]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_closed_form_single_instance() {
        let scores = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let (loss, _) = nll_from_scores(&scores, &[0]).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn nll_saturates_to_zero() {
        let scores = Matrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let (loss, _) = nll_from_scores(&scores, &[0]).unwrap();
        assert!(loss >= 0.0 && loss < 1e-300);
    }

    #[test]
    fn nll_gradient_rows_sum_to_zero() {
        let mut rng = Rng::new(60);
        let scores = Matrix::uniform(3, 6, -2.0, 2.0, &mut rng);
        let (_, d) = nll_from_scores(&scores, &[0, 3, 5]).unwrap();
        for r in 0..3 {
            let s: f64 = d.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        use crate::tensor::grad_check;
        let mut rng = Rng::new(61);
        let scores = Matrix::uniform(2, 4, -1.0, 1.0, &mut rng);
        let positives = [1usize, 2];
        let (_, d) = nll_from_scores(&scores, &positives).unwrap();
        let err = grad_check(
            |s| nll_from_scores(s, &positives).map(|(l, _)| l),
            &scores,
            &d,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-8, "error {err}");
    }

    #[test]
    fn instance_rejects_positive_among_negatives() {
        assert!(TrainingInstance::new(
            "q".into(),
            "p1".into(),
            vec!["p2".into(), "p1".into()]
        )
        .is_err());
    }
}
