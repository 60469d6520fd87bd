//! Context-entity attention layer.
//!
//! The entity input matrix U holds one row per (mention, candidate) pair:
//! the candidate's frozen embedding plus the mean of the learned position
//! embeddings over the mention's token span. A learned no-op row is always
//! appended so attention stays defined with no detected entities. A
//! single-head key-query-value attention then mixes entity values into the
//! [CLS] context embedding:
//!
//!   Q = h X_q, K = U X_k, V = U X_v,
//!   Y = act(Q K^T / sqrt(D)) V,
//!   Z = LayerNorm(Dropout(Y) + h).
//!
//! The default activation is an elementwise sigmoid with a length bias so
//! each row's relevance is judged independently; row-wise softmax is kept as
//! an alternative. All gradients are hand-derived; gradients to the frozen
//! entity rows are computed and returned but never applied by the trainer.

use crate::error::{KprError, Result};
use crate::linker::Mention;
use crate::rng::Rng;
use crate::tensor::{
    dropout_mask, layer_norm_backward, layer_norm_with_cache, sigmoid_length_bias, softmax_row,
    softmax_rows_backward, LayerNormCache, Matrix, Mode,
};

/// How the sigmoid length bias counts the attended sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthMode {
    /// All rows of U including the no-op row (N+1); defined for N = 0.
    Rows,
    /// Entity rows only, clamped to at least 1.
    Entities,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    SigmoidLengthBias(LengthMode),
    Softmax,
}

impl Activation {
    pub fn default_sigmoid() -> Activation {
        Activation::SigmoidLengthBias(LengthMode::Rows)
    }
}

/// Trainable parameters of the attention layer.
#[derive(Clone, Debug)]
pub struct KprParams {
    pub x_q: Matrix,
    pub x_k: Matrix,
    pub x_v: Matrix,
    /// Entity position embeddings, one row per token position.
    pub position_table: Matrix,
    pub noop: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
    pub dropout_p: f64,
}

impl KprParams {
    /// Projections uniform in +-1/sqrt(D); position table and no-op row
    /// uniform in +-0.02; layer norm at identity.
    pub fn init(dim: usize, max_tokens: usize, dropout_p: f64, rng: &mut Rng) -> Result<KprParams> {
        if dim == 0 || max_tokens == 0 {
            return Err(KprError::Parameter(
                "kpr params: dim and max_tokens must be positive".into(),
            ));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(KprParams {
            x_q: Matrix::uniform(dim, dim, -bound, bound, rng),
            x_k: Matrix::uniform(dim, dim, -bound, bound, rng),
            x_v: Matrix::uniform(dim, dim, -bound, bound, rng),
            position_table: Matrix::uniform(max_tokens, dim, -0.02, 0.02, rng),
            noop: Matrix::uniform(1, dim, -0.02, 0.02, rng),
            ln_gain: Matrix::from_vec(1, dim, vec![1.0; dim])?,
            ln_bias: Matrix::zeros(1, dim),
            dropout_p,
        })
    }

    pub fn dim(&self) -> usize {
        self.x_q.rows()
    }

    pub fn zeros_like(&self) -> KprParams {
        KprParams {
            x_q: Matrix::zeros(self.x_q.rows(), self.x_q.cols()),
            x_k: Matrix::zeros(self.x_k.rows(), self.x_k.cols()),
            x_v: Matrix::zeros(self.x_v.rows(), self.x_v.cols()),
            position_table: Matrix::zeros(self.position_table.rows(), self.position_table.cols()),
            noop: Matrix::zeros(1, self.noop.cols()),
            ln_gain: Matrix::zeros(1, self.ln_gain.cols()),
            ln_bias: Matrix::zeros(1, self.ln_bias.cols()),
            dropout_p: self.dropout_p,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("x_q".into(), &self.x_q),
            ("x_k".into(), &self.x_k),
            ("x_v".into(), &self.x_v),
            ("position_table".into(), &self.position_table),
            ("noop".into(), &self.noop),
            ("ln_gain".into(), &self.ln_gain),
            ("ln_bias".into(), &self.ln_bias),
        ]
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.x_q,
            &mut self.x_k,
            &mut self.x_v,
            &mut self.position_table,
            &mut self.noop,
            &mut self.ln_gain,
            &mut self.ln_bias,
        ]
    }

    pub fn add_assign(&mut self, other: &KprParams) -> Result<()> {
        let theirs = other.tensors();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        crate::tensor::checksum_matrices(self.tensors())
    }
}

/// Provenance of one entity row of U.
#[derive(Clone, Debug)]
pub struct EntityRowInfo {
    pub mention: usize,
    pub entity: usize,
    /// Token span of the mention, end-exclusive.
    pub token_span: (usize, usize),
    pub surface: String,
}

/// The entity input matrix U plus per-row provenance. The last row is always
/// the no-op parameter vector; `rows` covers only the N entity rows.
#[derive(Clone, Debug)]
pub struct EntityInputs {
    pub u: Matrix,
    pub rows: Vec<EntityRowInfo>,
    /// (mention, candidate) pairs skipped because the table had no embedding.
    pub skipped: usize,
}

impl EntityInputs {
    /// Number of entity rows (the no-op row excluded).
    pub fn entity_rows(&self) -> usize {
        self.rows.len()
    }
}

/// Builds U from linked mentions: one row per (mention, candidate) with an
/// available embedding, ordered by (mention start, candidate order), no-op
/// appended last. Candidates without embeddings are skipped and counted.
pub fn build_entity_inputs(
    mentions: &[Mention],
    table: &crate::entity::EntityEmbeddingTable,
    params: &KprParams,
) -> Result<EntityInputs> {
    let d = params.dim();
    if table.dim() != d {
        return Err(KprError::Shape(format!(
            "entity table dim {} != attention dim {d}",
            table.dim()
        )));
    }
    let max_pos = params.position_table.rows();
    let mut rows: Vec<(EntityRowInfo, Vec<f64>)> = Vec::new();
    let mut skipped = 0usize;
    for (mi, mention) in mentions.iter().enumerate() {
        let (start, end) = mention.token_span;
        if end <= start || end > max_pos {
            return Err(KprError::Shape(format!(
                "mention token span ({start}, {end}) outside position table of {max_pos}"
            )));
        }
        let span_len = (end - start) as f64;
        let mut pos_mean = vec![0.0; d];
        for p in start..end {
            for c in 0..d {
                pos_mean[c] += params.position_table.get(p, c) / span_len;
            }
        }
        for cand in &mention.candidates {
            match table.lookup(cand.entity) {
                Some(vector) => {
                    let row: Vec<f64> = vector
                        .iter()
                        .zip(pos_mean.iter())
                        .map(|(e, p)| e + p)
                        .collect();
                    rows.push((
                        EntityRowInfo {
                            mention: mi,
                            entity: cand.entity,
                            token_span: mention.token_span,
                            surface: mention.surface.clone(),
                        },
                        row,
                    ));
                }
                None => skipped += 1,
            }
        }
    }
    let n = rows.len();
    let mut u = Matrix::zeros(n + 1, d);
    let mut infos = Vec::with_capacity(n);
    for (i, (info, row)) in rows.into_iter().enumerate() {
        for c in 0..d {
            u.set(i, c, row[c]);
        }
        infos.push(info);
    }
    for c in 0..d {
        u.set(n, c, params.noop.get(0, c));
    }
    Ok(EntityInputs {
        u,
        rows: infos,
        skipped,
    })
}

fn activation_length(activation: Activation, entity_rows: usize) -> usize {
    match activation {
        Activation::SigmoidLengthBias(LengthMode::Rows) => entity_rows + 1,
        Activation::SigmoidLengthBias(LengthMode::Entities) => entity_rows.max(1),
        Activation::Softmax => 0,
    }
}

fn apply_activation(activation: Activation, scores: &Matrix, entity_rows: usize) -> Result<Matrix> {
    match activation {
        Activation::SigmoidLengthBias(_) => {
            sigmoid_length_bias(scores, activation_length(activation, entity_rows))
        }
        Activation::Softmax => softmax_row(scores),
    }
}

/// Forward state consumed by [`attend_backward`].
pub struct AttendCache {
    h_cls: Matrix,
    inputs: EntityInputs,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
    activation: Activation,
    dropout: Option<Matrix>,
    ln: LayerNormCache,
    x_q: Matrix,
    x_k: Matrix,
    x_v: Matrix,
}

/// Applies the attention layer to a 1xD context embedding.
pub fn attend(
    h_cls: &Matrix,
    inputs: &EntityInputs,
    params: &KprParams,
    activation: Activation,
    mode: Mode,
    rng: &mut Rng,
    ln_eps: f64,
) -> Result<Matrix> {
    attend_with_cache(h_cls, inputs, params, activation, mode, rng, ln_eps).map(|(z, _)| z)
}

pub fn attend_with_cache(
    h_cls: &Matrix,
    inputs: &EntityInputs,
    params: &KprParams,
    activation: Activation,
    mode: Mode,
    rng: &mut Rng,
    ln_eps: f64,
) -> Result<(Matrix, AttendCache)> {
    let d = params.dim();
    if h_cls.rows() != 1 || h_cls.cols() != d {
        return Err(KprError::Shape(format!(
            "attend: context embedding {}x{}, expected 1x{d}",
            h_cls.rows(),
            h_cls.cols()
        )));
    }
    if inputs.u.cols() != d {
        return Err(KprError::Shape(format!(
            "attend: U has {} columns, expected {d}",
            inputs.u.cols()
        )));
    }
    let q = h_cls.matmul(&params.x_q)?;
    let k = inputs.u.matmul(&params.x_k)?;
    let v = inputs.u.matmul(&params.x_v)?;
    let scores = q.matmul(&k.transpose())?.scale(1.0 / (d as f64).sqrt());
    let weights = apply_activation(activation, &scores, inputs.entity_rows())?;
    let y = weights.matmul(&v)?;
    let (y_dropped, dropout) = match mode {
        Mode::Train if params.dropout_p > 0.0 => {
            let mask = dropout_mask(1, d, params.dropout_p, rng)?;
            (y.hadamard(&mask)?, Some(mask))
        }
        _ => (y, None),
    };
    let residual = y_dropped.add(h_cls)?;
    let (z, ln) = layer_norm_with_cache(&residual, &params.ln_gain, &params.ln_bias, ln_eps)?;
    z.ensure_finite("attention output")?;
    let cache = AttendCache {
        h_cls: h_cls.clone(),
        inputs: inputs.clone(),
        q,
        k,
        v,
        weights,
        activation,
        dropout,
        ln,
        x_q: params.x_q.clone(),
        x_k: params.x_k.clone(),
        x_v: params.x_v.clone(),
    };
    Ok((z, cache))
}

/// Gradients produced by [`attend_backward`].
pub struct AttendGrads {
    pub x_q: Matrix,
    pub x_k: Matrix,
    pub x_v: Matrix,
    /// Full position-table gradient; only rows under some mention are nonzero.
    pub position_table: Matrix,
    pub noop: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
    pub h_cls: Matrix,
    /// Per entity row: (entity id, gradient). Computed for completeness;
    /// the trainer discards these because the table is frozen.
    pub entity_rows: Vec<(usize, Vec<f64>)>,
}

/// Backward pass of [`attend`] given dL/dZ.
pub fn attend_backward(
    d_z: &Matrix,
    cache: &AttendCache,
    position_rows: usize,
) -> Result<AttendGrads> {
    let d = cache.h_cls.cols();
    if d_z.rows() != 1 || d_z.cols() != d {
        return Err(KprError::Shape(format!(
            "attend_backward: upstream {}x{}, expected 1x{d}",
            d_z.rows(),
            d_z.cols()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let (d_residual, d_ln_gain, d_ln_bias) = layer_norm_backward(d_z, &cache.ln)?;
    let mut d_h = d_residual.clone();
    let d_y = match &cache.dropout {
        Some(mask) => d_residual.hadamard(mask)?,
        None => d_residual,
    };
    // Y = weights . V
    let d_weights = d_y.matmul(&cache.v.transpose())?;
    let d_v_mat = cache.weights.transpose().matmul(&d_y)?;
    // activation
    let d_scores = match cache.activation {
        Activation::SigmoidLengthBias(_) => {
            // dsigma = sigma (1 - sigma)
            let mut out = Matrix::zeros(1, cache.weights.cols());
            for c in 0..cache.weights.cols() {
                let w = cache.weights.get(0, c);
                out.set(0, c, d_weights.get(0, c) * w * (1.0 - w));
            }
            out
        }
        Activation::Softmax => softmax_rows_backward(&d_weights, &cache.weights)?,
    };
    // scores = Q K^T * scale
    let d_q = d_scores.matmul(&cache.k)?.scale(scale);
    let d_k = d_scores.transpose().matmul(&cache.q)?.scale(scale);
    // projections
    let d_x_q = cache.h_cls.transpose().matmul(&d_q)?;
    d_h.add_assign(&d_q.matmul(&cache.x_q.transpose())?)?;
    let d_x_k = cache.inputs.u.transpose().matmul(&d_k)?;
    let d_x_v = cache.inputs.u.transpose().matmul(&d_v_mat)?;
    let mut d_u = d_k.matmul(&cache.x_k.transpose())?;
    d_u.add_assign(&d_v_mat.matmul(&cache.x_v.transpose())?)?;
    // route U rows: entity rows to (entity embedding, position average),
    // the final row to the no-op parameter
    let n = cache.inputs.entity_rows();
    let mut d_position = Matrix::zeros(position_rows, d);
    let mut entity_rows = Vec::with_capacity(n);
    for (i, info) in cache.inputs.rows.iter().enumerate() {
        let row: Vec<f64> = d_u.row(i).to_vec();
        let (start, end) = info.token_span;
        let span_len = (end - start) as f64;
        for p in start..end {
            for c in 0..d {
                d_position.set(p, c, d_position.get(p, c) + row[c] / span_len);
            }
        }
        entity_rows.push((info.entity, row));
    }
    let d_noop = Matrix::from_row(d_u.row(n));
    Ok(AttendGrads {
        x_q: d_x_q,
        x_k: d_x_k,
        x_v: d_x_v,
        position_table: d_position,
        noop: d_noop,
        ln_gain: d_ln_gain,
        ln_bias: d_ln_bias,
        h_cls: d_h,
        entity_rows,
    })
}

/// One row of an attention-weight report.
#[derive(Clone, Debug)]
pub struct WeightRow {
    /// Entity id, or None for the no-op row.
    pub entity: Option<usize>,
    pub surface: Option<String>,
    pub raw: f64,
    pub normalized: f64,
}

/// Raw activation outputs and their normalized shares for every row of U,
/// the no-op row included. With `per_mention` set, normalization runs within
/// each mention's candidate set instead of over all rows (the no-op then
/// keeps its global share).
pub fn attention_weights(
    h_cls: &Matrix,
    inputs: &EntityInputs,
    params: &KprParams,
    activation: Activation,
    per_mention: bool,
    ln_eps: f64,
) -> Result<Vec<WeightRow>> {
    let (_, cache) = attend_with_cache(
        h_cls,
        inputs,
        params,
        activation,
        Mode::Eval,
        &mut Rng::new(0),
        ln_eps,
    )?;
    let raw: Vec<f64> = (0..cache.weights.cols())
        .map(|c| cache.weights.get(0, c))
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return Err(KprError::Numeric(
            "attention_weights: raw activations sum to zero".into(),
        ));
    }
    let n = inputs.entity_rows();
    let mut normalized = vec![0.0; n + 1];
    if per_mention {
        let mut mention_sums: std::collections::BTreeMap<usize, f64> =
            std::collections::BTreeMap::new();
        for (i, info) in inputs.rows.iter().enumerate() {
            *mention_sums.entry(info.mention).or_insert(0.0) += raw[i];
        }
        for (i, info) in inputs.rows.iter().enumerate() {
            let s = mention_sums[&info.mention];
            if s == 0.0 {
                return Err(KprError::Numeric(format!(
                    "attention_weights: mention {} weights sum to zero",
                    info.mention
                )));
            }
            normalized[i] = raw[i] / s;
        }
        normalized[n] = raw[n] / total;
    } else {
        for i in 0..=n {
            normalized[i] = raw[i] / total;
        }
    }
    let mut rows = Vec::with_capacity(n + 1);
    for (i, info) in inputs.rows.iter().enumerate() {
        rows.push(WeightRow {
            entity: Some(info.entity),
            surface: Some(info.surface.clone()),
            raw: raw[i],
            normalized: normalized[i],
        });
    }
    rows.push(WeightRow {
        entity: None,
        surface: None,
        raw: raw[n],
        normalized: normalized[n],
    });
    Ok(rows)
}
