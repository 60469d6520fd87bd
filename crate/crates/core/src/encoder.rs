//! Miniature transformer text encoder.
//!
//! A post-norm stack: token + position embeddings, then per layer multi-head
//! self-attention and a GELU feed-forward block, each followed by residual
//! add and layer normalization. Every layer's hidden states are exposed so
//! the entity embedder can read intermediate layers, and the [CLS] row of the
//! last layer serves as the context embedding. The backward pass is written
//! by hand and validated with finite differences.

use crate::error::{KprError, Result};
use crate::rng::Rng;
use crate::tensor::{
    dropout_mask, layer_norm_backward, layer_norm_with_cache, softmax_rows,
    softmax_rows_backward, LayerNormCache, Matrix, Mode,
};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// Hyperparameters of the toy encoder.
#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub max_tokens: usize,
    pub heads: usize,
    pub dropout_p: f64,
    pub ln_eps: f64,
    pub vocab: Vocabulary,
}

impl EncoderConfig {
    pub fn new(vocab: Vocabulary) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            hidden: 16,
            max_tokens: 64,
            heads: 2,
            dropout_p: 0.1,
            ln_eps: 1e-12,
            vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.max_tokens < 2 || self.heads == 0 {
            return Err(KprError::Parameter(
                "encoder config: layers, hidden, heads must be positive and max_tokens >= 2"
                    .into(),
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(KprError::Parameter(format!(
                "encoder config: heads {} must divide hidden {}",
                self.heads, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(KprError::Parameter(format!(
                "encoder config: dropout {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        4 * self.hidden
    }
}

/// A dense projection with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    fn init(inp: usize, out: usize, rng: &mut Rng, bound: f64) -> Linear {
        Linear {
            weight: Matrix::uniform(inp, out, -bound, bound, rng),
            bias: Matrix::zeros(1, out),
        }
    }

    fn zeros(inp: usize, out: usize) -> Linear {
        Linear {
            weight: Matrix::zeros(inp, out),
            bias: Matrix::zeros(1, out),
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) + self.bias.get(0, c));
            }
        }
        Ok(out)
    }

    /// Returns d_input and accumulates weight/bias gradients.
    fn backward(&self, x: &Matrix, d_out: &Matrix, grads: &mut Linear) -> Result<Matrix> {
        grads.weight.add_assign(&x.transpose().matmul(d_out)?)?;
        grads.bias.add_assign(&d_out.col_sums())?;
        d_out.matmul(&self.weight.transpose())
    }
}

/// Parameters of one transformer layer.
#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn_q: Linear,
    pub attn_k: Linear,
    pub attn_v: Linear,
    pub attn_out: Linear,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

/// All trainable encoder parameters.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    /// Weights uniform in +-1/sqrt(hidden), biases zero, layer-norm gain one.
    pub fn init(config: &EncoderConfig, rng: &mut Rng) -> Result<EncoderParams> {
        config.validate()?;
        let d = config.hidden;
        let f = config.ffn_hidden();
        let bound = 1.0 / (d as f64).sqrt();
        let v = config.vocab.len();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(EncoderLayerParams {
                attn_q: Linear::init(d, d, rng, bound),
                attn_k: Linear::init(d, d, rng, bound),
                attn_v: Linear::init(d, d, rng, bound),
                attn_out: Linear::init(d, d, rng, bound),
                ln1_gain: Matrix::from_vec(1, d, vec![1.0; d])?,
                ln1_bias: Matrix::zeros(1, d),
                ffn_in: Linear::init(d, f, rng, bound),
                ffn_out: Linear::init(f, d, rng, bound),
                ln2_gain: Matrix::from_vec(1, d, vec![1.0; d])?,
                ln2_bias: Matrix::zeros(1, d),
            });
        }
        Ok(EncoderParams {
            token_embedding: Matrix::uniform(v, d, -bound, bound, rng),
            position_embedding: Matrix::uniform(config.max_tokens, d, -bound, bound, rng),
            layers,
        })
    }

    pub fn zeros_like(&self) -> EncoderParams {
        let d = self.token_embedding.cols();
        let layers = self
            .layers
            .iter()
            .map(|l| EncoderLayerParams {
                attn_q: Linear::zeros(d, d),
                attn_k: Linear::zeros(d, d),
                attn_v: Linear::zeros(d, d),
                attn_out: Linear::zeros(d, d),
                ln1_gain: Matrix::zeros(1, d),
                ln1_bias: Matrix::zeros(1, d),
                ffn_in: Linear::zeros(d, l.ffn_in.weight.cols()),
                ffn_out: Linear::zeros(l.ffn_in.weight.cols(), d),
                ln2_gain: Matrix::zeros(1, d),
                ln2_bias: Matrix::zeros(1, d),
            })
            .collect();
        EncoderParams {
            token_embedding: Matrix::zeros(self.token_embedding.rows(), d),
            position_embedding: Matrix::zeros(self.position_embedding.rows(), d),
            layers,
        }
    }

    /// Tensors in a fixed canonical order, paired with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_q.weight"), &l.attn_q.weight));
            out.push((format!("layer{i}.attn_q.bias"), &l.attn_q.bias));
            out.push((format!("layer{i}.attn_k.weight"), &l.attn_k.weight));
            out.push((format!("layer{i}.attn_k.bias"), &l.attn_k.bias));
            out.push((format!("layer{i}.attn_v.weight"), &l.attn_v.weight));
            out.push((format!("layer{i}.attn_v.bias"), &l.attn_v.bias));
            out.push((format!("layer{i}.attn_out.weight"), &l.attn_out.weight));
            out.push((format!("layer{i}.attn_out.bias"), &l.attn_out.bias));
            out.push((format!("layer{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layer{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layer{i}.ffn_in.weight"), &l.ffn_in.weight));
            out.push((format!("layer{i}.ffn_in.bias"), &l.ffn_in.bias));
            out.push((format!("layer{i}.ffn_out.weight"), &l.ffn_out.weight));
            out.push((format!("layer{i}.ffn_out.bias"), &l.ffn_out.bias));
            out.push((format!("layer{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layer{i}.ln2_bias"), &l.ln2_bias));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.push(&mut l.attn_q.weight);
            out.push(&mut l.attn_q.bias);
            out.push(&mut l.attn_k.weight);
            out.push(&mut l.attn_k.bias);
            out.push(&mut l.attn_v.weight);
            out.push(&mut l.attn_v.bias);
            out.push(&mut l.attn_out.weight);
            out.push(&mut l.attn_out.bias);
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.ffn_in.weight);
            out.push(&mut l.ffn_in.bias);
            out.push(&mut l.ffn_out.weight);
            out.push(&mut l.ffn_out.bias);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
        }
        out
    }

    pub fn add_assign(&mut self, other: &EncoderParams) -> Result<()> {
        let other_tensors = other.tensors();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(other_tensors) {
            mine.add_assign(theirs)?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        crate::tensor::checksum_matrices(self.tensors())
    }

    /// Mean L2 norm of the input token embedding rows; entity embeddings are
    /// rescaled to this value so they arrive at the same scale as tokens.
    pub fn reference_norm(&self) -> f64 {
        let v = self.token_embedding.rows();
        let mut total = 0.0;
        for r in 0..v {
            total += self
                .token_embedding
                .row(r)
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
        }
        total / v as f64
    }
}

/// Per-layer hidden states; entry 0 is the embedding sum, entry L the output.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Vec<Matrix>,
}

impl EncoderOutput {
    /// The [CLS] context embedding: row 0 of the last layer.
    pub fn h_cls(&self) -> Matrix {
        self.states
            .last()
            .expect("states never empty")
            .row_matrix(0)
    }
}

struct HeadCache {
    probs: Matrix,
    dropped: Matrix,
    mask: Option<Matrix>,
}

struct LayerCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    heads: Vec<HeadCache>,
    o_concat: Matrix,
    mask_attn_out: Option<Matrix>,
    ln1: LayerNormCache,
    n1: Matrix,
    f1: Matrix,
    gelu_out: Matrix,
    mask_ffn: Option<Matrix>,
    ln2: LayerNormCache,
}

/// Forward state consumed by [`encode_backward`].
pub struct EncoderCache {
    token_ids: Vec<usize>,
    states: Vec<Matrix>,
    layers: Vec<LayerCache>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn head_slice(m: &Matrix, head: usize, dh: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), dh);
    for r in 0..m.rows() {
        for c in 0..dh {
            out.set(r, c, m.get(r, head * dh + c));
        }
    }
    out
}

fn head_write(dst: &mut Matrix, head: usize, dh: usize, src: &Matrix) {
    for r in 0..src.rows() {
        for c in 0..dh {
            dst.set(r, head * dh + c, src.get(r, c));
        }
    }
}

/// Encodes a token sequence, returning all layer states.
pub fn encode(
    params: &EncoderParams,
    config: &EncoderConfig,
    tokens: &TokenSequence,
    mode: Mode,
    rng: &mut Rng,
) -> Result<EncoderOutput> {
    encode_with_cache(params, config, tokens, mode, rng).map(|(out, _)| out)
}

pub fn encode_with_cache(
    params: &EncoderParams,
    config: &EncoderConfig,
    tokens: &TokenSequence,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(EncoderOutput, EncoderCache)> {
    config.validate()?;
    let t = tokens.ids.len();
    if t == 0 {
        return Err(KprError::Input("encode: empty token sequence".into()));
    }
    if t > config.max_tokens {
        return Err(KprError::Input(format!(
            "encode: {t} tokens exceed max_tokens {}",
            config.max_tokens
        )));
    }
    let d = config.hidden;
    for &id in &tokens.ids {
        if id >= config.vocab.len() {
            return Err(KprError::Input(format!(
                "encode: token id {id} outside vocab of {}",
                config.vocab.len()
            )));
        }
    }
    let dh = d / config.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let p = config.dropout_p;
    let use_dropout = mode == Mode::Train && p > 0.0;

    let mut x = Matrix::zeros(t, d);
    for (pos, &id) in tokens.ids.iter().enumerate() {
        for c in 0..d {
            x.set(
                pos,
                c,
                params.token_embedding.get(id, c) + params.position_embedding.get(pos, c),
            );
        }
    }
    let mut states = vec![x.clone()];
    let mut layer_caches = Vec::with_capacity(config.layers);

    for layer in &params.layers {
        let q = layer.attn_q.forward(&x)?;
        let k = layer.attn_k.forward(&x)?;
        let v = layer.attn_v.forward(&x)?;
        let mut o_concat = Matrix::zeros(t, d);
        let mut heads = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&k, h, dh);
            let vh = head_slice(&v, h, dh);
            let scores = qh.matmul(&kh.transpose())?.scale(scale);
            let probs = softmax_rows(&scores);
            let (dropped, mask) = if use_dropout {
                let mask = dropout_mask(t, t, p, rng)?;
                (probs.hadamard(&mask)?, Some(mask))
            } else {
                (probs.clone(), None)
            };
            let oh = dropped.matmul(&vh)?;
            head_write(&mut o_concat, h, dh, &oh);
            heads.push(HeadCache {
                probs,
                dropped,
                mask,
            });
        }
        let attn = layer.attn_out.forward(&o_concat)?;
        let (attn_dropped, mask_attn_out) = if use_dropout {
            let mask = dropout_mask(t, d, p, rng)?;
            (attn.hadamard(&mask)?, Some(mask))
        } else {
            (attn, None)
        };
        let r1 = x.add(&attn_dropped)?;
        let (n1, ln1) =
            layer_norm_with_cache(&r1, &layer.ln1_gain, &layer.ln1_bias, config.ln_eps)?;

        let f1 = layer.ffn_in.forward(&n1)?;
        let gelu_out = f1.map(gelu);
        let f2 = layer.ffn_out.forward(&gelu_out)?;
        let (ffn_dropped, mask_ffn) = if use_dropout {
            let mask = dropout_mask(t, d, p, rng)?;
            (f2.hadamard(&mask)?, Some(mask))
        } else {
            (f2, None)
        };
        let r2 = n1.add(&ffn_dropped)?;
        let (n2, ln2) =
            layer_norm_with_cache(&r2, &layer.ln2_gain, &layer.ln2_bias, config.ln_eps)?;

        layer_caches.push(LayerCache {
            q,
            k,
            v,
            heads,
            o_concat,
            mask_attn_out,
            ln1,
            n1,
            f1,
            gelu_out,
            mask_ffn,
            ln2,
        });
        x = n2.clone();
        states.push(n2);
    }
    states
        .last()
        .expect("at least one layer")
        .ensure_finite("encoder output")?;
    let cache = EncoderCache {
        token_ids: tokens.ids.clone(),
        states: states.clone(),
        layers: layer_caches,
    };
    Ok((EncoderOutput { states }, cache))
}

/// Backpropagates `d_last` (gradient w.r.t. the final layer states) through
/// the stack, accumulating parameter gradients into `grads`.
pub fn encode_backward(
    params: &EncoderParams,
    config: &EncoderConfig,
    cache: &EncoderCache,
    d_last: &Matrix,
    grads: &mut EncoderParams,
) -> Result<()> {
    let d = config.hidden;
    let dh = d / config.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = cache.token_ids.len();
    if d_last.rows() != t || d_last.cols() != d {
        return Err(KprError::Shape(format!(
            "encode_backward: upstream {}x{}, expected {t}x{d}",
            d_last.rows(),
            d_last.cols()
        )));
    }

    let mut dx = d_last.clone();
    for (layer_index, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[layer_index];
        let x_in = &cache.states[layer_index];
        let g = &mut grads.layers[layer_index];

        // output layer norm
        let (dr2, dg2, db2) = layer_norm_backward(&dx, &lc.ln2)?;
        g.ln2_gain.add_assign(&dg2)?;
        g.ln2_bias.add_assign(&db2)?;

        // feed-forward branch
        let df2 = match &lc.mask_ffn {
            Some(mask) => dr2.hadamard(mask)?,
            None => dr2.clone(),
        };
        let dgelu_out = layer.ffn_out.backward(&lc.gelu_out, &df2, &mut g.ffn_out)?;
        let df1 = dgelu_out.hadamard(&lc.f1.map(gelu_grad))?;
        let mut dn1 = layer.ffn_in.backward(&lc.n1, &df1, &mut g.ffn_in)?;
        dn1.add_assign(&dr2)?; // residual around the feed-forward block

        // first layer norm
        let (dr1, dg1, db1) = layer_norm_backward(&dn1, &lc.ln1)?;
        g.ln1_gain.add_assign(&dg1)?;
        g.ln1_bias.add_assign(&db1)?;

        // attention branch
        let dattn = match &lc.mask_attn_out {
            Some(mask) => dr1.hadamard(mask)?,
            None => dr1.clone(),
        };
        let do_concat = layer
            .attn_out
            .backward(&lc.o_concat, &dattn, &mut g.attn_out)?;

        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(t, d);
        let mut dv = Matrix::zeros(t, d);
        for h in 0..config.heads {
            let hc = &lc.heads[h];
            let qh = head_slice(&lc.q, h, dh);
            let kh = head_slice(&lc.k, h, dh);
            let vh = head_slice(&lc.v, h, dh);
            let doh = head_slice(&do_concat, h, dh);
            let ddropped = doh.matmul(&vh.transpose())?;
            let dvh = hc.dropped.transpose().matmul(&doh)?;
            let dprobs = match &hc.mask {
                Some(mask) => ddropped.hadamard(mask)?,
                None => ddropped,
            };
            let dscores = softmax_rows_backward(&dprobs, &hc.probs)?;
            let dqh = dscores.matmul(&kh)?.scale(scale);
            let dkh = dscores.transpose().matmul(&qh)?.scale(scale);
            head_write(&mut dq, h, dh, &dqh);
            head_write(&mut dk, h, dh, &dkh);
            head_write(&mut dv, h, dh, &dvh);
        }

        let mut dx_in = dr1; // residual around attention
        dx_in.add_assign(&layer.attn_q.backward(x_in, &dq, &mut g.attn_q)?)?;
        dx_in.add_assign(&layer.attn_k.backward(x_in, &dk, &mut g.attn_k)?)?;
        dx_in.add_assign(&layer.attn_v.backward(x_in, &dv, &mut g.attn_v)?)?;
        dx = dx_in;
    }

    // embeddings
    for (pos, &id) in cache.token_ids.iter().enumerate() {
        for c in 0..d {
            let v = dx.get(pos, c);
            grads
                .token_embedding
                .set(id, c, grads.token_embedding.get(id, c) + v);
            grads
                .position_embedding
                .set(pos, c, grads.position_embedding.get(pos, c) + v);
        }
    }
    Ok(())
}
