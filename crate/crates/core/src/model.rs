//! Bi-encoder model assembly.
//!
//! One tower used twice: queries and passages share the encoder and the
//! entity attention layer. `embed_text` runs tokenize -> encode -> link ->
//! build U -> attend and returns the final 1xD embedding; a baseline mode
//! skips the attention layer and returns the [CLS] embedding directly for
//! ablations. Checkpoints store every tensor in the shared binary container
//! (one scalar per entry, id = parameter index) next to a plain-text config
//! sidecar and the vocabulary file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::attention::{
    attend_backward, attend_with_cache, build_entity_inputs, Activation, AttendCache, KprParams,
    LengthMode,
};
use crate::container::{self, Container};
use crate::encoder::{
    encode_backward, encode_with_cache, EncoderCache, EncoderConfig, EncoderParams,
};
use crate::entity::EntityEmbeddingTable;
use crate::error::{KprError, Result};
use crate::linker::{link, AnchorDictionary};
use crate::rng::Rng;
use crate::tensor::{Matrix, Mode};
use crate::tokenizer::{format_query, tokenize, Vocabulary};

pub const DEFAULT_MAX_NGRAM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Query,
    Passage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Dot,
    Cosine,
}

/// Architecture and scoring knobs shared by the whole pipeline.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub activation: Activation,
    pub similarity: Similarity,
    pub temperature: f64,
    pub instruction: Option<String>,
    /// Skip the entity attention layer and embed with [CLS] alone.
    pub baseline: bool,
    pub max_ngram: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> ModelConfig {
        ModelConfig {
            encoder,
            activation: Activation::default_sigmoid(),
            similarity: Similarity::Dot,
            temperature: 1.0,
            instruction: None,
            baseline: false,
            max_ngram: DEFAULT_MAX_NGRAM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.temperature <= 0.0 {
            return Err(KprError::Parameter(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.max_ngram == 0 {
            return Err(KprError::Parameter("max_ngram must be >= 1".into()));
        }
        Ok(())
    }
}

/// Encoder plus attention-layer parameters.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub kpr: KprParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
        let encoder = EncoderParams::init(&config.encoder, rng)?;
        let kpr = KprParams::init(
            config.encoder.hidden,
            config.encoder.max_tokens,
            config.encoder.dropout_p,
            rng,
        )?;
        Ok(ModelParams { encoder, kpr })
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            encoder: self.encoder.zeros_like(),
            kpr: self.kpr.zeros_like(),
        }
    }

    /// Encoder tensors first, then attention tensors; index = parameter id.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.encoder.named_tensors();
        out.extend(
            self.kpr
                .named_tensors()
                .into_iter()
                .map(|(n, m)| (format!("kpr.{n}"), m)),
        );
        out
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.named_tensors().into_iter().map(|(_, m)| m).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.kpr.tensors_mut());
        out
    }

    /// Number of tensors that belong to the encoder (the freeze-base prefix).
    pub fn encoder_tensor_count(&self) -> usize {
        self.encoder.tensors().len()
    }

    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        self.encoder.add_assign(&other.encoder)?;
        self.kpr.add_assign(&other.kpr)
    }
}

/// A full retriever: config + parameters. The frozen entity table and the
/// anchor dictionary are passed alongside at call sites; both can be swapped
/// without touching the model.
#[derive(Clone, Debug)]
pub struct KprModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl KprModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<KprModel> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(KprModel { config, params })
    }
}

/// Forward state of one embedded text, consumed by [`embed_text_backward`].
pub struct TextCache {
    token_count: usize,
    hidden: usize,
    encoder: EncoderCache,
    attend: Option<AttendCache>,
}

fn text_for_role(model: &KprModel, text: &str, role: Role) -> Result<String> {
    match role {
        Role::Query => format_query(text, model.config.instruction.as_deref()),
        Role::Passage => Ok(text.to_string()),
    }
}

/// Embeds a text into the shared vector space.
///
/// Passages should already be formatted with [`crate::tokenizer::format_passage`];
/// queries get the configured instruction prepended.
pub fn embed_text(
    model: &KprModel,
    dict: &AnchorDictionary,
    table: &EntityEmbeddingTable,
    text: &str,
    role: Role,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Matrix> {
    embed_text_with_cache(model, dict, table, text, role, mode, rng).map(|(z, _)| z)
}

pub fn embed_text_with_cache(
    model: &KprModel,
    dict: &AnchorDictionary,
    table: &EntityEmbeddingTable,
    text: &str,
    role: Role,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Matrix, TextCache)> {
    let config = &model.config;
    let prepared = text_for_role(model, text, role)?;
    let tokens = tokenize(&prepared, &config.encoder.vocab, config.encoder.max_tokens)?;
    let (out, encoder_cache) =
        encode_with_cache(&model.params.encoder, &config.encoder, &tokens, mode, rng)?;
    let h_cls = out.h_cls();
    if config.baseline {
        return Ok((
            h_cls,
            TextCache {
                token_count: tokens.len(),
                hidden: config.encoder.hidden,
                encoder: encoder_cache,
                attend: None,
            },
        ));
    }
    let mentions = link(&tokens, dict, config.max_ngram);
    let inputs = build_entity_inputs(&mentions, table, &model.params.kpr)?;
    let (z, attend_cache) = attend_with_cache(
        &h_cls,
        &inputs,
        &model.params.kpr,
        config.activation,
        mode,
        rng,
        config.encoder.ln_eps,
    )?;
    Ok((
        z,
        TextCache {
            token_count: tokens.len(),
            hidden: config.encoder.hidden,
            encoder: encoder_cache,
            attend: Some(attend_cache),
        },
    ))
}

/// Backpropagates dL/d(embedding) through attention and encoder,
/// accumulating into `grads`. Gradients to frozen entity rows are dropped
/// here; everything else flows.
pub fn embed_text_backward(
    model: &KprModel,
    cache: &TextCache,
    d_out: &Matrix,
    grads: &mut ModelParams,
) -> Result<()> {
    let d = cache.hidden;
    let d_h_cls = match &cache.attend {
        Some(attend_cache) => {
            let a = attend_backward(d_out, attend_cache, model.params.kpr.position_table.rows())?;
            grads.kpr.x_q.add_assign(&a.x_q)?;
            grads.kpr.x_k.add_assign(&a.x_k)?;
            grads.kpr.x_v.add_assign(&a.x_v)?;
            grads.kpr.position_table.add_assign(&a.position_table)?;
            grads.kpr.noop.add_assign(&a.noop)?;
            grads.kpr.ln_gain.add_assign(&a.ln_gain)?;
            grads.kpr.ln_bias.add_assign(&a.ln_bias)?;
            // a.entity_rows intentionally dropped: the table is frozen
            a.h_cls
        }
        None => d_out.clone(),
    };
    let mut d_last = Matrix::zeros(cache.token_count, d);
    for c in 0..d {
        d_last.set(0, c, d_h_cls.get(0, c));
    }
    encode_backward(
        &model.params.encoder,
        &model.config.encoder,
        &cache.encoder,
        &d_last,
        &mut grads.encoder,
    )
}

/// Relevance of a passage embedding for a query embedding.
pub fn score(
    e_q: &Matrix,
    e_p: &Matrix,
    similarity: Similarity,
    temperature: f64,
) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(KprError::Parameter(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let dot = e_q.dot(e_p)?;
    match similarity {
        Similarity::Dot => Ok(dot / temperature),
        Similarity::Cosine => {
            let nq = e_q.frobenius_norm();
            let np = e_p.frobenius_norm();
            if nq == 0.0 || np == 0.0 {
                return Err(KprError::Numeric(
                    "cosine similarity of a zero vector".into(),
                ));
            }
            Ok(dot / (nq * np * temperature))
        }
    }
}

/// Gradients of [`score`] w.r.t. both embeddings, given dL/d(score).
pub fn score_backward(
    e_q: &Matrix,
    e_p: &Matrix,
    similarity: Similarity,
    temperature: f64,
    d_score: f64,
) -> Result<(Matrix, Matrix)> {
    match similarity {
        Similarity::Dot => {
            let c = d_score / temperature;
            Ok((e_p.scale(c), e_q.scale(c)))
        }
        Similarity::Cosine => {
            let nq = e_q.frobenius_norm();
            let np = e_p.frobenius_norm();
            if nq == 0.0 || np == 0.0 {
                return Err(KprError::Numeric(
                    "cosine similarity of a zero vector".into(),
                ));
            }
            let dot = e_q.dot(e_p)?;
            let c = d_score / temperature;
            // d/dq [ q.p / (|q||p|) ] = p/(|q||p|) - (q.p) q / (|q|^3 |p|)
            let mut dq = e_p.scale(c / (nq * np));
            dq.add_scaled(-c * dot / (nq * nq * nq * np), e_q)?;
            let mut dp = e_q.scale(c / (nq * np));
            dp.add_scaled(-c * dot / (np * np * np * nq), e_p)?;
            Ok((dq, dp))
        }
    }
}

fn activation_to_str(a: Activation) -> (&'static str, &'static str) {
    match a {
        Activation::SigmoidLengthBias(LengthMode::Rows) => ("sigmoid", "rows"),
        Activation::SigmoidLengthBias(LengthMode::Entities) => ("sigmoid", "entities"),
        Activation::Softmax => ("softmax", "rows"),
    }
}

/// Checkpoint paths: tensors at `base`, config at `base.cfg`, vocabulary at
/// `base.vocab`.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let mut cfg = base.as_os_str().to_os_string();
    cfg.push(".cfg");
    let mut vocab = base.as_os_str().to_os_string();
    vocab.push(".vocab");
    (base.to_path_buf(), PathBuf::from(cfg), PathBuf::from(vocab))
}

/// Saves the model. `extra` keys (training settings, seeds) are appended to
/// the sidecar for provenance.
pub fn save_checkpoint(
    model: &KprModel,
    base: &Path,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let (tensor_path, cfg_path, vocab_path) = checkpoint_paths(base);
    let mut entries: Vec<(u64, Vec<f64>)> = Vec::new();
    let mut index = 0u64;
    for tensor in model.params.tensors() {
        for &v in tensor.data() {
            entries.push((index, vec![v]));
            index += 1;
        }
    }
    container::write(
        &tensor_path,
        &Container {
            dim: 1,
            reference_norm: 0.0,
            entries,
        },
    )?;
    let (activation, sigmoid_length) = activation_to_str(model.config.activation);
    let mut cfg = String::new();
    let enc = &model.config.encoder;
    cfg.push_str(&format!("layers = {}\n", enc.layers));
    cfg.push_str(&format!("hidden = {}\n", enc.hidden));
    cfg.push_str(&format!("max_tokens = {}\n", enc.max_tokens));
    cfg.push_str(&format!("heads = {}\n", enc.heads));
    cfg.push_str(&format!("dropout = {}\n", enc.dropout_p));
    cfg.push_str(&format!("ln_eps = {}\n", enc.ln_eps));
    cfg.push_str(&format!("activation = {activation}\n"));
    cfg.push_str(&format!("sigmoid_length = {sigmoid_length}\n"));
    cfg.push_str(&format!(
        "similarity = {}\n",
        match model.config.similarity {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        }
    ));
    cfg.push_str(&format!("temperature = {}\n", model.config.temperature));
    cfg.push_str(&format!(
        "instruction = {}\n",
        model.config.instruction.as_deref().unwrap_or("")
    ));
    cfg.push_str(&format!("baseline = {}\n", model.config.baseline));
    cfg.push_str(&format!("max_ngram = {}\n", model.config.max_ngram));
    for (k, v) in extra {
        cfg.push_str(&format!("{k} = {v}\n"));
    }
    container::write_atomic(&cfg_path, cfg.as_bytes())?;
    model.config.encoder.vocab.save(&vocab_path)
}

fn parse_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(KprError::Format(format!(
                "{}: bad config line {line:?}",
                path.display()
            )));
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(
    cfg: &BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T> {
    cfg.get(key)
        .ok_or_else(|| KprError::Format(format!("{}: missing key {key}", path.display())))?
        .parse::<T>()
        .map_err(|_| KprError::Format(format!("{}: invalid value for {key}", path.display())))
}

/// Loads a checkpoint; returns the model and the raw sidecar map (the caller
/// can read back training settings from it).
pub fn load_checkpoint(base: &Path) -> Result<(KprModel, BTreeMap<String, String>)> {
    let (tensor_path, cfg_path, vocab_path) = checkpoint_paths(base);
    let cfg = parse_sidecar(&cfg_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let mut encoder = EncoderConfig::new(vocab);
    encoder.layers = parse_field(&cfg, "layers", &cfg_path)?;
    encoder.hidden = parse_field(&cfg, "hidden", &cfg_path)?;
    encoder.max_tokens = parse_field(&cfg, "max_tokens", &cfg_path)?;
    encoder.heads = parse_field(&cfg, "heads", &cfg_path)?;
    encoder.dropout_p = parse_field(&cfg, "dropout", &cfg_path)?;
    encoder.ln_eps = parse_field(&cfg, "ln_eps", &cfg_path)?;
    let activation = match (
        cfg.get("activation").map(String::as_str),
        cfg.get("sigmoid_length").map(String::as_str),
    ) {
        (Some("softmax"), _) => Activation::Softmax,
        (Some("sigmoid"), Some("entities")) => {
            Activation::SigmoidLengthBias(LengthMode::Entities)
        }
        (Some("sigmoid"), _) => Activation::SigmoidLengthBias(LengthMode::Rows),
        (other, _) => {
            return Err(KprError::Format(format!(
                "{}: unknown activation {other:?}",
                cfg_path.display()
            )))
        }
    };
    let similarity = match cfg.get("similarity").map(String::as_str) {
        Some("dot") => Similarity::Dot,
        Some("cosine") => Similarity::Cosine,
        other => {
            return Err(KprError::Format(format!(
                "{}: unknown similarity {other:?}",
                cfg_path.display()
            )))
        }
    };
    let instruction = match cfg.get("instruction").map(String::as_str) {
        None | Some("") => None,
        Some(s) => Some(s.to_string()),
    };
    let mut config = ModelConfig::new(encoder);
    config.activation = activation;
    config.similarity = similarity;
    config.temperature = parse_field(&cfg, "temperature", &cfg_path)?;
    config.instruction = instruction;
    config.baseline = parse_field(&cfg, "baseline", &cfg_path)?;
    config.max_ngram = parse_field(&cfg, "max_ngram", &cfg_path)?;
    config.validate()?;

    let container = container::read(&tensor_path)?;
    if container.dim != 1 {
        return Err(KprError::Format(format!(
            "{}: parameter container must have dim 1",
            tensor_path.display()
        )));
    }
    let mut params = ModelParams::init(&config, &mut Rng::new(0))?;
    let total: usize = params.tensors().iter().map(|t| t.data().len()).sum();
    if container.entries.len() != total {
        return Err(KprError::Format(format!(
            "{}: expected {total} parameters, found {}",
            tensor_path.display(),
            container.entries.len()
        )));
    }
    let mut flat = vec![0.0f64; total];
    for (id, v) in &container.entries {
        let idx = *id as usize;
        if idx >= total {
            return Err(KprError::Format(format!(
                "{}: parameter index {idx} out of range",
                tensor_path.display()
            )));
        }
        flat[idx] = v[0];
    }
    let mut offset = 0usize;
    for tensor in params.tensors_mut() {
        let n = tensor.data().len();
        tensor.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    Ok((KprModel { config, params }, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linker::{AnchorDictionary, Candidate, DictEntry};
    use crate::tokenizer::{format_passage, SPECIAL_TOKENS};
    use std::collections::BTreeMap;

    fn vocab() -> Vocabulary {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in ["who", "made", "orvia", "plant", "from", "hills"] {
            tokens.push(w.into());
        }
        Vocabulary::from_tokens(tokens).unwrap()
    }

    fn dict() -> AnchorDictionary {
        let mut entries = BTreeMap::new();
        entries.insert(
            "orvia".to_string(),
            DictEntry {
                link_probability: 1.0,
                candidates: vec![Candidate {
                    entity: 0,
                    commonness: 1.0,
                }],
            },
        );
        AnchorDictionary::from_entries(entries, vec!["Orvia".into()], 0.05, 0.30)
    }

    fn table(dim: usize) -> EntityEmbeddingTable {
        let mut t = EntityEmbeddingTable::new(dim, 0.5).unwrap();
        let mut rng = Rng::new(40);
        let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-0.5, 0.5)).collect();
        t.upsert(0, v).unwrap();
        t
    }

    fn model(baseline: bool) -> KprModel {
        let mut enc = EncoderConfig::new(vocab());
        enc.layers = 1;
        enc.hidden = 8;
        enc.max_tokens = 16;
        enc.dropout_p = 0.0;
        let mut config = ModelConfig::new(enc);
        config.baseline = baseline;
        KprModel::init(config, 77).unwrap()
    }

    #[test]
    fn baseline_returns_cls_embedding_exactly() {
        let m_base = model(true);
        let t = table(8);
        let d = dict();
        let text = "who made orvia";
        let z = embed_text(
            &m_base,
            &d,
            &t,
            text,
            Role::Query,
            Mode::Eval,
            &mut Rng::new(0),
        )
        .unwrap();
        let tokens = tokenize(text, &m_base.config.encoder.vocab, 16).unwrap();
        let out = crate::encoder::encode(
            &m_base.params.encoder,
            &m_base.config.encoder,
            &tokens,
            Mode::Eval,
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(z, out.h_cls());
    }

    #[test]
    fn no_linked_entities_still_embeds() {
        let m = model(false);
        let t = table(8);
        let d = dict();
        let z = embed_text(
            &m,
            &d,
            &t,
            "plant from hills",
            Role::Query,
            Mode::Eval,
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(z.rows(), 1);
        assert_eq!(z.cols(), 8);
        assert!(z.is_finite());
    }

    #[test]
    fn output_dimension_is_hidden_for_any_role() {
        let m = model(false);
        let t = table(8);
        let d = dict();
        for role in [Role::Query, Role::Passage] {
            let text = format_passage("orvia", "plant from hills");
            let z = embed_text(&m, &d, &t, &text, role, Mode::Eval, &mut Rng::new(0)).unwrap();
            assert_eq!((z.rows(), z.cols()), (1, 8));
        }
    }

    #[test]
    fn instruction_changes_query_embedding_only() {
        let mut m = model(false);
        let t = table(8);
        let d = dict();
        let plain = embed_text(
            &m,
            &d,
            &t,
            "who made orvia",
            Role::Query,
            Mode::Eval,
            &mut Rng::new(0),
        )
        .unwrap();
        m.config.instruction = Some("who made plant".into());
        let with_instr = embed_text(
            &m,
            &d,
            &t,
            "who made orvia",
            Role::Query,
            Mode::Eval,
            &mut Rng::new(0),
        )
        .unwrap();
        assert_ne!(plain, with_instr);
    }

    #[test]
    fn score_dot_basic() {
        let a = Matrix::from_row(&[1.0, 0.0]);
        let b = Matrix::from_row(&[1.0, 0.0]);
        assert_eq!(score(&a, &b, Similarity::Dot, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn score_cosine_is_scale_invariant() {
        let a = Matrix::from_row(&[2.0, 0.0]);
        let b = Matrix::from_row(&[4.0, 0.0]);
        let s = score(&a, &b, Similarity::Cosine, 1.0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_scales_cosine_logits() {
        let mut rng = Rng::new(50);
        let a = Matrix::uniform(1, 4, -1.0, 1.0, &mut rng);
        let b = Matrix::uniform(1, 4, -1.0, 1.0, &mut rng);
        let s1 = score(&a, &b, Similarity::Cosine, 1.0).unwrap();
        let s50 = score(&a, &b, Similarity::Cosine, 0.02).unwrap();
        assert!((s50 - 50.0 * s1).abs() < 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let a = Matrix::from_row(&[0.0, 0.0]);
        let b = Matrix::from_row(&[1.0, 0.0]);
        assert!(matches!(
            score(&a, &b, Similarity::Cosine, 1.0),
            Err(KprError::Numeric(_))
        ));
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        use crate::tensor::grad_check;
        let mut rng = Rng::new(51);
        for similarity in [Similarity::Dot, Similarity::Cosine] {
            for temperature in [1.0, 0.02] {
                let q = Matrix::uniform(1, 5, 0.2, 1.0, &mut rng);
                let p = Matrix::uniform(1, 5, 0.2, 1.0, &mut rng);
                let (dq, dp) = score_backward(&q, &p, similarity, temperature, 1.0).unwrap();
                let eq = grad_check(
                    |x| score(x, &p, similarity, temperature),
                    &q,
                    &dq,
                    1e-6,
                )
                .unwrap();
                let ep = grad_check(
                    |x| score(&q, x, similarity, temperature),
                    &p,
                    &dp,
                    1e-6,
                )
                .unwrap();
                assert!(eq <= 1e-6 && ep <= 1e-6, "{similarity:?} {temperature}");
            }
        }
    }

    #[test]
    fn embed_text_backward_matches_finite_differences() {
        use crate::tensor::grad_check;
        let m = model(false);
        let t = table(8);
        let d = dict();
        let text = "who made orvia plant";
        let mut rng = Rng::new(52);
        let upstream = Matrix::uniform(1, 8, -1.0, 1.0, &mut rng);
        let (_, cache) = embed_text_with_cache(
            &m,
            &d,
            &t,
            text,
            Role::Query,
            Mode::Eval,
            &mut Rng::new(0),
        )
        .unwrap();
        let mut grads = m.params.zeros_like();
        embed_text_backward(&m, &cache, &upstream, &mut grads).unwrap();
        let grad_mats: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
        let names: Vec<String> = m
            .params
            .named_tensors()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for (idx, name) in names.iter().enumerate() {
            let point = m.params.tensors()[idx].clone();
            let err = grad_check(
                |candidate: &Matrix| {
                    let mut probe = m.clone();
                    *probe.params.tensors_mut()[idx] = candidate.clone();
                    let z = embed_text(
                        &probe,
                        &d,
                        &t,
                        text,
                        Role::Query,
                        Mode::Eval,
                        &mut Rng::new(0),
                    )?;
                    z.hadamard(&upstream).map(|x| x.data().iter().sum())
                },
                &point,
                &grad_mats[idx],
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{name}: gradient error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_f32_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("model.kpre");
        let m = model(false);
        let mut extra = BTreeMap::new();
        extra.insert("seed".to_string(), "77".to_string());
        save_checkpoint(&m, &base, &extra).unwrap();
        let (loaded, cfg) = load_checkpoint(&base).unwrap();
        assert_eq!(cfg.get("seed").map(String::as_str), Some("77"));
        assert_eq!(loaded.config.encoder.hidden, 8);
        assert_eq!(loaded.config.baseline, false);
        for (a, b) in m.params.tensors().iter().zip(loaded.params.tensors()) {
            assert_eq!(a.rows(), b.rows());
            for (x, y) in a.data().iter().zip(b.data().iter()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
        // embedding with the reloaded model works
        let t = table(8);
        let d = dict();
        let z = embed_text(
            &loaded,
            &d,
            &t,
            "who made orvia",
            Role::Query,
            Mode::Eval,
            &mut Rng::new(0),
        )
        .unwrap();
        assert!(z.is_finite());
    }
}
