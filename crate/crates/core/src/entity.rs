//! Frozen, updatable entity knowledge store.
//!
//! Entity embeddings live in a sparse id -> vector table that the trainer
//! never touches; entries can be added or replaced at any time, which is what
//! lets retrieval pick up new entities without retraining. Vectors are
//! computed by masked encoder inference over passages that mention the entity
//! and rescaled to the mean norm of the encoder's input token embeddings.
//! On disk the table is stored as 32-bit floats in the shared container
//! format; in memory all math is 64-bit.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::container::{self, Container};
use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::{KprError, Result};
use crate::rng::Rng;
use crate::tensor::{Fnv64, Matrix, Mode};
use crate::tokenizer::{mask_span, tokenize};

/// Dense id <-> canonical name mapping for the entity set.
#[derive(Clone, Debug)]
pub struct EntityVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl EntityVocabulary {
    /// Builds from unique names; ids are assigned by position.
    pub fn from_names(names: Vec<String>) -> Result<EntityVocabulary> {
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(KprError::Input(format!("duplicate entity name {n:?}")));
            }
        }
        Ok(EntityVocabulary { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Sparse entity id -> D-vector table.
///
/// The `frozen` flag documents the training contract: optimizer steps must
/// never touch entries. External updates through [`EntityEmbeddingTable::upsert`]
/// remain allowed even when frozen; that is the point of the design.
#[derive(Clone, Debug)]
pub struct EntityEmbeddingTable {
    dim: usize,
    reference_norm: f64,
    frozen: bool,
    entries: BTreeMap<u64, Vec<f64>>,
}

impl EntityEmbeddingTable {
    pub fn new(dim: usize, reference_norm: f64) -> Result<EntityEmbeddingTable> {
        if dim == 0 {
            return Err(KprError::Parameter("entity table: dim must be >= 1".into()));
        }
        Ok(EntityEmbeddingTable {
            dim,
            reference_norm,
            frozen: false,
            entries: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reference_norm(&self) -> f64 {
        self.reference_norm
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// A miss is a detectable `None`, never a default vector.
    pub fn lookup(&self, entity: usize) -> Option<&[f64]> {
        self.entries.get(&(entity as u64)).map(Vec::as_slice)
    }

    /// Inserts or replaces an entry. Allowed even when frozen: freezing
    /// constrains the trainer, not external knowledge updates.
    pub fn upsert(&mut self, entity: usize, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(KprError::Shape(format!(
                "upsert entity {entity}: vector length {} != dim {}",
                vector.len(),
                self.dim
            )));
        }
        for v in &vector {
            if !v.is_finite() {
                return Err(KprError::Numeric(format!(
                    "upsert entity {entity}: non-finite component"
                )));
            }
        }
        self.entries.insert(entity as u64, vector);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries.iter().map(|(k, v)| (*k as usize, v.as_slice()))
    }

    /// Rescales every vector to L2 norm `reference_norm`. Idempotent.
    pub fn normalize(mut self, reference_norm: f64) -> Result<EntityEmbeddingTable> {
        if reference_norm <= 0.0 {
            return Err(KprError::Parameter(format!(
                "normalize: reference norm {reference_norm} must be positive"
            )));
        }
        if self.entries.is_empty() {
            return Err(KprError::Input("normalize: empty table".into()));
        }
        for (id, v) in self.entries.iter_mut() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(KprError::Normalization(format!(
                    "entity {id} has a zero vector"
                )));
            }
            let s = reference_norm / norm;
            for x in v.iter_mut() {
                *x *= s;
            }
        }
        self.reference_norm = reference_norm;
        Ok(self)
    }

    /// Bitwise checksum over ids and vector bits; detects any mutation.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.dim as u64);
        for (id, v) in &self.entries {
            h.write_u64(*id);
            for &x in v {
                h.write_f64(x);
            }
        }
        h.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self
            .entries
            .iter()
            .map(|(id, v)| (*id, v.clone()))
            .collect();
        container::write(
            path,
            &Container {
                dim: self.dim as u32,
                reference_norm: self.reference_norm,
                entries,
            },
        )
    }

    pub fn load(path: &Path) -> Result<EntityEmbeddingTable> {
        let c = container::read(path)?;
        let mut table = EntityEmbeddingTable::new(c.dim as usize, c.reference_norm)?;
        for (id, v) in c.entries {
            table.entries.insert(id, v);
        }
        Ok(table)
    }
}

/// Mean of masked-position encoder outputs over passages mentioning the
/// entity. Passages are (text, mention char span); at most `cap` of them are
/// sampled uniformly without replacement.
pub fn embed_entity(
    entity: usize,
    passages: &[(String, (usize, usize))],
    params: &EncoderParams,
    config: &EncoderConfig,
    layer_index: usize,
    cap: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if passages.is_empty() {
        return Err(KprError::Coverage(format!(
            "entity {entity} has no passages to embed from"
        )));
    }
    if layer_index > config.layers {
        return Err(KprError::Parameter(format!(
            "layer index {layer_index} exceeds layer count {}",
            config.layers
        )));
    }
    if cap == 0 {
        return Err(KprError::Parameter("embed_entity: cap must be >= 1".into()));
    }
    let selected: Vec<usize> = if passages.len() <= cap {
        (0..passages.len()).collect()
    } else {
        rng.sample_indices(passages.len(), cap)
    };
    let d = config.hidden;
    let mut acc = vec![0.0; d];
    for &i in &selected {
        let (text, span) = &passages[i];
        let tokens = tokenize(text, &config.vocab, config.max_tokens)?;
        let (masked, pos) = mask_span(&tokens, *span, &config.vocab)?;
        let out = encode(params, config, &masked, Mode::Eval, rng)?;
        let state = &out.states[layer_index];
        for c in 0..d {
            acc[c] += state.get(pos, c);
        }
    }
    let n = selected.len() as f64;
    for v in &mut acc {
        *v /= n;
    }
    Ok(acc)
}

/// Builds the full table by masked inference over a hyperlink corpus.
///
/// Every anchor to an entity contributes one (text, span) sample; samples
/// whose mention does not survive tokenization or truncation are dropped.
/// Entities left with no usable samples are skipped and counted, never given
/// a default vector. The finished table is rescaled to the encoder's
/// reference norm.
pub fn build_table(
    corpus: &crate::linker::HyperlinkCorpus,
    vocab: &EntityVocabulary,
    params: &EncoderParams,
    config: &EncoderConfig,
    layer_index: usize,
    cap: usize,
    rng: &mut Rng,
) -> Result<(EntityEmbeddingTable, usize)> {
    if vocab.is_empty() {
        return Err(KprError::Input("build_table: empty entity vocabulary".into()));
    }
    let mut samples: Vec<Vec<(String, (usize, usize))>> = vec![Vec::new(); vocab.len()];
    for doc in corpus.documents() {
        for anchor in &doc.anchors {
            let span = (anchor.start, anchor.end);
            let usable = tokenize(&doc.text, &config.vocab, config.max_tokens)
                .and_then(|tokens| mask_span(&tokens, span, &config.vocab))
                .is_ok();
            if usable {
                samples[anchor.entity].push((doc.text.clone(), span));
            }
        }
    }
    let reference = params.reference_norm();
    let mut table = EntityEmbeddingTable::new(config.hidden, reference)?;
    let mut skipped = 0usize;
    for (entity, passages) in samples.iter().enumerate() {
        if passages.is_empty() {
            skipped += 1;
            continue;
        }
        let v = embed_entity(entity, passages, params, config, layer_index, cap, rng)?;
        table.upsert(entity, v)?;
    }
    if table.is_empty() {
        return Err(KprError::Coverage(
            "build_table: no entity had usable passages".into(),
        ));
    }
    Ok((table.normalize(reference)?, skipped))
}

/// Fresh table with one uniform vector in [-scale, scale) per entity,
/// rescaled to the reference norm.
pub fn random_table(
    vocab: &EntityVocabulary,
    dim: usize,
    scale: f64,
    reference_norm: f64,
    rng: &mut Rng,
) -> Result<EntityEmbeddingTable> {
    if dim == 0 {
        return Err(KprError::Parameter("random_table: dim must be >= 1".into()));
    }
    if vocab.is_empty() {
        return Err(KprError::Input("random_table: empty entity vocabulary".into()));
    }
    let mut table = EntityEmbeddingTable::new(dim, reference_norm)?;
    for id in 0..vocab.len() {
        let row = Matrix::uniform(1, dim, -scale, scale, rng);
        table.upsert(id, row.data().to_vec())?;
    }
    table.normalize(reference_norm)
}
