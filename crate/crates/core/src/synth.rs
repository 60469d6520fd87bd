//! Synthetic corpus generation.
//!
//! Builds a miniature hyperlink-annotated corpus with a Zipf-like entity
//! frequency profile and ambiguous aliases, plus matching training and
//! evaluation sets. Each entity gets an article passage mentioning its
//! canonical name (anchored); aliased entity pairs share a surface form so
//! the dictionary keeps multiple candidates; extra mention documents raise
//! frequent entities' anchor counts. The rarest entities are held out of the
//! training split entirely, so their queries probe generalization to
//! entities the model never saw.
//!
//! Everything is ASCII and driven by one seed, so generated files are
//! byte-identical across runs.

use std::collections::HashSet;

use crate::error::{KprError, Result};
use crate::eval::EvalRow;
use crate::linker::{AnchorRow, DocumentRow};
use crate::rng::Rng;
use crate::training::TrainRow;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub entities: usize,
    /// Number of alias pairs: entities 2j and 2j+1 share alias j.
    pub alias_groups: usize,
    pub passages_per_entity: usize,
    /// Zipf numerator: target frequency of rank r is mass / (r+1)^exponent.
    pub zipf_mass: f64,
    pub zipf_exponent: f64,
    /// How many of the rarest entities are excluded from training.
    pub heldout: usize,
    pub queries_per_entity: usize,
    /// Probability that a training query uses the shared alias instead of
    /// the canonical name (aliased entities only).
    pub alias_query_fraction: f64,
    /// Anchored mentions per generated mention document.
    pub mentions_per_doc: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 200,
            alias_groups: 50,
            passages_per_entity: 1,
            zipf_mass: 200.0,
            zipf_exponent: 1.0,
            heldout: 50,
            queries_per_entity: 2,
            alias_query_fraction: 0.25,
            mentions_per_doc: 5,
            seed: 11,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities == 0 || self.passages_per_entity == 0 || self.queries_per_entity == 0 {
            return Err(KprError::Parameter(
                "synth: entities, passages_per_entity, queries_per_entity must be positive"
                    .into(),
            ));
        }
        if self.heldout >= self.entities {
            return Err(KprError::Parameter(format!(
                "synth: heldout {} must leave at least one training entity of {}",
                self.heldout, self.entities
            )));
        }
        if 2 * self.alias_groups > self.entities - self.heldout {
            return Err(KprError::Parameter(format!(
                "synth: {} alias pairs need {} non-heldout entities, only {} available",
                self.alias_groups,
                2 * self.alias_groups,
                self.entities - self.heldout
            )));
        }
        if self.mentions_per_doc == 0 {
            return Err(KprError::Parameter("synth: mentions_per_doc must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alias_query_fraction) {
            return Err(KprError::Parameter(
                "synth: alias_query_fraction outside [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub corpus: Vec<DocumentRow>,
    pub train: Vec<TrainRow>,
    pub eval: Vec<EvalRow>,
}

const CONSONANTS: [char; 14] = [
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

const TRAIN_TEMPLATES: [(&str, &str); 4] = [
    ("who founded ", ""),
    ("where is ", " located"),
    ("when was ", " created"),
    ("what does ", " make"),
];

/// Words used by templates and article scaffolding; generated names must not
/// collide with them.
const RESERVED: [&str; 26] = [
    "who", "founded", "where", "is", "located", "when", "was", "created", "what", "does",
    "make", "a", "venture", "from", "it", "known", "for", "people", "also", "call", "the",
    "record", "mentions", "survey", "cites", "near",
];

struct WordGen {
    used: HashSet<String>,
}

impl WordGen {
    fn new() -> WordGen {
        let used = RESERVED.iter().map(|s| s.to_string()).collect();
        WordGen { used }
    }

    fn fresh(&mut self, rng: &mut Rng, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.below(CONSONANTS.len())]);
                w.push(VOWELS[rng.below(VOWELS.len())]);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

/// Appends words to a text while tracking char offsets and anchors.
struct TextBuilder {
    text: String,
    anchors: Vec<AnchorRow>,
}

impl TextBuilder {
    fn new() -> TextBuilder {
        TextBuilder {
            text: String::new(),
            anchors: Vec::new(),
        }
    }

    fn push(&mut self, words: &str) {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        self.text.push_str(words);
    }

    fn push_anchor(&mut self, surface: &str, entity: &str) {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        debug_assert!(surface.is_ascii());
        let start = self.text.len();
        self.text.push_str(surface);
        self.anchors.push(AnchorRow {
            start,
            end: start + surface.len(),
            entity: entity.to_string(),
        });
    }
}

struct EntitySpec {
    name: String,
    alias: Option<String>,
    frequency: u64,
    article_ids: Vec<String>,
    heldout: bool,
}

/// Generates corpus, training set, and evaluation set.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let mut gen = WordGen::new();

    // shared filler pools keep article vocabulary small and in-vocabulary
    let categories: Vec<String> = (0..12).map(|_| gen.fresh(&mut rng, 3)).collect();
    let regions: Vec<String> = (0..12).map(|_| gen.fresh(&mut rng, 3)).collect();
    let qualities: Vec<String> = (0..12).map(|_| gen.fresh(&mut rng, 2)).collect();
    let objects: Vec<String> = (0..12).map(|_| gen.fresh(&mut rng, 3)).collect();

    // entity specs: rank = index, rarest last
    let mut specs: Vec<EntitySpec> = Vec::with_capacity(config.entities);
    for rank in 0..config.entities {
        let two_words = rng.next_f64() < 0.3;
        let name = if two_words {
            format!("{} {}", gen.fresh(&mut rng, 2), gen.fresh(&mut rng, 2))
        } else {
            gen.fresh(&mut rng, 3)
        };
        let heldout = rank >= config.entities - config.heldout;
        let target =
            (config.zipf_mass / ((rank + 1) as f64).powf(config.zipf_exponent)).floor() as u64;
        specs.push(EntitySpec {
            name,
            alias: None,
            frequency: target.max(1),
            article_ids: Vec::new(),
            heldout,
        });
    }
    for j in 0..config.alias_groups {
        let alias = gen.fresh(&mut rng, 3);
        specs[2 * j].alias = Some(alias.clone());
        specs[2 * j + 1].alias = Some(alias);
    }

    // articles
    let mut corpus: Vec<DocumentRow> = Vec::new();
    for (i, spec) in specs.iter_mut().enumerate() {
        for p in 0..config.passages_per_entity {
            let id = format!("a{i:04}p{p}");
            let mut b = TextBuilder::new();
            b.push_anchor(&spec.name, &spec.name);
            b.push(&format!(
                "is a {} venture from {} .",
                categories[rng.below(categories.len())],
                regions[rng.below(regions.len())]
            ));
            b.push(&format!(
                "it is known for {} {} .",
                qualities[rng.below(qualities.len())],
                objects[rng.below(objects.len())]
            ));
            if let Some(alias) = &spec.alias {
                b.push("people also call it");
                b.push_anchor(alias, &spec.name);
                b.push(".");
            }
            corpus.push(DocumentRow {
                id: id.clone(),
                title: spec.name.clone(),
                text: b.text,
                anchors: b.anchors,
            });
            spec.article_ids.push(id);
        }
    }

    // mention documents to reach the target frequencies
    let mut pending: Vec<usize> = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let own = (config.passages_per_entity * (1 + spec.alias.is_some() as usize)) as u64;
        let extra = spec.frequency.saturating_sub(own);
        for _ in 0..extra {
            pending.push(i);
        }
    }
    rng.shuffle(&mut pending);
    for (doc_index, chunk) in pending.chunks(config.mentions_per_doc).enumerate() {
        let mut b = TextBuilder::new();
        for &entity in chunk {
            b.push("the record mentions");
            b.push_anchor(&specs[entity].name, &specs[entity].name);
            b.push(&format!("near {} .", regions[rng.below(regions.len())]));
        }
        corpus.push(DocumentRow {
            id: format!("m{doc_index:04}"),
            title: format!("record {doc_index}"),
            text: b.text,
            anchors: b.anchors,
        });
    }

    // actual anchor counts define the reported frequencies
    let mut actual = vec![0u64; config.entities];
    let mut name_to_index: std::collections::HashMap<&str, usize> = Default::default();
    for (i, spec) in specs.iter().enumerate() {
        name_to_index.insert(spec.name.as_str(), i);
    }
    for doc in &corpus {
        for a in &doc.anchors {
            actual[name_to_index[a.entity.as_str()]] += 1;
        }
    }

    // training instances over non-heldout entities
    let mut train: Vec<TrainRow> = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        if spec.heldout {
            continue;
        }
        for q in 0..config.queries_per_entity {
            let use_alias = spec.alias.is_some() && rng.next_f64() < config.alias_query_fraction;
            let mention = match (&spec.alias, use_alias) {
                (Some(alias), true) => alias.clone(),
                _ => spec.name.clone(),
            };
            let (prefix, suffix) = TRAIN_TEMPLATES[(i + q) % TRAIN_TEMPLATES.len()];
            let positive = spec.article_ids[q % spec.article_ids.len()].clone();
            // hard negative: an article of a different entity
            let negative = loop {
                let other = rng.below(config.entities);
                if other != i {
                    let other_articles = &specs[other].article_ids;
                    break other_articles[rng.below(other_articles.len())].clone();
                }
            };
            train.push(TrainRow {
                question: format!("{prefix}{mention}{suffix}"),
                positive_ids: vec![positive],
                hard_negative_ids: vec![negative],
            });
        }
    }

    // evaluation: every held-out entity plus a sample of training entities.
    // The template is offset past the ones used for this entity's training
    // queries, so the exact (question, entity) pair is unseen; the held-out
    // entities are unseen entirely.
    let mut eval: Vec<EvalRow> = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let include = spec.heldout || i % 3 == 0;
        if !include {
            continue;
        }
        let (prefix, suffix) =
            TRAIN_TEMPLATES[(i + config.queries_per_entity) % TRAIN_TEMPLATES.len()];
        eval.push(EvalRow {
            question: format!("{prefix}{}{suffix}", spec.name),
            gold_ids: spec.article_ids.clone(),
            entity_frequency: Some(actual[i]),
        });
    }

    Ok(SynthOutput { corpus, train, eval })
}
