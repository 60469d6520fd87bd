//! Dictionary-based entity linker.
//!
//! The dictionary is built from hyperlink anchors in a corpus: a name's link
//! probability is the fraction of its corpus occurrences (as a token n-gram)
//! that appear as anchors, and a candidate's commonness is the fraction of
//! the name's anchors targeting that entity. Names below the link-probability
//! threshold are dropped before commonness is evaluated, then candidates
//! below the commonness threshold are dropped; a name that loses all of its
//! candidates disappears. Matching is case-insensitive over all token
//! n-grams via a token-level trie, and every candidate of a matched name is
//! reported so no referent is lost to early disambiguation.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::entity::EntityVocabulary;
use crate::error::{KprError, Result};
use crate::tokenizer::{word_tokens, TokenSequence};

/// A hyperlink anchor inside a document, char offsets end-exclusive.
#[derive(Clone, Debug)]
pub struct Anchor {
    pub start: usize,
    pub end: usize,
    pub entity: usize,
}

#[derive(Clone, Debug)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
    pub anchors: Vec<Anchor>,
}

/// A corpus of hyperlink-annotated documents; doubles as the passage
/// collection for retrieval.
#[derive(Clone, Debug)]
pub struct HyperlinkCorpus {
    documents: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl HyperlinkCorpus {
    pub fn new(documents: Vec<Document>) -> Result<HyperlinkCorpus> {
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(KprError::Corpus(format!("duplicate document id {}", doc.id)));
            }
            let chars = doc.text.chars().count();
            let mut sorted: Vec<&Anchor> = doc.anchors.iter().collect();
            sorted.sort_by_key(|a| (a.start, a.end));
            let mut prev_end = 0usize;
            for a in sorted {
                if a.end <= a.start || a.end > chars {
                    return Err(KprError::Corpus(format!(
                        "document {}: anchor span ({}, {}) outside text of {chars} chars",
                        doc.id, a.start, a.end
                    )));
                }
                if a.start < prev_end {
                    return Err(KprError::Corpus(format!(
                        "document {}: overlapping anchors at char {}",
                        doc.id, a.start
                    )));
                }
                prev_end = a.end;
            }
        }
        Ok(HyperlinkCorpus { documents, by_id })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.documents[i])
    }
}

/// JSON-lines row: one document per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DocumentRow {
    pub id: String,
    pub title: String,
    pub text: String,
    pub anchors: Vec<AnchorRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchorRow {
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

/// Resolves anchor target names to dense ids (sorted order) and validates
/// spans. Returns the corpus together with the derived entity vocabulary.
pub fn corpus_from_rows(rows: Vec<DocumentRow>) -> Result<(HyperlinkCorpus, EntityVocabulary)> {
    let mut names: Vec<String> = rows
        .iter()
        .flat_map(|r| r.anchors.iter().map(|a| a.entity.clone()))
        .collect();
    names.sort();
    names.dedup();
    let vocab = EntityVocabulary::from_names(names)?;
    let documents = rows
        .into_iter()
        .map(|r| Document {
            anchors: r
                .anchors
                .iter()
                .map(|a| Anchor {
                    start: a.start,
                    end: a.end,
                    entity: vocab.id_of(&a.entity).expect("name from same rows"),
                })
                .collect(),
            id: r.id,
            title: r.title,
            text: r.text,
        })
        .collect();
    Ok((HyperlinkCorpus::new(documents)?, vocab))
}

pub fn load_corpus_jsonl(path: &Path) -> Result<(HyperlinkCorpus, EntityVocabulary)> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DocumentRow = serde_json::from_str(&line).map_err(|e| {
            KprError::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        rows.push(row);
    }
    corpus_from_rows(rows)
}

pub fn save_corpus_jsonl(path: &Path, rows: &[DocumentRow]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| KprError::Format(format!("corpus row: {e}")))?;
        writeln!(buf, "{line}")?;
    }
    write_atomic(path, &buf)
}

/// One possible referent of a dictionary name.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub entity: usize,
    pub commonness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictEntry {
    pub link_probability: f64,
    /// Descending commonness, ties by ascending entity id.
    pub candidates: Vec<Candidate>,
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<String, usize>,
    terminal: Option<String>,
}

#[derive(Clone, Debug)]
struct Trie {
    nodes: Vec<TrieNode>,
}

impl Trie {
    fn build<'a>(names: impl Iterator<Item = &'a str>) -> Trie {
        let mut trie = Trie {
            nodes: vec![TrieNode::default()],
        };
        for name in names {
            let mut node = 0usize;
            for token in name.split(' ') {
                node = match trie.nodes[node].children.get(token) {
                    Some(&next) => next,
                    None => {
                        let next = trie.nodes.len();
                        trie.nodes.push(TrieNode::default());
                        trie.nodes[node].children.insert(token.to_string(), next);
                        next
                    }
                };
            }
            trie.nodes[node].terminal = Some(name.to_string());
        }
        trie
    }

    fn root(&self) -> usize {
        0
    }

    fn step(&self, node: usize, token: &str) -> Option<usize> {
        self.nodes[node].children.get(token).copied()
    }

    fn terminal(&self, node: usize) -> Option<&str> {
        self.nodes[node].terminal.as_deref()
    }
}

/// The anchor dictionary: filtered name statistics plus a token trie for
/// n-gram matching. Immutable after construction.
#[derive(Clone, Debug)]
pub struct AnchorDictionary {
    entries: BTreeMap<String, DictEntry>,
    entity_names: Vec<String>,
    lp_threshold: f64,
    commonness_threshold: f64,
    max_name_tokens: usize,
    trie: Trie,
}

impl AnchorDictionary {
    pub fn from_entries(
        entries: BTreeMap<String, DictEntry>,
        entity_names: Vec<String>,
        lp_threshold: f64,
        commonness_threshold: f64,
    ) -> AnchorDictionary {
        let max_name_tokens = entries
            .keys()
            .map(|n| n.split(' ').count())
            .max()
            .unwrap_or(0);
        let trie = Trie::build(entries.keys().map(String::as_str));
        AnchorDictionary {
            entries,
            entity_names,
            lp_threshold,
            commonness_threshold,
            max_name_tokens,
            trie,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&DictEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entity_name(&self, id: usize) -> Option<&str> {
        self.entity_names.get(id).map(String::as_str)
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn max_name_tokens(&self) -> usize {
        self.max_name_tokens
    }

    pub fn thresholds(&self) -> (f64, f64) {
        (self.lp_threshold, self.commonness_threshold)
    }

    /// TSV rows: name, link_probability, entity_id, commonness; sorted by
    /// name then candidate order. Deterministic bytes.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("name\tlink_probability\tentity_id\tcommonness\n");
        for (name, entry) in &self.entries {
            for c in &entry.candidates {
                out.push_str(&format!(
                    "{name}\t{}\t{}\t{}\n",
                    entry.link_probability, c.entity, c.commonness
                ));
            }
        }
        out
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn save_bin(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"KPRD");
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&self.lp_threshold.to_le_bytes());
        buf.extend_from_slice(&self.commonness_threshold.to_le_bytes());
        let write_str = |buf: &mut Vec<u8>, s: &str| {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        };
        buf.extend_from_slice(&(self.entity_names.len() as u64).to_le_bytes());
        for n in &self.entity_names {
            write_str(&mut buf, n);
        }
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, entry) in &self.entries {
            write_str(&mut buf, name);
            buf.extend_from_slice(&entry.link_probability.to_le_bytes());
            buf.extend_from_slice(&(entry.candidates.len() as u32).to_le_bytes());
            for c in &entry.candidates {
                buf.extend_from_slice(&(c.entity as u64).to_le_bytes());
                buf.extend_from_slice(&c.commonness.to_le_bytes());
            }
        }
        write_atomic(path, &buf)
    }

    pub fn load_bin(path: &Path) -> Result<AnchorDictionary> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(KprError::Format(format!(
                    "{}: dictionary truncated",
                    path.display()
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"KPRD" {
            return Err(KprError::Format(format!(
                "{}: bad dictionary magic",
                path.display()
            )));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != 1 {
            return Err(KprError::Format(format!(
                "{}: unsupported dictionary version {version}",
                path.display()
            )));
        }
        let lp_threshold = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let commonness_threshold = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let read_str = |pos: &mut usize| -> Result<String> {
            let len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
            let s = take(pos, len)?;
            String::from_utf8(s.to_vec())
                .map_err(|_| KprError::Format(format!("{}: invalid utf-8", path.display())))
        };
        let name_count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut entity_names = Vec::with_capacity(name_count as usize);
        for _ in 0..name_count {
            entity_names.push(read_str(&mut pos)?);
        }
        let entry_count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let mut entries = BTreeMap::new();
        for _ in 0..entry_count {
            let name = read_str(&mut pos)?;
            let link_probability = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let cand_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            let mut candidates = Vec::with_capacity(cand_count as usize);
            for _ in 0..cand_count {
                let entity = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
                let commonness = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                candidates.push(Candidate { entity, commonness });
            }
            entries.insert(
                name,
                DictEntry {
                    link_probability,
                    candidates,
                },
            );
        }
        if pos != bytes.len() {
            return Err(KprError::Format(format!(
                "{}: trailing bytes",
                path.display()
            )));
        }
        Ok(AnchorDictionary::from_entries(
            entries,
            entity_names,
            lp_threshold,
            commonness_threshold,
        ))
    }
}

/// Maps an anchor char span onto the document's word tokens. The span must
/// start and end exactly on token boundaries.
fn anchor_token_range(
    words: &[(String, (usize, usize))],
    anchor: &Anchor,
) -> Option<(usize, usize)> {
    let mut first = None;
    let mut last = None;
    for (i, (_, span)) in words.iter().enumerate() {
        if span.0 == anchor.start {
            first = Some(i);
        }
        if span.1 == anchor.end {
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(f), Some(l)) if f <= l => Some((f, l)),
        _ => None,
    }
}

/// Builds the dictionary from a hyperlink corpus.
///
/// Link probability = anchored occurrences / all token n-gram occurrences of
/// the name in the corpus text (anchored ones included). The lp filter runs
/// first and removes whole names; commonness is evaluated only for survivors.
pub fn build_dictionary(
    corpus: &HyperlinkCorpus,
    vocab: &EntityVocabulary,
    lp_threshold: f64,
    commonness_threshold: f64,
) -> Result<AnchorDictionary> {
    if corpus.is_empty() {
        return Err(KprError::Corpus("empty corpus".into()));
    }
    // pass 1: anchor statistics per normalized name
    let mut anchor_counts: BTreeMap<String, BTreeMap<usize, u64>> = BTreeMap::new();
    let mut tokenized_docs: Vec<Vec<(String, (usize, usize))>> =
        Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        let words = word_tokens(&doc.text);
        for anchor in &doc.anchors {
            let (first, last) = anchor_token_range(&words, anchor).ok_or_else(|| {
                KprError::Corpus(format!(
                    "document {}: anchor span ({}, {}) crosses token boundaries",
                    doc.id, anchor.start, anchor.end
                ))
            })?;
            let name = words[first..=last]
                .iter()
                .map(|(w, _)| w.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            *anchor_counts
                .entry(name)
                .or_default()
                .entry(anchor.entity)
                .or_insert(0) += 1;
        }
        tokenized_docs.push(words);
    }
    // pass 2: occurrence counts for every anchored name
    let probe = Trie::build(anchor_counts.keys().map(String::as_str));
    let max_tokens = anchor_counts
        .keys()
        .map(|n| n.split(' ').count())
        .max()
        .unwrap_or(0);
    let mut occurrences: BTreeMap<&str, u64> = BTreeMap::new();
    for words in &tokenized_docs {
        for start in 0..words.len() {
            let mut node = probe.root();
            for (offset, (word, _)) in words[start..].iter().enumerate() {
                if offset >= max_tokens {
                    break;
                }
                match probe.step(node, word) {
                    Some(next) => {
                        node = next;
                        if let Some(name) = probe.terminal(node) {
                            *occurrences.entry(name).or_insert(0) += 1;
                        }
                    }
                    None => break,
                }
            }
        }
    }
    // filters: link probability first, then commonness
    let mut entries = BTreeMap::new();
    for (name, per_entity) in &anchor_counts {
        let anchored: u64 = per_entity.values().sum();
        let occurred = *occurrences.get(name.as_str()).unwrap_or(&0);
        debug_assert!(occurred >= anchored, "aligned anchors always occur");
        let link_probability = anchored as f64 / occurred as f64;
        if link_probability < lp_threshold {
            continue;
        }
        let mut candidates: Vec<Candidate> = per_entity
            .iter()
            .map(|(&entity, &count)| Candidate {
                entity,
                commonness: count as f64 / anchored as f64,
            })
            .filter(|c| c.commonness >= commonness_threshold)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        candidates.sort_by(|a, b| {
            b.commonness
                .partial_cmp(&a.commonness)
                .expect("commonness is finite")
                .then(a.entity.cmp(&b.entity))
        });
        entries.insert(
            name.clone(),
            DictEntry {
                link_probability,
                candidates,
            },
        );
    }
    Ok(AnchorDictionary::from_entries(
        entries,
        vocab.names().to_vec(),
        lp_threshold,
        commonness_threshold,
    ))
}

/// A detected entity mention: a token n-gram matching a dictionary name,
/// carrying every surviving candidate of that name.
#[derive(Clone, Debug)]
pub struct Mention {
    /// Token positions (start, end), end-exclusive.
    pub token_span: (usize, usize),
    /// Char offsets into the source text.
    pub char_span: (usize, usize),
    pub surface: String,
    pub candidates: Vec<Candidate>,
}

/// Matches all token n-grams (special tokens excluded) against the
/// dictionary. Overlapping and nested mentions are all kept; output ordered
/// by (start, end).
pub fn link(tokens: &TokenSequence, dict: &AnchorDictionary, max_ngram: usize) -> Vec<Mention> {
    let mut out = Vec::new();
    let surfaces: Vec<Option<String>> = (0..tokens.len()).map(|i| tokens.surface(i)).collect();
    for start in 0..tokens.len() {
        if surfaces[start].is_none() {
            continue;
        }
        let mut node = dict.trie.root();
        for end in start..tokens.len() {
            if end - start >= max_ngram {
                break;
            }
            let Some(surface) = &surfaces[end] else {
                break;
            };
            match dict.trie.step(node, surface) {
                Some(next) => {
                    node = next;
                    if let Some(name) = dict.trie.terminal(node) {
                        let entry = dict.entry(name).expect("terminal names are entries");
                        let char_span = (tokens.spans[start].0, tokens.spans[end].1);
                        out.push(Mention {
                            token_span: (start, end + 1),
                            char_span,
                            surface: name.to_string(),
                            candidates: entry.candidates.clone(),
                        });
                    }
                }
                None => break,
            }
        }
    }
    out.sort_by_key(|m| m.token_span);
    out
}

/// Anchor counts per entity across the corpus.
pub fn entity_frequency(corpus: &HyperlinkCorpus) -> BTreeMap<usize, u64> {
    let mut freq = BTreeMap::new();
    for doc in corpus.documents() {
        for anchor in &doc.anchors {
            match freq.entry(anchor.entity) {
                Entry::Vacant(e) => {
                    e.insert(1);
                }
                Entry::Occupied(mut e) => *e.get_mut() += 1,
            }
        }
    }
    freq
}
