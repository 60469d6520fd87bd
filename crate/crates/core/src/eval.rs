//! Retrieval evaluation: exact brute-force search, top-k accuracy, and
//! frequency-binned reporting.
//!
//! The index is a dense P x D matrix scored exhaustively; search keeps the
//! top k in a bounded heap with deterministic tie-breaking (score descending,
//! then passage id ascending). Accuracy is the fraction of queries with any
//! gold passage in the top k. For the rarity analysis, queries are grouped
//! into 10 log-spaced entity-frequency bins spanning 1 to 10,000.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{self, write_atomic, Container};
use crate::entity::EntityEmbeddingTable;
use crate::error::{KprError, Result};
use crate::linker::AnchorDictionary;
use crate::model::{embed_text, score, KprModel, Role, Similarity};
use crate::rng::Rng;
use crate::tensor::{Matrix, Mode};
use crate::tokenizer::format_passage;

/// Dense passage index; row i embeds passage ids[i].
#[derive(Clone, Debug)]
pub struct PassageIndex {
    pub ids: Vec<String>,
    pub embeddings: Matrix,
    pub similarity: Similarity,
    pub temperature: f64,
}

/// Encodes all passages (id, title, text) in the given order.
pub fn build_index(
    model: &KprModel,
    dict: &AnchorDictionary,
    table: &EntityEmbeddingTable,
    passages: &[(String, String, String)],
) -> Result<PassageIndex> {
    if passages.is_empty() {
        return Err(KprError::Input("build_index: no passages".into()));
    }
    let d = model.config.encoder.hidden;
    let mut embeddings = Matrix::zeros(passages.len(), d);
    let mut ids = Vec::with_capacity(passages.len());
    let mut rng = Rng::new(0);
    for (row, (id, title, text)) in passages.iter().enumerate() {
        let formatted = format_passage(title, text);
        let e = embed_text(
            model,
            dict,
            table,
            &formatted,
            Role::Passage,
            Mode::Eval,
            &mut rng,
        )?;
        for c in 0..d {
            embeddings.set(row, c, e.get(0, c));
        }
        ids.push(id.clone());
    }
    embeddings.ensure_finite("passage index")?;
    Ok(PassageIndex {
        ids,
        embeddings,
        similarity: model.config.similarity,
        temperature: model.config.temperature,
    })
}

/// Ranking key: higher score wins, ties go to the smaller passage id.
#[derive(Clone, Debug, PartialEq)]
struct RankKey {
    score: f64,
    id: String,
}

impl Eq for RankKey {}

impl Ord for RankKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for RankKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Exact top-k by score. Keeps a bounded min-heap of the best k seen so far;
/// a full sort over all passages serves as the test oracle.
pub fn search(index: &PassageIndex, query: &Matrix, k: usize) -> Result<Vec<(String, f64)>> {
    let p = index.ids.len();
    if k == 0 || k > p {
        return Err(KprError::Parameter(format!(
            "search: k = {k} outside 1..={p}"
        )));
    }
    let mut heap: BinaryHeap<std::cmp::Reverse<RankKey>> = BinaryHeap::with_capacity(k + 1);
    for row in 0..p {
        let e = index.embeddings.row_matrix(row);
        let s = score(query, &e, index.similarity, index.temperature)?;
        let key = RankKey {
            score: s,
            id: index.ids[row].clone(),
        };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(key));
        } else if key > heap.peek().expect("non-empty").0 {
            heap.pop();
            heap.push(std::cmp::Reverse(key));
        }
    }
    let mut out: Vec<RankKey> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    Ok(out.into_iter().map(|r| (r.id, r.score)).collect())
}

/// Fraction of queries whose top-k results contain any gold passage.
pub fn top_k_accuracy(
    results: &[Vec<(String, f64)>],
    golds: &[Vec<String>],
    k: usize,
) -> Result<f64> {
    if results.len() != golds.len() {
        return Err(KprError::Input(format!(
            "top_k_accuracy: {} result lists, {} gold lists",
            results.len(),
            golds.len()
        )));
    }
    if results.is_empty() {
        return Err(KprError::Input("top_k_accuracy: no queries".into()));
    }
    let mut hits = 0usize;
    for (ranked, gold) in results.iter().zip(golds.iter()) {
        if gold.is_empty() {
            return Err(KprError::Input(
                "top_k_accuracy: query without gold passages".into(),
            ));
        }
        if ranked
            .iter()
            .take(k)
            .any(|(id, _)| gold.iter().any(|g| g == id))
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

pub const FREQUENCY_BIN_COUNT: usize = 10;

/// Smallest integer frequency in each bin. Bin j spans
/// [10^(0.4 j), 10^(0.4 (j+1))); the last bin is right-inclusive at 10,000
/// and frequencies above are clamped into it. A unit test pins this table
/// against the floating-point edge computation.
const BIN_LOWER: [u64; FREQUENCY_BIN_COUNT] = [1, 3, 7, 16, 40, 100, 252, 631, 1585, 3982];

/// Floating-point bin edges 10^(0.4 j) for j = 0..=10.
pub fn bin_edges() -> [f64; FREQUENCY_BIN_COUNT + 1] {
    let mut edges = [0.0; FREQUENCY_BIN_COUNT + 1];
    for (j, e) in edges.iter_mut().enumerate() {
        *e = 10f64.powf(0.4 * j as f64);
    }
    edges
}

/// Bin index for an entity frequency; frequencies above 10,000 clamp into
/// the last bin, zero is rejected.
pub fn frequency_bin(freq: u64) -> Result<usize> {
    if freq == 0 {
        return Err(KprError::Input(
            "frequency_bin: frequency must be >= 1".into(),
        ));
    }
    for j in (0..FREQUENCY_BIN_COUNT).rev() {
        if freq >= BIN_LOWER[j] {
            return Ok(j);
        }
    }
    unreachable!("BIN_LOWER[0] is 1");
}

#[derive(Clone, Debug, Serialize)]
pub struct BinRow {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub accuracy: f64,
}

/// Per-bin top-k accuracy over queries with known entity frequencies.
/// Always returns all 10 bins; empty bins report count 0, accuracy 0.
pub fn binned_accuracy(
    results: &[Vec<(String, f64)>],
    golds: &[Vec<String>],
    frequencies: &[u64],
    k: usize,
) -> Result<Vec<BinRow>> {
    if results.len() != golds.len() || results.len() != frequencies.len() {
        return Err(KprError::Input(format!(
            "binned_accuracy: {} results, {} golds, {} frequencies",
            results.len(),
            golds.len(),
            frequencies.len()
        )));
    }
    let edges = bin_edges();
    let mut counts = [0usize; FREQUENCY_BIN_COUNT];
    let mut hits = [0usize; FREQUENCY_BIN_COUNT];
    for ((ranked, gold), &freq) in results.iter().zip(golds.iter()).zip(frequencies.iter()) {
        if gold.is_empty() {
            return Err(KprError::Input(
                "binned_accuracy: query without gold passages".into(),
            ));
        }
        let bin = frequency_bin(freq)?;
        counts[bin] += 1;
        if ranked
            .iter()
            .take(k)
            .any(|(id, _)| gold.iter().any(|g| g == id))
        {
            hits[bin] += 1;
        }
    }
    Ok((0..FREQUENCY_BIN_COUNT)
        .map(|j| BinRow {
            low: edges[j],
            high: edges[j + 1],
            count: counts[j],
            accuracy: if counts[j] == 0 {
                0.0
            } else {
                hits[j] as f64 / counts[j] as f64
            },
        })
        .collect())
}

/// JSON-lines row for evaluation sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub question: String,
    pub gold_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_frequency: Option<u64>,
}

pub fn load_eval_jsonl(path: &Path) -> Result<Vec<EvalRow>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EvalRow = serde_json::from_str(&line)
            .map_err(|e| KprError::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(row);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct QueryOutcome {
    pub question: String,
    /// 1-based rank of the first gold hit within the retrieved list.
    pub hit_rank: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub bin_k: usize,
    pub bins: Vec<BinRow>,
    /// Queries counted into `bins` (those with a known entity frequency).
    pub binned_queries: usize,
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    /// TSV rows bin_low, bin_high, n, accuracy; one row per bin.
    pub fn bins_tsv(&self) -> String {
        let mut out = String::from("bin_low\tbin_high\tn\taccuracy\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                b.low, b.high, b.count, b.accuracy
            ));
        }
        out
    }
}

/// Runs retrieval for every eval row and assembles the report. Binned
/// accuracy (at `ks[0]`) covers the rows carrying an entity frequency.
pub fn evaluate(
    model: &KprModel,
    dict: &AnchorDictionary,
    table: &EntityEmbeddingTable,
    index: &PassageIndex,
    rows: &[EvalRow],
    ks: &[usize],
) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(KprError::Input("evaluate: no queries".into()));
    }
    if ks.is_empty() {
        return Err(KprError::Parameter("evaluate: no k values".into()));
    }
    let k_max = *ks.iter().max().expect("non-empty");
    let k_max = k_max.min(index.ids.len());
    let mut results = Vec::with_capacity(rows.len());
    let mut golds = Vec::with_capacity(rows.len());
    let mut rng = Rng::new(0);
    for row in rows {
        let e = embed_text(
            model,
            dict,
            table,
            &row.question,
            Role::Query,
            Mode::Eval,
            &mut rng,
        )?;
        results.push(search(index, &e, k_max)?);
        golds.push(row.gold_ids.clone());
    }
    let mut accuracies = Vec::with_capacity(ks.len());
    for &k in ks {
        accuracies.push(top_k_accuracy(&results, &golds, k)?);
    }
    let mut binned_results = Vec::new();
    let mut binned_golds = Vec::new();
    let mut frequencies = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if let Some(f) = row.entity_frequency {
            binned_results.push(results[i].clone());
            binned_golds.push(golds[i].clone());
            frequencies.push(f);
        }
    }
    let bins = binned_accuracy(&binned_results, &binned_golds, &frequencies, ks[0])?;
    let per_query = rows
        .iter()
        .zip(results.iter())
        .map(|(row, ranked)| QueryOutcome {
            question: row.question.clone(),
            hit_rank: ranked
                .iter()
                .position(|(id, _)| row.gold_ids.iter().any(|g| g == id))
                .map(|p| p + 1),
        })
        .collect();
    Ok(EvalReport {
        ks: ks.to_vec(),
        accuracies,
        bin_k: ks[0],
        bins,
        binned_queries: frequencies.len(),
        per_query,
    })
}

fn index_paths(base: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let mut ids = base.as_os_str().to_os_string();
    ids.push(".ids");
    let mut cfg = base.as_os_str().to_os_string();
    cfg.push(".cfg");
    (base.to_path_buf(), PathBuf::from(ids), PathBuf::from(cfg))
}

pub fn save_index(index: &PassageIndex, base: &Path) -> Result<()> {
    let (tensor_path, ids_path, cfg_path) = index_paths(base);
    let entries = (0..index.ids.len())
        .map(|r| (r as u64, index.embeddings.row(r).to_vec()))
        .collect();
    container::write(
        &tensor_path,
        &Container {
            dim: index.embeddings.cols() as u32,
            reference_norm: 0.0,
            entries,
        },
    )?;
    let mut ids = Vec::new();
    for id in &index.ids {
        writeln!(ids, "{id}")?;
    }
    write_atomic(&ids_path, &ids)?;
    let cfg = format!(
        "similarity = {}\ntemperature = {}\n",
        match index.similarity {
            Similarity::Dot => "dot",
            Similarity::Cosine => "cosine",
        },
        index.temperature
    );
    write_atomic(&cfg_path, cfg.as_bytes())
}

pub fn load_index(base: &Path) -> Result<PassageIndex> {
    let (tensor_path, ids_path, cfg_path) = index_paths(base);
    let container = container::read(&tensor_path)?;
    let ids: Vec<String> = std::fs::read_to_string(&ids_path)?
        .lines()
        .map(str::to_string)
        .collect();
    if ids.len() != container.entries.len() {
        return Err(KprError::Format(format!(
            "{}: {} ids for {} embedding rows",
            ids_path.display(),
            ids.len(),
            container.entries.len()
        )));
    }
    let d = container.dim as usize;
    let mut embeddings = Matrix::zeros(ids.len(), d);
    for (id, v) in &container.entries {
        let row = *id as usize;
        if row >= ids.len() {
            return Err(KprError::Format(format!(
                "{}: row {row} out of range",
                tensor_path.display()
            )));
        }
        for c in 0..d {
            embeddings.set(row, c, v[c]);
        }
    }
    let cfg_text = std::fs::read_to_string(&cfg_path)?;
    let mut similarity = Similarity::Dot;
    let mut temperature = 1.0;
    for line in cfg_text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "similarity" => {
                    similarity = match v.trim() {
                        "dot" => Similarity::Dot,
                        "cosine" => Similarity::Cosine,
                        other => {
                            return Err(KprError::Format(format!(
                                "{}: unknown similarity {other}",
                                cfg_path.display()
                            )))
                        }
                    }
                }
                "temperature" => {
                    temperature = v.trim().parse().map_err(|_| {
                        KprError::Format(format!("{}: bad temperature", cfg_path.display()))
                    })?
                }
                _ => {}
            }
        }
    }
    Ok(PassageIndex {
        ids,
        embeddings,
        similarity,
        temperature,
    })
}
