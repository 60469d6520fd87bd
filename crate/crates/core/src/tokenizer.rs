//! Word-level tokenization and text formatting for the toy encoder.
//!
//! Lowercase word splitting stands in for subword tokenization: tokens are
//! maximal alphanumeric runs, punctuation only separates, and the literal
//! special-token strings are recognized verbatim so formatted passages can
//! carry an inner separator. Char spans into the source text are kept for
//! every surface token; the entity linker matches on those surfaces, so
//! linking works even for words the encoder vocabulary maps to the unknown
//! token.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{KprError, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const SPECIAL_TOKENS: [&str; 5] = [CLS, SEP, MASK, PAD, UNK];

/// Token-string to id mapping with the five special tokens pinned.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    cls: usize,
    sep: usize,
    mask: usize,
    pad: usize,
    unk: usize,
}

impl Vocabulary {
    /// Validates that each special token appears exactly once.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(KprError::Input(format!("duplicate vocab token {t:?}")));
            }
        }
        let mut special = [0usize; 5];
        for (slot, name) in special.iter_mut().zip(SPECIAL_TOKENS.iter()) {
            *slot = *index.get(*name).ok_or_else(|| {
                KprError::Input(format!("vocab is missing special token {name}"))
            })?;
        }
        Ok(Vocabulary {
            tokens,
            index,
            cls: special[0],
            sep: special[1],
            mask: special[2],
            pad: special[3],
            unk: special[4],
        })
    }

    /// Builds a vocabulary from raw texts: special tokens first, then every
    /// word with at least `min_freq` occurrences, ordered by descending count
    /// and ascending word for determinism.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocabulary {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for (word, _) in word_tokens(text) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(|(w, _)| w));
        Vocabulary::from_tokens(tokens).expect("specials are present by construction")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn cls_id(&self) -> usize {
        self.cls
    }

    pub fn sep_id(&self) -> usize {
        self.sep
    }

    pub fn mask_id(&self) -> usize {
        self.mask
    }

    pub fn pad_id(&self) -> usize {
        self.pad
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for t in &self.tokens {
            writeln!(buf, "{t}")?;
        }
        crate::container::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for line in BufReader::new(file).lines() {
            tokens.push(line?);
        }
        Vocabulary::from_tokens(tokens)
    }
}

/// A tokenized text: ids, char spans into the source, and a special-token
/// marker per position. Position 0 is always [CLS] and the final token [SEP].
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// (start, end) char offsets, end-exclusive. Empty spans mark tokens with
    /// no source text (wrapping specials).
    pub spans: Vec<(usize, usize)>,
    pub special: Vec<bool>,
    pub source: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Lowercased source slice for a surface token, None for specials.
    pub fn surface(&self, i: usize) -> Option<String> {
        if self.special[i] {
            return None;
        }
        let (start, end) = self.spans[i];
        Some(slice_chars(&self.source, start, end).to_lowercase())
    }
}

fn slice_chars(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// Maximal alphanumeric runs, lowercased, with char spans. Punctuation and
/// whitespace separate and are dropped.
pub fn word_tokens(text: &str) -> Vec<(String, (usize, usize))> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect::<String>().to_lowercase();
            out.push((word, (start, i)));
        } else {
            i += 1;
        }
    }
    out
}

/// Tokenize into [CLS] ... [SEP], truncated to `max_tokens` ids, recording
/// char spans. Literal special-token strings in the text are kept atomic.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_tokens: usize) -> Result<TokenSequence> {
    if text.trim().is_empty() {
        return Err(KprError::Input("tokenize: empty text".into()));
    }
    if max_tokens < 2 {
        return Err(KprError::Parameter(
            "tokenize: max_tokens must be >= 2 to fit [CLS] and [SEP]".into(),
        ));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut ids = vec![vocab.cls_id()];
    let mut spans = vec![(0usize, 0usize)];
    let mut special = vec![true];
    let mut i = 0;
    'scan: while i < chars.len() {
        if ids.len() == max_tokens - 1 {
            break;
        }
        for name in SPECIAL_TOKENS {
            let pat: Vec<char> = name.chars().collect();
            if chars[i..].starts_with(&pat) {
                ids.push(vocab.id_of(name).expect("special in vocab"));
                spans.push((i, i + pat.len()));
                special.push(true);
                i += pat.len();
                continue 'scan;
            }
        }
        if chars[i].is_alphanumeric() {
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect::<String>().to_lowercase();
            ids.push(vocab.id_of(&word).unwrap_or_else(|| vocab.unk_id()));
            spans.push((start, i));
            special.push(false);
        } else {
            i += 1;
        }
    }
    ids.push(vocab.sep_id());
    spans.push((chars.len(), chars.len()));
    special.push(true);
    Ok(TokenSequence {
        ids,
        spans,
        special,
        source: text.to_string(),
    })
}

/// Passage text for the encoder: title and body joined by an inner separator,
/// so tokenization yields [CLS] title [SEP] text [SEP].
pub fn format_passage(title: &str, text: &str) -> String {
    format!("{} {SEP} {}", title.trim(), text.trim())
}

/// Query text for the encoder: the optional instruction is prepended verbatim.
pub fn format_query(question: &str, instruction: Option<&str>) -> Result<String> {
    let question = question.trim();
    if question.is_empty() {
        return Err(KprError::Input("format_query: empty question".into()));
    }
    Ok(match instruction {
        Some(instr) => format!("{instr} {question}"),
        None => question.to_string(),
    })
}

/// Replaces the tokens covered by `char_span` with a single [MASK] token.
/// Returns the new sequence and the mask position.
pub fn mask_span(
    tokens: &TokenSequence,
    char_span: (usize, usize),
    vocab: &Vocabulary,
) -> Result<(TokenSequence, usize)> {
    let (start, end) = char_span;
    if end <= start {
        return Err(KprError::Alignment(format!(
            "mask_span: empty span ({start}, {end})"
        )));
    }
    let mut first = None;
    let mut last = None;
    for i in 0..tokens.len() {
        if tokens.special[i] {
            continue;
        }
        if tokens.spans[i].0 == start && first.is_none() {
            first = Some(i);
        }
        if tokens.spans[i].1 == end {
            last = Some(i);
        }
    }
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) if f <= l => (f, l),
        _ => {
            return Err(KprError::Alignment(format!(
                "mask_span: span ({start}, {end}) does not align with token boundaries"
            )))
        }
    };
    if (first..=last).any(|i| tokens.special[i]) {
        return Err(KprError::Alignment(format!(
            "mask_span: span ({start}, {end}) covers a special token"
        )));
    }
    let mut ids = Vec::with_capacity(tokens.len() - (last - first));
    let mut spans = Vec::with_capacity(ids.capacity());
    let mut special = Vec::with_capacity(ids.capacity());
    for i in 0..first {
        ids.push(tokens.ids[i]);
        spans.push(tokens.spans[i]);
        special.push(tokens.special[i]);
    }
    let mask_pos = ids.len();
    ids.push(vocab.mask_id());
    spans.push((start, end));
    special.push(true);
    for i in last + 1..tokens.len() {
        ids.push(tokens.ids[i]);
        spans.push(tokens.spans[i]);
        special.push(tokens.special[i]);
    }
    Ok((
        TokenSequence {
            ids,
            spans,
            special,
            source: tokens.source.clone(),
        },
        mask_pos,
    ))
}
