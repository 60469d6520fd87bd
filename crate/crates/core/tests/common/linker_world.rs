//! Hand-audited 20-document corpus with frozen statistics, plus the
//! naive all-n-gram scan used as the trie-matching oracle.

use std::collections::BTreeMap;

use kpr_core::entity::EntityVocabulary;
use kpr_core::linker::{
    build_dictionary, entity_frequency, link, AnchorDictionary, Candidate, DictEntry, Document,
    HyperlinkCorpus, Mention,
};
use kpr_core::tokenizer::{tokenize, TokenSequence, Vocabulary, SPECIAL_TOKENS};
use kpr_core::Rng;

/// Builds a document from word tokens plus (start_word, word_count, target)
/// anchors, computing char offsets.
fn doc(id: &str, words: &[&str], anchors: &[(usize, usize, usize)]) -> Document {
    let mut text = String::new();
    let mut offsets = Vec::new();
    for w in words {
        if !text.is_empty() {
            text.push(' ');
        }
        offsets.push(text.len());
        text.push_str(w);
    }
    let anchors = anchors
        .iter()
        .map(|&(start_word, count, entity)| {
            let start = offsets[start_word];
            let last = start_word + count - 1;
            let end = offsets[last] + words[last].len();
            kpr_core::linker::Anchor { start, end, entity }
        })
        .collect();
    Document {
        id: id.into(),
        title: format!("title {id}"),
        text,
        anchors,
    }
}

// entity ids follow the sorted anchor-target order used by corpus loading
const APPLE_FRUIT: usize = 0;
const APPLE_INC: usize = 1;
const JAVA_COFFEE: usize = 2;
const JAVA_ISLAND: usize = 3;
const JAVA_LANG: usize = 4;
const NYC: usize = 5;
const NYS: usize = 6;
const RUST_LANG: usize = 7;

fn entity_vocab() -> EntityVocabulary {
    EntityVocabulary::from_names(
        [
            "apple_fruit",
            "apple_inc",
            "java_coffee",
            "java_island",
            "java_lang",
            "nyc",
            "nys",
            "rust_lang",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    )
    .unwrap()
}

/// Twenty documents with fully hand-tallied statistics:
///
/// - "new york": 10 occurrences, 10 anchors (7 nyc, 3 nys)
///   -> lp 1.0, commonness 0.7 / 0.3 (both kept, 0.3 sits on the threshold)
/// - "apple": 20 occurrences (8 + 2 anchored, 8 plain, 2 inside "big apple"),
///   10 anchors (8 apple_inc, 2 apple_fruit)
///   -> lp 0.5, apple_inc 0.8 kept, apple_fruit 0.2 filtered
/// - "big apple": 2 occurrences, 2 anchors -> lp 1.0, nyc 1.0
/// - "java": 10 occurrences, 10 anchors (5 lang, 3 coffee, 2 island)
///   -> lp 1.0, 0.5 and 0.3 kept, 0.2 filtered
/// - "the": 44 occurrences, 2 anchors -> lp 2/44 < 0.05, name dropped
/// - "rust": 20 occurrences, 1 anchor -> lp exactly 0.05, kept
pub fn hand_corpus() -> HyperlinkCorpus {
    let mut docs = Vec::new();
    let nyc_fillers: [[&str; 4]; 7] = [
        ["visitors", "adore", "every", "spring"],
        ["crowds", "fill", "each", "winter"],
        ["artists", "paint", "at", "dawn"],
        ["students", "map", "by", "night"],
        ["poets", "praise", "in", "verse"],
        ["traders", "roam", "for", "work"],
        ["pilots", "circle", "before", "landing"],
    ];
    for (i, f) in nyc_fillers.iter().enumerate() {
        // "<w0> <w1> new york <w2> <w3>", anchor on words 2-3
        let words = [f[0], f[1], "new", "york", f[2], f[3]];
        docs.push(doc(&format!("d{:02}", i + 1), &words, &[(2, 2, NYC)]));
    }
    let nys_fillers: [[&str; 4]; 3] = [
        ["farms", "cover", "beyond", "cities"],
        ["lakes", "dot", "upstate", "towns"],
        ["forests", "line", "all", "summer"],
    ];
    for (i, f) in nys_fillers.iter().enumerate() {
        let words = [f[0], f[1], "new", "york", f[2], f[3]];
        docs.push(doc(&format!("d{:02}", i + 8), &words, &[(2, 2, NYS)]));
    }
    let inc_fillers: [[&str; 5]; 4] = [
        ["ships", "phones", "while", "sells", "laptops"],
        ["builds", "chips", "and", "designs", "tablets"],
        ["opens", "stores", "as", "courts", "fans"],
        ["patents", "glass", "though", "guards", "secrets"],
    ];
    for (i, f) in inc_fillers.iter().enumerate() {
        // "apple <v1> <n1> <conj> apple <v2> <n2>", both apples anchored
        let words = ["apple", f[0], f[1], f[2], "apple", f[3], f[4]];
        docs.push(doc(
            &format!("d{:02}", i + 11),
            &words,
            &[(0, 1, APPLE_INC), (4, 1, APPLE_INC)],
        ));
    }
    docs.push(doc(
        "d15",
        &[
            "children", "eat", "apple", "slices", "and", "apple", "pieces", "daily",
        ],
        &[(2, 1, APPLE_FRUIT), (5, 1, APPLE_FRUIT)],
    ));
    docs.push(doc(
        "d16",
        &[
            "markets", "stock", "apple", "crates", "and", "apple", "boxes", "near", "apple",
            "bags", "plus", "apple", "jars", "orchards", "grow", "apple", "trees", "apple",
            "rows", "apple", "lanes", "apple", "plots",
        ],
        &[],
    ));
    // 10 anchored javas: 5 lang, 3 coffee, 2 island
    let java_targets = [
        JAVA_LANG,
        JAVA_LANG,
        JAVA_LANG,
        JAVA_LANG,
        JAVA_LANG,
        JAVA_COFFEE,
        JAVA_COFFEE,
        JAVA_COFFEE,
        JAVA_ISLAND,
        JAVA_ISLAND,
    ];
    let mut java_words = Vec::new();
    let mut java_anchors = Vec::new();
    for (i, &target) in java_targets.iter().enumerate() {
        java_anchors.push((java_words.len(), 1, target));
        java_words.push("java");
        java_words.push(["powers", "brews", "spans", "runs", "links"][i % 5]);
    }
    docs.push(doc("d17", &java_words, &java_anchors));
    docs.push(doc(
        "d18",
        &["locals", "call", "the", "big", "apple", "a", "dream"],
        &[(2, 1, NYC), (3, 2, NYC)],
    ));
    docs.push(doc(
        "d19",
        &["writers", "dub", "the", "big", "apple", "a", "stage"],
        &[(2, 1, NYC), (3, 2, NYC)],
    ));
    // 42 plain "the" + 20 "rust" with exactly one anchored
    let mut d20_words: Vec<&str> = Vec::new();
    for _ in 0..42 {
        d20_words.push("the");
    }
    let rust_anchor_word = d20_words.len();
    for _ in 0..20 {
        d20_words.push("rust");
    }
    docs.push(doc("d20", &d20_words, &[(rust_anchor_word, 1, RUST_LANG)]));
    assert_eq!(docs.len(), 20);
    HyperlinkCorpus::new(docs).unwrap()
}

/// Asserts the dictionary reproduces every hand-computed value exactly.
pub fn verify_hand_corpus_statistics() {
    let corpus = hand_corpus();
    let dict = build_dictionary(&corpus, &entity_vocab(), 0.05, 0.30).unwrap();

    // surviving names, exactly
    let names: Vec<&str> = dict.names().collect();
    assert_eq!(names, vec!["apple", "big apple", "java", "new york", "rust"]);

    let apple = dict.entry("apple").unwrap();
    assert_eq!(apple.link_probability, 0.5);
    assert_eq!(apple.candidates.len(), 1);
    assert_eq!(apple.candidates[0].entity, APPLE_INC);
    assert_eq!(apple.candidates[0].commonness, 0.8);

    let big_apple = dict.entry("big apple").unwrap();
    assert_eq!(big_apple.link_probability, 1.0);
    assert_eq!(big_apple.candidates.len(), 1);
    assert_eq!(big_apple.candidates[0].entity, NYC);
    assert_eq!(big_apple.candidates[0].commonness, 1.0);

    let java = dict.entry("java").unwrap();
    assert_eq!(java.link_probability, 1.0);
    assert_eq!(java.candidates.len(), 2);
    assert_eq!(java.candidates[0].entity, JAVA_LANG);
    assert_eq!(java.candidates[0].commonness, 0.5);
    assert_eq!(java.candidates[1].entity, JAVA_COFFEE);
    assert_eq!(java.candidates[1].commonness, 0.3);

    let ny = dict.entry("new york").unwrap();
    assert_eq!(ny.link_probability, 1.0);
    assert_eq!(ny.candidates.len(), 2);
    assert_eq!(ny.candidates[0].entity, NYC);
    assert_eq!(ny.candidates[0].commonness, 0.7);
    assert_eq!(ny.candidates[1].entity, NYS);
    assert_eq!(ny.candidates[1].commonness, 0.3);

    let rust = dict.entry("rust").unwrap();
    assert_eq!(rust.link_probability, 0.05);
    assert_eq!(rust.candidates.len(), 1);
    assert_eq!(rust.candidates[0].entity, RUST_LANG);

    // filtered exactly as hand-identified
    assert!(dict.entry("the").is_none());
    assert!(!java.candidates.iter().any(|c| c.entity == JAVA_ISLAND));
    assert!(!apple.candidates.iter().any(|c| c.entity == APPLE_FRUIT));
}

/// Asserts anchor counts per entity on the hand corpus.
pub fn verify_hand_frequencies() {
    let corpus = hand_corpus();
    let freq = entity_frequency(&corpus);
    assert_eq!(freq[&NYC], 7 + 2 + 2); // "new york" + "the" + "big apple" anchors
    assert_eq!(freq[&NYS], 3);
    assert_eq!(freq[&APPLE_INC], 8);
    assert_eq!(freq[&APPLE_FRUIT], 2);
    assert_eq!(freq[&JAVA_LANG], 5);
    assert_eq!(freq[&JAVA_COFFEE], 3);
    assert_eq!(freq[&JAVA_ISLAND], 2);
    assert_eq!(freq[&RUST_LANG], 1);
    let total: u64 = freq.values().sum();
    let anchors: usize = corpus.documents().iter().map(|d| d.anchors.len()).sum();
    assert_eq!(total, anchors as u64);
}

/// Naive all-n-gram scan: every (start, length) window looked up directly.
fn naive_link(tokens: &TokenSequence, dict: &AnchorDictionary, max_ngram: usize) -> Vec<Mention> {
    let mut out = Vec::new();
    for start in 0..tokens.len() {
        'lengths: for n in 1..=max_ngram {
            let end = start + n;
            if end > tokens.len() {
                break;
            }
            let mut surfaces = Vec::with_capacity(n);
            for i in start..end {
                match tokens.surface(i) {
                    Some(s) => surfaces.push(s),
                    None => break 'lengths,
                }
            }
            let name = surfaces.join(" ");
            if let Some(entry) = dict.entry(&name) {
                out.push(Mention {
                    token_span: (start, end),
                    char_span: (tokens.spans[start].0, tokens.spans[end - 1].1),
                    surface: name,
                    candidates: entry.candidates.clone(),
                });
            }
        }
    }
    out.sort_by_key(|m| m.token_span);
    out
}

fn assert_same_mentions(a: &[Mention], b: &[Mention]) {
    assert_eq!(a.len(), b.len(), "mention counts differ");
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x.token_span, y.token_span);
        assert_eq!(x.char_span, y.char_span);
        assert_eq!(x.surface, y.surface);
        let cx: Vec<(usize, f64)> = x.candidates.iter().map(|c| (c.entity, c.commonness)).collect();
        let cy: Vec<(usize, f64)> = y.candidates.iter().map(|c| (c.entity, c.commonness)).collect();
        assert_eq!(cx, cy);
    }
}

/// Trie matching vs the naive scan on `cases` random token streams.
pub fn run_random_texts(cases: usize) {
    // dictionary with single- and multi-token names, some sharing prefixes
    let mut entries = BTreeMap::new();
    let mut add = |name: &str, entity: usize| {
        entries.insert(
            name.to_string(),
            DictEntry {
                link_probability: 0.5,
                candidates: vec![
                    Candidate {
                        entity,
                        commonness: 0.6,
                    },
                    Candidate {
                        entity: entity + 100,
                        commonness: 0.4,
                    },
                ],
            },
        );
    };
    add("alpha", 1);
    add("alpha beta", 2);
    add("alpha beta gamma", 3);
    add("beta", 4);
    add("gamma delta", 5);
    add("delta", 6);
    add("epsilon zeta eta theta", 7);
    let dict = AnchorDictionary::from_entries(
        entries,
        (0..200).map(|i| format!("E{i}")).collect(),
        0.05,
        0.30,
    );
    let pool = [
        "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "noise", "word",
        "filler", "other",
    ];
    let word_vocab = {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(pool.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens).unwrap()
    };
    let mut rng = Rng::new(31_337);
    for case in 0..cases {
        let len = 1 + rng.below(24);
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            words.push(pool[rng.below(pool.len())]);
        }
        // sprinkle a separator so special positions appear mid-sequence
        let text = if case % 4 == 0 && len > 2 {
            let mid = len / 2;
            format!("{} [SEP] {}", words[..mid].join(" "), words[mid..].join(" "))
        } else {
            words.join(" ")
        };
        let tokens = tokenize(&text, &word_vocab, 64).unwrap();
        let fast = link(&tokens, &dict, 8);
        let slow = naive_link(&tokens, &dict, 8);
        assert_same_mentions(&fast, &slow);
        for m in &fast {
            for i in m.token_span.0..m.token_span.1 {
                assert!(!tokens.special[i], "case {case}: special inside mention");
            }
        }
    }
}
