//! Subcommand implementations: thin wrappers around the core library with
//! file loading, atomic output, and JSON reporting.

use std::collections::BTreeMap;
use std::path::Path;

use kpr_core::attention::{attention_weights, build_entity_inputs, Activation, LengthMode};
use kpr_core::container::write_atomic;
use kpr_core::encoder::{encode, EncoderConfig, EncoderParams};
use kpr_core::entity::{build_table, random_table, EntityEmbeddingTable};
use kpr_core::error::{KprError, Result};
use kpr_core::eval::{
    build_index, evaluate, load_eval_jsonl, load_index, save_index, search as search_index,
};
use kpr_core::linker::{
    build_dictionary, link, load_corpus_jsonl, save_corpus_jsonl, AnchorDictionary,
    HyperlinkCorpus,
};
use kpr_core::model::{
    embed_text, load_checkpoint, save_checkpoint, KprModel, ModelConfig, Role, Similarity,
};
use kpr_core::tokenizer::{format_query, tokenize, Vocabulary};
use kpr_core::training::{load_train_jsonl, train as train_model, TrainConfig};
use kpr_core::{Mode, Rng};
use serde_json::json;

use crate::{
    ActivationArg, BuildDictArgs, EmbedEntitiesArgs, EncoderArgs, EvalArgs, FlopsArgs, IndexArgs,
    InspectArgs, ModelArgs, SearchArgs, SigmoidLengthArg, SimilarityArg, SynthArgs, TrainArgs,
};

static EFFECTIVE_ARGS: std::sync::OnceLock<Vec<String>> = std::sync::OnceLock::new();

/// Records the post-merge argument list so reports can echo it.
pub fn set_effective_args(args: Vec<String>) {
    let _ = EFFECTIVE_ARGS.set(args);
}

fn emit(report: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let mut report = report.clone();
    if let (Some(obj), Some(args)) = (report.as_object_mut(), EFFECTIVE_ARGS.get()) {
        // effective invocation (config file already merged) for provenance
        obj.insert("args".to_string(), serde_json::json!(args));
    }
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| KprError::Format(format!("report serialization: {e}")))?;
    match out {
        Some(path) => write_atomic(path, format!("{text}\n").as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn activation_of(args: &ModelArgs) -> Activation {
    match args.activation {
        ActivationArg::Softmax => Activation::Softmax,
        ActivationArg::Sigmoid => Activation::SigmoidLengthBias(match args.sigmoid_length {
            SigmoidLengthArg::Rows => LengthMode::Rows,
            SigmoidLengthArg::Entities => LengthMode::Entities,
        }),
    }
}

fn similarity_of(args: &ModelArgs) -> Similarity {
    match args.similarity {
        SimilarityArg::Dot => Similarity::Dot,
        SimilarityArg::Cosine => Similarity::Cosine,
    }
}

fn temperature_of(args: &ModelArgs) -> f64 {
    args.temperature.unwrap_or(match args.similarity {
        SimilarityArg::Dot => 1.0,
        SimilarityArg::Cosine => 0.02,
    })
}

/// Vocabulary over corpus titles, texts, and any extra question sets.
fn build_vocab(
    corpus: &HyperlinkCorpus,
    extra_texts: &[String],
    min_token_freq: usize,
) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    for doc in corpus.documents() {
        texts.push(&doc.title);
        texts.push(&doc.text);
    }
    for t in extra_texts {
        texts.push(t);
    }
    Vocabulary::build(texts, min_token_freq)
}

fn encoder_config(args: &EncoderArgs, vocab: Vocabulary) -> Result<EncoderConfig> {
    let mut config = EncoderConfig::new(vocab);
    config.layers = args.layers;
    config.hidden = args.dim;
    config.max_tokens = args.tokens;
    config.heads = args.heads;
    config.dropout_p = args.dropout;
    config.validate()?;
    Ok(config)
}

fn load_model(path: &Path, baseline_override: bool) -> Result<KprModel> {
    let (mut model, _) = load_checkpoint(path)?;
    if baseline_override {
        model.config.baseline = true;
    }
    Ok(model)
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let config = kpr_core::synth::SynthConfig {
        entities: args.entities,
        alias_groups: args.alias_groups,
        passages_per_entity: args.passages_per_entity,
        zipf_mass: args.zipf_mass,
        zipf_exponent: args.zipf_exponent,
        heldout: args.heldout,
        queries_per_entity: args.queries_per_entity,
        alias_query_fraction: args.alias_query_fraction,
        mentions_per_doc: args.mentions_per_doc,
        seed: args.seed,
    };
    let out = kpr_core::synth::generate(&config)?;
    std::fs::create_dir_all(&args.out_dir)?;
    save_corpus_jsonl(&args.out_dir.join("corpus.jsonl"), &out.corpus)?;
    let mut train_buf = Vec::new();
    for row in &out.train {
        let line = serde_json::to_string(row)
            .map_err(|e| KprError::Format(format!("train row: {e}")))?;
        train_buf.extend_from_slice(line.as_bytes());
        train_buf.push(b'\n');
    }
    write_atomic(&args.out_dir.join("train.jsonl"), &train_buf)?;
    let mut eval_buf = Vec::new();
    for row in &out.eval {
        let line = serde_json::to_string(row)
            .map_err(|e| KprError::Format(format!("eval row: {e}")))?;
        eval_buf.extend_from_slice(line.as_bytes());
        eval_buf.push(b'\n');
    }
    write_atomic(&args.out_dir.join("eval.jsonl"), &eval_buf)?;
    println!(
        "synth: {} documents, {} training instances, {} eval queries -> {}",
        out.corpus.len(),
        out.train.len(),
        out.eval.len(),
        args.out_dir.display()
    );
    Ok(())
}

pub fn build_dict(args: BuildDictArgs) -> Result<()> {
    let (corpus, vocab) = load_corpus_jsonl(&args.corpus)?;
    let dict = build_dictionary(&corpus, &vocab, args.lp_threshold, args.commonness_threshold)?;
    dict.save_tsv(&args.out_tsv)?;
    dict.save_bin(&args.out_dict)?;
    println!(
        "build-dict: {} names over {} entities -> {} / {}",
        dict.len(),
        vocab.len(),
        args.out_dict.display(),
        args.out_tsv.display()
    );
    Ok(())
}

pub fn embed_entities(args: EmbedEntitiesArgs) -> Result<()> {
    let (corpus, vocab) = load_corpus_jsonl(&args.corpus)?;
    // encoder: from a checkpoint, or fresh from the same flags the trainer uses
    let (params, config, mut rng): (EncoderParams, EncoderConfig, Rng) =
        match &args.checkpoint {
            Some(ck) => {
                let (model, _) = load_checkpoint(ck)?;
                (
                    model.params.encoder,
                    model.config.encoder,
                    Rng::new(args.seed),
                )
            }
            None => {
                let mut extra = Vec::new();
                if let Some(train_path) = &args.train {
                    for instance in load_train_jsonl(train_path)? {
                        extra.push(instance.query);
                    }
                }
                let word_vocab = build_vocab(&corpus, &extra, args.encoder.min_token_freq);
                let config = encoder_config(&args.encoder, word_vocab)?;
                let mut rng = Rng::new(args.seed);
                let params = EncoderParams::init(&config, &mut rng)?;
                (params, config, rng)
            }
        };
    let reference = params.reference_norm();
    let layer_index = args.layer_index.unwrap_or(config.layers);
    let (table, skipped) = if args.random {
        (
            random_table(&vocab, config.hidden, args.scale, reference, &mut rng)?,
            0,
        )
    } else {
        build_table(
            &corpus,
            &vocab,
            &params,
            &config,
            layer_index,
            args.cap,
            &mut rng,
        )?
    };
    table.save(&args.out)?;
    println!(
        "embed-entities: {} of {} entities embedded ({} skipped), dim {}, reference norm {} -> {}",
        table.len(),
        vocab.len(),
        skipped,
        table.dim(),
        table.reference_norm(),
        args.out.display()
    );
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let (corpus, _) = load_corpus_jsonl(&args.corpus)?;
    let dict = AnchorDictionary::load_bin(&args.dict)?;
    let mut table = EntityEmbeddingTable::load(&args.embeddings)?;
    table.freeze();
    let dataset = load_train_jsonl(&args.train)?;
    let questions: Vec<String> = dataset.iter().map(|i| i.query.clone()).collect();
    let word_vocab = build_vocab(&corpus, &questions, args.encoder.min_token_freq);
    let enc_config = encoder_config(&args.encoder, word_vocab)?;
    if table.dim() != enc_config.hidden {
        return Err(KprError::Shape(format!(
            "embedding table dim {} != encoder hidden {}",
            table.dim(),
            enc_config.hidden
        )));
    }
    let mut config = ModelConfig::new(enc_config);
    config.activation = activation_of(&args.model);
    config.similarity = similarity_of(&args.model);
    config.temperature = temperature_of(&args.model);
    config.instruction = args.model.instruction.clone();
    config.baseline = args.model.baseline;
    let mut model = KprModel::init(config, args.seed)?;
    if args.renormalize_embeddings {
        table = table.normalize(model.params.encoder.reference_norm())?;
        table.freeze();
    }
    let train_config = TrainConfig {
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        epochs: args.epochs,
        freeze_base: args.freeze_base,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let losses = train_model(&mut model, &dict, &table, &corpus, &dataset, &train_config)?;
    for (epoch, loss) in losses.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.6}");
    }
    let mut extra = BTreeMap::new();
    extra.insert("batch_size".to_string(), args.batch_size.to_string());
    extra.insert("learning_rate".to_string(), args.learning_rate.to_string());
    extra.insert("epochs".to_string(), args.epochs.to_string());
    extra.insert("freeze_base".to_string(), args.freeze_base.to_string());
    extra.insert("seed".to_string(), args.seed.to_string());
    extra.insert(
        "min_token_freq".to_string(),
        args.encoder.min_token_freq.to_string(),
    );
    extra.insert("clip_norm".to_string(), train_config.clip_norm.to_string());
    extra.insert("patience".to_string(), train_config.patience.to_string());
    extra.insert("min_delta".to_string(), train_config.min_delta.to_string());
    save_checkpoint(&model, &args.out, &extra)?;
    println!(
        "train: {} epochs, final loss {:.6} -> {}",
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

pub fn index(args: IndexArgs) -> Result<()> {
    let (corpus, _) = load_corpus_jsonl(&args.corpus)?;
    let dict = AnchorDictionary::load_bin(&args.dict)?;
    let table = EntityEmbeddingTable::load(&args.embeddings)?;
    let model = load_model(&args.checkpoint, args.baseline)?;
    let passages: Vec<(String, String, String)> = corpus
        .documents()
        .iter()
        .map(|d| (d.id.clone(), d.title.clone(), d.text.clone()))
        .collect();
    let index = build_index(&model, &dict, &table, &passages)?;
    save_index(&index, &args.out)?;
    println!(
        "index: {} passages, dim {} -> {}",
        index.ids.len(),
        index.embeddings.cols(),
        args.out.display()
    );
    Ok(())
}

pub fn search(args: SearchArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    let dict = AnchorDictionary::load_bin(&args.dict)?;
    let table = EntityEmbeddingTable::load(&args.embeddings)?;
    let model = load_model(&args.checkpoint, args.baseline)?;
    let embedding = embed_text(
        &model,
        &dict,
        &table,
        &args.query,
        Role::Query,
        Mode::Eval,
        &mut Rng::new(0),
    )?;
    let hits = search_index(&index, &embedding, args.k)?;
    let report = json!({
        "query": args.query,
        "k": args.k,
        "results": hits
            .iter()
            .map(|(id, score)| json!({"id": id, "score": score}))
            .collect::<Vec<_>>(),
        "config": {
            "baseline": model.config.baseline,
            "checkpoint": args.checkpoint.display().to_string(),
            "index": args.index.display().to_string(),
        },
    });
    emit(&report, args.out.as_deref())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    let dict = AnchorDictionary::load_bin(&args.dict)?;
    let table = EntityEmbeddingTable::load(&args.embeddings)?;
    let model = load_model(&args.checkpoint, args.baseline)?;
    let rows = load_eval_jsonl(&args.eval)?;
    let report = evaluate(&model, &dict, &table, &index, &rows, &args.k)?;
    for (k, acc) in report.ks.iter().zip(report.accuracies.iter()) {
        println!("top-{k} accuracy: {acc:.4} over {} queries", rows.len());
    }
    if let Some(tsv) = &args.out_tsv {
        write_atomic(tsv, report.bins_tsv().as_bytes())?;
    }
    let value = serde_json::to_value(&report)
        .map_err(|e| KprError::Format(format!("eval report: {e}")))?;
    let full = json!({
        "report": value,
        "config": {
            "baseline": model.config.baseline,
            "checkpoint": args.checkpoint.display().to_string(),
            "index": args.index.display().to_string(),
            "eval": args.eval.display().to_string(),
        },
    });
    match &args.out {
        Some(path) => emit(&full, Some(path)),
        None => Ok(()),
    }
}

pub fn inspect_attention(args: InspectArgs) -> Result<()> {
    let dict = AnchorDictionary::load_bin(&args.dict)?;
    let table = EntityEmbeddingTable::load(&args.embeddings)?;
    let model = load_model(&args.checkpoint, false)?;
    if model.config.baseline {
        return Err(KprError::Usage(
            "inspect-attention: checkpoint was trained in baseline mode".into(),
        ));
    }
    let text = format_query(&args.query, model.config.instruction.as_deref())?;
    let tokens = tokenize(
        &text,
        &model.config.encoder.vocab,
        model.config.encoder.max_tokens,
    )?;
    let output = encode(
        &model.params.encoder,
        &model.config.encoder,
        &tokens,
        Mode::Eval,
        &mut Rng::new(0),
    )?;
    let mentions = link(&tokens, &dict, model.config.max_ngram);
    let inputs = build_entity_inputs(&mentions, &table, &model.params.kpr)?;
    let rows = attention_weights(
        &output.h_cls(),
        &inputs,
        &model.params.kpr,
        model.config.activation,
        args.per_mention,
        model.config.encoder.ln_eps,
    )?;
    let report = json!({
        "query": args.query,
        "per_mention": args.per_mention,
        "skipped_candidates": inputs.skipped,
        "rows": rows
            .iter()
            .map(|r| {
                json!({
                    "entity": r.entity.map(|id| {
                        dict.entity_name(id).unwrap_or("?").to_string()
                    }),
                    "surface": r.surface,
                    "raw_weight": r.raw,
                    "normalized_weight": r.normalized,
                })
            })
            .collect::<Vec<_>>(),
    });
    emit(&report, args.out.as_deref())
}

pub fn flops(args: FlopsArgs) -> Result<()> {
    let report =
        kpr_core::flops::overhead_report(args.layers, args.dim, args.tokens, args.entities)?;
    let value = serde_json::to_value(&report)
        .map_err(|e| KprError::Format(format!("flops report: {e}")))?;
    let full = json!({
        "layers": args.layers,
        "dim": args.dim,
        "tokens": args.tokens,
        "entities": args.entities,
        "report": value,
        "overhead_percent": report.overhead_percent(),
    });
    emit(&full, None)?;
    println!(
        "one forward pass: {} base + {} attention = {} FLOPs ({} overhead)",
        report.flops_bert,
        report.flops_kpr_att,
        report.total,
        report.overhead_percent()
    );
    Ok(())
}

