//! Shared finite-difference sweep over random small configurations of the
//! attention layer, the encoder stack, and the full batch loss.

use std::collections::BTreeMap;

use kpr_core::attention::{
    attend, attend_backward, attend_with_cache, build_entity_inputs, Activation, KprParams,
    LengthMode,
};
use kpr_core::encoder::{encode, encode_with_cache, EncoderConfig, EncoderParams};
use kpr_core::entity::EntityEmbeddingTable;
use kpr_core::linker::{AnchorDictionary, Candidate, DictEntry, Document, HyperlinkCorpus, Mention};
use kpr_core::model::{KprModel, ModelConfig, ModelParams, Similarity};
use kpr_core::tensor::{grad_check, Matrix};
use kpr_core::tokenizer::{tokenize, Vocabulary, SPECIAL_TOKENS};
use kpr_core::training::{batch_loss, TrainingInstance};
use kpr_core::{Mode, Rng};

const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn attention_config_check(seed: u64, activation: Activation) -> f64 {
    let mut rng = Rng::new(seed);
    let d = [2usize, 4, 8, 16][rng.below(4)];
    let n = rng.below(6);
    let params = KprParams::init(d, 12, 0.0, &mut rng).unwrap();
    let mut table = EntityEmbeddingTable::new(d, 1.0).unwrap();
    for e in 0..n.max(1) {
        let v: Vec<f64> = (0..d).map(|_| rng.uniform(-0.8, 0.8)).collect();
        table.upsert(e, v).unwrap();
    }
    let mut mentions = Vec::new();
    for e in 0..n {
        mentions.push(Mention {
            token_span: (1 + e, 2 + e),
            char_span: (0, 1),
            surface: format!("m{e}"),
            candidates: vec![Candidate {
                entity: e,
                commonness: 1.0,
            }],
        });
    }
    let inputs = build_entity_inputs(&mentions, &table, &params).unwrap();
    let h = Matrix::uniform(1, d, -1.0, 1.0, &mut rng);
    let upstream = Matrix::uniform(1, d, -1.0, 1.0, &mut rng);
    let (_, cache) = attend_with_cache(
        &h,
        &inputs,
        &params,
        activation,
        Mode::Eval,
        &mut Rng::new(0),
        1e-8,
    )
    .unwrap();
    let grads = attend_backward(&upstream, &cache, params.position_table.rows()).unwrap();
    let grad_mats = [
        grads.x_q.clone(),
        grads.x_k.clone(),
        grads.x_v.clone(),
        grads.position_table.clone(),
        grads.noop.clone(),
        grads.ln_gain.clone(),
        grads.ln_bias.clone(),
    ];
    let mut worst: f64 = 0.0;
    for idx in 0..grad_mats.len() {
        let point = params.tensors()[idx].clone();
        let err = grad_check(
            |candidate: &Matrix| {
                let mut p = params.clone();
                *p.tensors_mut()[idx] = candidate.clone();
                let i = build_entity_inputs(&mentions, &table, &p)?;
                let z = attend(&h, &i, &p, activation, Mode::Eval, &mut Rng::new(0), 1e-8)?;
                z.hadamard(&upstream).map(|m| m.data().iter().sum())
            },
            &point,
            &grad_mats[idx],
            STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

fn encoder_vocab() -> Vocabulary {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for w in [
        "zatu", "meko", "pilo", "vora", "red", "blue", "gold", "iron", "who", "made", "holds",
    ] {
        tokens.push(w.into());
    }
    Vocabulary::from_tokens(tokens).unwrap()
}

fn encoder_config_check(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut config = EncoderConfig::new(encoder_vocab());
    config.layers = 1 + rng.below(2);
    config.hidden = [4usize, 8, 16][rng.below(3)];
    config.heads = if config.hidden == 4 { 2 } else { [2usize, 4][rng.below(2)] };
    config.max_tokens = 12;
    config.dropout_p = if seed % 3 == 0 { 0.1 } else { 0.0 };
    config.ln_eps = 1e-8;
    let mode = if config.dropout_p > 0.0 {
        Mode::Train
    } else {
        Mode::Eval
    };
    let params = EncoderParams::init(&config, &mut rng).unwrap();
    let tokens = tokenize("zatu holds red iron", &config.vocab, 12).unwrap();
    let upstream = Matrix::uniform(tokens.len(), config.hidden, -1.0, 1.0, &mut rng);
    let (_, cache) =
        encode_with_cache(&params, &config, &tokens, mode, &mut Rng::new(seed)).unwrap();
    let mut grads = params.zeros_like();
    kpr_core::encoder::encode_backward(&params, &config, &cache, &upstream, &mut grads).unwrap();
    let grad_mats: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let mut worst: f64 = 0.0;
    for idx in 0..grad_mats.len() {
        let point = params.tensors()[idx].clone();
        let err = grad_check(
            |candidate: &Matrix| {
                let mut p = params.clone();
                *p.tensors_mut()[idx] = candidate.clone();
                let out = encode(&p, &config, &tokens, mode, &mut Rng::new(seed))?;
                out.states
                    .last()
                    .unwrap()
                    .hadamard(&upstream)
                    .map(|m| m.data().iter().sum())
            },
            &point,
            &grad_mats[idx],
            STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

struct LossWorld {
    corpus: HyperlinkCorpus,
    dict: AnchorDictionary,
    table: EntityEmbeddingTable,
    batch: Vec<TrainingInstance>,
}

fn loss_world(dim: usize, rng: &mut Rng) -> LossWorld {
    let names = ["zatu", "meko", "pilo", "vora"];
    let mut docs = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let text = format!("{name} holds red iron");
        docs.push(Document {
            id: format!("p{i}"),
            title: name.to_string(),
            text: text.clone(),
            anchors: vec![kpr_core::linker::Anchor {
                start: 0,
                end: name.len(),
                entity: i,
            }],
        });
    }
    let corpus = HyperlinkCorpus::new(docs).unwrap();
    let mut entries = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        entries.insert(
            name.to_string(),
            DictEntry {
                link_probability: 1.0,
                candidates: vec![Candidate {
                    entity: i,
                    commonness: 1.0,
                }],
            },
        );
    }
    let dict = AnchorDictionary::from_entries(
        entries,
        names.iter().map(|s| s.to_string()).collect(),
        0.05,
        0.30,
    );
    let mut table = EntityEmbeddingTable::new(dim, 0.5).unwrap();
    for i in 0..names.len() {
        let v: Vec<f64> = (0..dim).map(|_| rng.uniform(-0.5, 0.5)).collect();
        table.upsert(i, v).unwrap();
    }
    let batch = vec![
        TrainingInstance::new("who made zatu".into(), "p0".into(), vec!["p2".into()]).unwrap(),
        TrainingInstance::new("who made meko".into(), "p1".into(), vec!["p3".into()]).unwrap(),
    ];
    LossWorld {
        corpus,
        dict,
        table,
        batch,
    }
}

fn batch_loss_config_check(seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut config = EncoderConfig::new(encoder_vocab());
    config.layers = 1;
    config.hidden = [4usize, 8][rng.below(2)];
    config.heads = 2;
    config.max_tokens = 12;
    config.dropout_p = if seed % 4 == 0 { 0.1 } else { 0.0 };
    config.ln_eps = 1e-8;
    let mut model_config = ModelConfig::new(config);
    model_config.similarity = if seed % 2 == 0 {
        Similarity::Dot
    } else {
        Similarity::Cosine
    };
    model_config.temperature = if seed % 2 == 0 { 1.0 } else { 0.5 };
    model_config.activation = if seed % 5 == 0 {
        Activation::Softmax
    } else {
        Activation::SigmoidLengthBias(LengthMode::Rows)
    };
    model_config.baseline = seed % 7 == 0;
    let mode = if model_config.encoder.dropout_p > 0.0 {
        Mode::Train
    } else {
        Mode::Eval
    };
    let dim = model_config.encoder.hidden;
    let world = loss_world(dim, &mut rng);
    let model = KprModel::init(model_config, seed).unwrap();
    let batch_size = 1 + (seed as usize) % 2;
    let batch = &world.batch[..batch_size];

    let loss_of = |params: &ModelParams| -> kpr_core::Result<f64> {
        let probe = KprModel {
            config: model.config.clone(),
            params: params.clone(),
        };
        let (loss, _) = batch_loss(
            &probe,
            &world.dict,
            &world.table,
            &world.corpus,
            batch,
            mode,
            &mut Rng::new(seed),
        )?;
        Ok(loss)
    };

    let (_, grads) = batch_loss(
        &model,
        &world.dict,
        &world.table,
        &world.corpus,
        batch,
        mode,
        &mut Rng::new(seed),
    )
    .unwrap();
    let grad_mats: Vec<Matrix> = grads.tensors().into_iter().cloned().collect();
    let mut worst: f64 = 0.0;
    for idx in 0..grad_mats.len() {
        let point = model.params.tensors()[idx].clone();
        let err = grad_check(
            |candidate: &Matrix| {
                let mut p = model.params.clone();
                *p.tensors_mut()[idx] = candidate.clone();
                loss_of(&p)
            },
            &point,
            &grad_mats[idx],
            STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Runs the whole sweep, asserting every configuration stays within
/// tolerance; returns (configurations checked, worst relative error).
pub fn run_sweep() -> (usize, f64) {
    let mut checked = 0usize;
    let mut worst_overall: f64 = 0.0;
    for seed in 0..40u64 {
        let activation = match seed % 3 {
            0 => Activation::SigmoidLengthBias(LengthMode::Rows),
            1 => Activation::SigmoidLengthBias(LengthMode::Entities),
            _ => Activation::Softmax,
        };
        let worst = attention_config_check(1000 + seed, activation);
        assert!(worst <= TOLERANCE, "attention config {seed}: error {worst}");
        worst_overall = worst_overall.max(worst);
        checked += 1;
    }
    for seed in 0..30u64 {
        let worst = encoder_config_check(2000 + seed);
        assert!(worst <= TOLERANCE, "encoder config {seed}: error {worst}");
        worst_overall = worst_overall.max(worst);
        checked += 1;
    }
    for seed in 0..30u64 {
        let worst = batch_loss_config_check(3000 + seed);
        assert!(worst <= TOLERANCE, "batch loss config {seed}: error {worst}");
        worst_overall = worst_overall.max(worst);
        checked += 1;
    }
    (checked, worst_overall)
}
