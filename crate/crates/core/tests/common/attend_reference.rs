//! Independent straight-line reference for the attention layer: plain
//! nested loops over Vec<Vec<f64>>, sharing no code with the Matrix
//! implementation. Random instances must agree to 1e-10 absolute.

use kpr_core::attention::{
    attend, build_entity_inputs, Activation, EntityInputs, KprParams, LengthMode,
};
use kpr_core::entity::EntityEmbeddingTable;
use kpr_core::linker::{Candidate, Mention};
use kpr_core::tensor::Matrix;
use kpr_core::{Mode, Rng};

type Vecs = Vec<Vec<f64>>;

fn to_vecs(m: &Matrix) -> Vecs {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Plain-loop reference: Q = h X_q, K = U X_k, V = U X_v,
/// w = act(Q K^T / sqrt(D)), Y = w V, Z = LN(Y + h).
fn reference_attend(
    h: &[f64],
    u: &Vecs,
    x_q: &Vecs,
    x_k: &Vecs,
    x_v: &Vecs,
    ln_gain: &[f64],
    ln_bias: &[f64],
    entity_rows: usize,
    softmax: bool,
    eps: f64,
) -> Vec<f64> {
    let d = h.len();
    let rows = u.len();
    let project_row = |row: &[f64], w: &Vecs| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (c, o) in out.iter_mut().enumerate() {
            for k in 0..d {
                *o += row[k] * w[k][c];
            }
        }
        out
    };
    let q = project_row(h, x_q);
    let mut scores = vec![0.0; rows];
    for (i, s) in scores.iter_mut().enumerate() {
        let k_i = project_row(&u[i], x_k);
        for c in 0..d {
            *s += q[c] * k_i[c];
        }
        *s /= (d as f64).sqrt();
    }
    let weights: Vec<f64> = if softmax {
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    } else {
        let length = (entity_rows + 1) as f64;
        scores
            .iter()
            .map(|s| sigmoid(s - length.ln() + 1.0))
            .collect()
    };
    let mut y = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        let v_i = project_row(&u[i], x_v);
        for c in 0..d {
            y[c] += w * v_i[c];
        }
    }
    let mut residual = vec![0.0; d];
    for c in 0..d {
        residual[c] = y[c] + h[c];
    }
    let mean: f64 = residual.iter().sum::<f64>() / d as f64;
    let var: f64 = residual.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + eps).sqrt();
    (0..d)
        .map(|c| (residual[c] - mean) * inv * ln_gain[c] + ln_bias[c])
        .collect()
}

fn random_instance(rng: &mut Rng) -> (Matrix, EntityInputs, KprParams, usize) {
    let d = [2usize, 4, 8, 16][rng.below(4)];
    let n_entities = rng.below(6);
    let mut params = KprParams::init(d, 12, 0.0, rng).unwrap();
    params.ln_gain = Matrix::uniform(1, d, 0.5, 1.5, rng);
    params.ln_bias = Matrix::uniform(1, d, -0.5, 0.5, rng);
    let mut table = EntityEmbeddingTable::new(d, 1.0).unwrap();
    for e in 0..n_entities.max(1) {
        let v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        table.upsert(e, v).unwrap();
    }
    let mut mentions = Vec::new();
    let mut next_pos = 1usize;
    let mut placed = 0usize;
    while placed < n_entities && next_pos + 2 < 12 {
        let span_len = 1 + rng.below(2);
        let count = (1 + rng.below(2)).min(n_entities - placed);
        let candidates: Vec<Candidate> = (placed..placed + count)
            .map(|entity| Candidate {
                entity,
                commonness: 1.0,
            })
            .collect();
        mentions.push(Mention {
            token_span: (next_pos, next_pos + span_len),
            char_span: (0, 1),
            surface: "m".into(),
            candidates,
        });
        next_pos += span_len + 1;
        placed += count;
    }
    let inputs = build_entity_inputs(&mentions, &table, &params).unwrap();
    let h = Matrix::uniform(1, d, -1.0, 1.0, rng);
    (h, inputs, params, d)
}

/// Compares attend() to the scalar reference on `cases` random instances.
pub fn run_cases(cases: usize) {
    let mut rng = Rng::new(424_242);
    for case in 0..cases {
        let (h, inputs, params, _d) = random_instance(&mut rng);
        let softmax = case % 3 == 2;
        let activation = if softmax {
            Activation::Softmax
        } else {
            Activation::SigmoidLengthBias(LengthMode::Rows)
        };
        let eps = if case % 2 == 0 { 0.0 } else { 1e-12 };
        let z = attend(
            &h,
            &inputs,
            &params,
            activation,
            Mode::Eval,
            &mut Rng::new(0),
            eps,
        )
        .unwrap();
        let expect = reference_attend(
            h.row(0),
            &to_vecs(&inputs.u),
            &to_vecs(&params.x_q),
            &to_vecs(&params.x_k),
            &to_vecs(&params.x_v),
            params.ln_gain.row(0),
            params.ln_bias.row(0),
            inputs.entity_rows(),
            softmax,
            eps,
        );
        for (c, e) in expect.iter().enumerate() {
            let got = z.get(0, c);
            assert!(
                (got - e).abs() <= 1e-10,
                "case {case}: column {c}: {got} vs reference {e}"
            );
        }
    }
}

/// Pins the worked scalar example: identity projections, h = [1, 0].
pub fn verify_derived_case() {
    // D = 2, identity projections, h = [1, 0], one entity row [0, 1]:
    // scores [0, 0], sigmoid weights 0.576117..., Y = [0, 0.576117],
    // Z = [1, -1] at eps = 0.
    let z = reference_attend(
        &[1.0, 0.0],
        &vec![vec![0.0, 1.0], vec![0.0, 0.0]],
        &vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        &vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        &vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        &[1.0, 1.0],
        &[0.0, 0.0],
        1,
        false,
        0.0,
    );
    assert!((z[0] - 1.0).abs() < 1e-9);
    assert!((z[1] + 1.0).abs() < 1e-9);
}
