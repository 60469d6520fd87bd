//! Bounded-heap search vs full-sort oracle on random instances.

use kpr_core::eval::{search, PassageIndex};
use kpr_core::model::{score, Similarity};
use kpr_core::tensor::Matrix;
use kpr_core::Rng;

/// Compares search() to a full sort on `cases` random instances.
pub fn run_cases(cases: usize) {
    let mut rng = Rng::new(90_210);
    for case in 0..cases {
        let p = 2 + rng.below(40);
        let d = 1 + rng.below(8);
        let similarity = if case % 4 == 0 {
            Similarity::Cosine
        } else {
            Similarity::Dot
        };
        let mut embeddings = Matrix::uniform(p, d, -1.0, 1.0, &mut rng);
        if similarity == Similarity::Cosine {
            // keep vectors away from zero for the cosine denominator
            for r in 0..p {
                embeddings.set(r, 0, embeddings.get(r, 0) + 2.0);
            }
        }
        // force some exact ties
        if p >= 4 {
            for c in 0..d {
                let v = embeddings.get(0, c);
                embeddings.set(1, c, v);
                embeddings.set(2, c, v);
            }
        }
        let ids: Vec<String> = (0..p).map(|i| format!("p{i:03}")).collect();
        let index = PassageIndex {
            ids: ids.clone(),
            embeddings,
            similarity,
            temperature: 1.0,
        };
        let mut query = Matrix::uniform(1, d, -1.0, 1.0, &mut rng);
        if similarity == Similarity::Cosine {
            query.set(0, 0, query.get(0, 0) + 2.0);
        }
        let k = 1 + rng.below(p);
        let got = search(&index, &query, k).unwrap();

        let mut oracle: Vec<(String, f64)> = (0..p)
            .map(|r| {
                let e = index.embeddings.row_matrix(r);
                (
                    ids[r].clone(),
                    score(&query, &e, similarity, 1.0).unwrap(),
                )
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        oracle.truncate(k);

        assert_eq!(got.len(), oracle.len(), "case {case}");
        for (g, o) in got.iter().zip(oracle.iter()) {
            assert_eq!(g.0, o.0, "case {case}");
            assert_eq!(g.1, o.1, "case {case}");
        }
    }
}
