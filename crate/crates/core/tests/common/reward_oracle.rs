//! Brute-force reward: materialize every (state, condition, condition)
//! triple, then sum the list naively.

use hdl_core::similarity::SimilarityMatrix;

#[derive(Clone, Copy, Debug)]
pub struct Triple {
    pub state: usize,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

pub fn triples(matrices: &[&SimilarityMatrix]) -> Vec<Triple> {
    let mut out = Vec::new();
    for (state, s) in matrices.iter().enumerate() {
        for i in 0..s.m {
            for j in 0..s.m {
                if i != j {
                    out.push(Triple {
                        state,
                        i,
                        j,
                        value: s.values[i * s.m + j],
                    });
                }
            }
        }
    }
    out
}

/// `(r1, r2, total)` recomputed from the triple list.
pub fn brute_force_reward(matrices: &[&SimilarityMatrix]) -> (f64, f64, f64) {
    let n = matrices.len();
    let m = matrices[0].m;
    let all = triples(matrices);
    let mut sum = 0.0;
    for t in &all {
        sum += t.value;
    }
    let r1 = -(sum / (n * m * (m - 1)) as f64);
    let mut class_means = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = 0.0;
        for t in all.iter().filter(|t| t.i == i) {
            row += t.value;
        }
        class_means.push(row / (n * (m - 1)) as f64);
    }
    let r2 = -class_means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (r1, r2, r1 + r2 - n as f64 / 3.0)
}
