//! Structural similarity between preprocessed samples and the
//! cross-condition reward used to score a set of collection states.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envsim::PreprocessedDataset;
use crate::tensor::Tensor;

pub const WINDOW: usize = 7;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("images of shape {shape:?} are smaller than the {window}x{window} window")]
    TooSmall { shape: Vec<usize>, window: usize },
    #[error("need at least 2 operating conditions, got {0}")]
    TooFewConditions(usize),
    #[error("need at least one collection state")]
    Empty,
}

pub type Result<T, E = SimilarityError> = std::result::Result<T, E>;

/// Summed-area table of a `h x w` plane, `(h + 1) x (w + 1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
}

/// Mean SSIM over all `window x window` positions (stride 1, valid region)
/// of each channel, averaged over channels. Inputs are `C x H x W` in
/// `[0, 1]`.
pub fn ssim_with_window(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SimilarityError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(SimilarityError::Shape(a.shape().to_vec(), b.shape().to_vec())),
    };
    if h < window || w < window || window == 0 {
        return Err(SimilarityError::TooSmall {
            shape: a.shape().to_vec(),
            window,
        });
    }
    let n = (window * window) as f64;
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let sa = integral(h, w, |i| pa[i] as f64);
        let sb = integral(h, w, |i| pb[i] as f64);
        let saa = integral(h, w, |i| (pa[i] as f64) * (pa[i] as f64));
        let sbb = integral(h, w, |i| (pb[i] as f64) * (pb[i] as f64));
        let sab = integral(h, w, |i| (pa[i] as f64) * (pb[i] as f64));
        let mut acc = 0.0;
        for y in 0..=h - window {
            for x in 0..=w - window {
                let mu_a = window_sum(&sa, w, y, x, window) / n;
                let mu_b = window_sum(&sb, w, y, x, window) / n;
                let var_a = window_sum(&saa, w, y, x, window) / n - mu_a * mu_a;
                let var_b = window_sum(&sbb, w, y, x, window) / n - mu_b * mu_b;
                let cov = window_sum(&sab, w, y, x, window) / n - mu_a * mu_b;
                acc += local_ssim(mu_a, mu_b, var_a, var_b, cov);
            }
        }
        total += acc / ((h - window + 1) * (w - window + 1)) as f64;
    }
    Ok(total / c as f64)
}

/// The luminance-contrast-structure product for one window. Written so
/// that swapping the arguments, or passing equal statistics, gives exactly
/// symmetric (respectively unit) results.
pub fn local_ssim(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    let num = (2.0 * (mu_a * mu_b) + C1) * (2.0 * cov + C2);
    let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
    num / den
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim_with_window(a, b, WINDOW)
}

/// Symmetric `m x m` matrix of SSIM between operating conditions at one
/// collection state, with a unit diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub m: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_fn(m: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = vec![1.0; m * m];
        for i in 0..m {
            for j in i + 1..m {
                let v = f(i, j);
                values[i * m + j] = v;
                values[j * m + i] = v;
            }
        }
        Self { m, values }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    /// Mean over ordered off-diagonal pairs.
    pub fn mean_off_diagonal(&self) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.m {
            for j in 0..self.m {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        sum / (self.m * (self.m - 1)) as f64
    }
}

/// Matrix for one state from `samples[condition][shot]`. With several
/// shots an entry averages SSIM over all shot pairs.
pub fn condition_matrix(samples: &[Vec<&Tensor>]) -> Result<SimilarityMatrix> {
    let m = samples.len();
    if m < 2 {
        return Err(SimilarityError::TooFewConditions(m));
    }
    let mut err = None;
    let matrix = SimilarityMatrix::from_fn(m, |i, j| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for a in &samples[i] {
            for b in &samples[j] {
                match ssim(a, b) {
                    Ok(v) => sum += v,
                    Err(e) => err = Some(e),
                }
                count += 1;
            }
        }
        sum / count.max(1) as f64
    });
    match err {
        Some(e) => Err(e),
        None => Ok(matrix),
    }
}

pub fn cross_condition_matrices(ds: &PreprocessedDataset) -> Result<Vec<SimilarityMatrix>> {
    (0..ds.states.len())
        .map(|z| {
            let samples: Vec<Vec<&Tensor>> = (0..ds.conditions())
                .map(|c| (0..ds.shots).map(|s| ds.get(z, c, s)).collect())
                .collect();
            condition_matrix(&samples)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Negated mean similarity over all states and ordered condition pairs.
    pub r1: f64,
    /// Negated largest per-condition mean similarity.
    pub r2: f64,
    /// `n / 3` for `n` collection states.
    pub n_penalty: f64,
    pub total: f64,
}

/// Reward of a dataset given its per-state similarity matrices.
pub fn reward_from_matrices(matrices: &[&SimilarityMatrix]) -> Result<RewardBreakdown> {
    let n = matrices.len();
    if n == 0 {
        return Err(SimilarityError::Empty);
    }
    let m = matrices[0].m;
    if m < 2 || matrices.iter().any(|s| s.m != m) {
        return Err(SimilarityError::TooFewConditions(m));
    }
    let mut all = 0.0;
    for s in matrices {
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    all += s.get(i, j);
                }
            }
        }
    }
    let r1 = -(all / (n * m * (m - 1)) as f64);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..m {
        let mut row = 0.0;
        for s in matrices {
            for j in 0..m {
                if j != i {
                    row += s.get(i, j);
                }
            }
        }
        worst = worst.max(row / (n * (m - 1)) as f64);
    }
    let r2 = -worst;
    let n_penalty = n as f64 / 3.0;
    Ok(RewardBreakdown {
        r1,
        r2,
        n_penalty,
        total: r1 + r2 - n_penalty,
    })
}

pub fn reward(ds: &PreprocessedDataset) -> Result<RewardBreakdown> {
    let matrices = cross_condition_matrices(ds)?;
    reward_from_matrices(&matrices.iter().collect::<Vec<_>>())
}
