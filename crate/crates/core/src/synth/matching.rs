// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::planted::PlantedDictionary;
use crate::analysis::{classify, delta_norm, Category};
use crate::crosscoder::{CrosscoderParams, Model};
use crate::linalg::Matrix;
use crate::math::cosine;
use crate::{Error, Result};

/// Largest side solved exactly; bigger problems fall back to greedy.
pub const EXACT_LIMIT: usize = 2048;

/// `scores[j][i]`: mean cosine between truth feature `j` and learned feature
/// `i` over the models where the truth direction is nonzero. A zero learned
/// row scores 0 in that model.
pub fn match_scores(learned: &CrosscoderParams, truth: &PlantedDictionary) -> Result<Matrix> {
    if learned.d_a() != truth.dirs_a.cols() || learned.d_b() != truth.dirs_b.cols() {
        return Err(Error::Shape {
            op: "match_scores",
            lhs: (learned.d_a(), learned.d_b()),
            rhs: (truth.dirs_a.cols(), truth.dirs_b.cols()),
        });
    }
    let nt = truth.n_features();
    let k = learned.n_features();
    let mut s = Matrix::zeros(nt, k);
    for j in 0..nt {
        let spaces: Vec<(Model, &[f64])> = [(Model::A, truth.dirs_a.row(j)), (Model::B, truth.dirs_b.row(j))]
            .into_iter()
            .filter(|(_, t)| t.iter().any(|&v| v != 0.0))
            .collect();
        if spaces.is_empty() {
            continue;
        }
        for i in 0..k {
            let total: f64 = spaces
                .iter()
                .map(|&(m, t)| cosine(learned.decoder_row(m, i), t).unwrap_or(0.0))
                .sum();
            s.set(j, i, total / spaces.len() as f64);
        }
    }
    Ok(s)
}

/// One-to-one assignment maximizing the summed score. Entry `r` is the
/// column given to row `r`; rows beyond the column count may stay `None`.
pub fn assign(scores: &Matrix) -> Vec<Option<usize>> {
    let (n, m) = scores.shape();
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n.max(m) > EXACT_LIMIT {
        return greedy(scores);
    }
    if n <= m {
        hungarian(scores)
    } else {
        let cols = hungarian(&scores.transpose());
        let mut rows = vec![None; n];
        for (c, r) in cols.into_iter().enumerate() {
            if let Some(r) = r {
                rows[r] = Some(c);
            }
        }
        rows
    }
}

pub fn assignment_value(scores: &Matrix, assignment: &[Option<usize>]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| scores.get(r, c)))
        .sum()
}

/// Shortest-augmenting-path Hungarian method with potentials; `n <= m`.
fn hungarian(scores: &Matrix) -> Vec<Option<usize>> {
    let (n, m) = scores.shape();
    let cost = |i: usize, j: usize| -scores.get(i - 1, j - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

fn greedy(scores: &Matrix) -> Vec<Option<usize>> {
    let (n, m) = scores.shape();
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..m).map(move |c| (r, c))).collect();
    pairs.sort_by(|a, b| scores.get(b.0, b.1).total_cmp(&scores.get(a.0, a.1)).then(a.cmp(b)));
    let mut row = vec![None; n];
    let mut col_used = vec![false; m];
    let mut left = n.min(m);
    for (r, c) in pairs {
        if left == 0 {
            break;
        }
        if row[r].is_none() && !col_used[c] {
            row[r] = Some(c);
            col_used[c] = true;
            left -= 1;
        }
    }
    row
}

/// Best learned partner and its score for every planted feature.
pub fn match_features(learned: &CrosscoderParams, truth: &PlantedDictionary) -> Result<Vec<Option<(usize, f64)>>> {
    let s = match_scores(learned, truth)?;
    Ok(assign(&s)
        .into_iter()
        .enumerate()
        .map(|(j, c)| c.map(|i| (i, s.get(j, i))))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryMetrics {
    pub n_truth: usize,
    pub threshold: f64,
    /// Planted features matched with score at or above the threshold.
    pub recovered: usize,
    pub rate: f64,
    pub mean_matched_score: f64,
    /// Recovered features whose Δ band equals the planted category.
    pub correctly_classified: usize,
    pub accuracy: f64,
    /// `confusion[truth][predicted]` over recovered features, indexed
    /// moe_only, shared, dense_only.
    pub confusion: [[usize; 3]; 3],
}

pub fn recovery_metrics(
    assignment: &[Option<(usize, f64)>],
    learned: &CrosscoderParams,
    truth: &PlantedDictionary,
    threshold: f64,
) -> Result<RecoveryMetrics> {
    let deltas = delta_norm(learned);
    let mut confusion = [[0usize; 3]; 3];
    let (mut recovered, mut correct) = (0, 0);
    let mut score_sum = 0.0;
    let mut matched = 0;
    for (j, m) in assignment.iter().enumerate() {
        let Some((i, score)) = *m else { continue };
        matched += 1;
        score_sum += score;
        if score < threshold {
            continue;
        }
        recovered += 1;
        let want: Category = truth.category(j);
        let got = classify(deltas[i].value)?;
        confusion[want.index()][got.index()] += 1;
        if want == got {
            correct += 1;
        }
    }
    let n = truth.n_features();
    Ok(RecoveryMetrics {
        n_truth: n,
        threshold,
        recovered,
        rate: if n == 0 { 0.0 } else { recovered as f64 / n as f64 },
        mean_matched_score: if matched == 0 { 0.0 } else { score_sum / matched as f64 },
        correctly_classified: correct,
        accuracy: if recovered == 0 { 0.0 } else { correct as f64 / recovered as f64 },
        confusion,
    })
}
