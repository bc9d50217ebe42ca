//! Schema alignment against a support set of training tables.
//!
//! Each candidate support table is matched to the input by a maximum-weight
//! assignment over cosine similarities of pair vectors. Matches with negative
//! similarity are discarded, the best-scoring table wins, and the input's
//! aligned attribute embeddings are swapped for the support ones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, Graph, Var};
use crate::encoder::{represent, PairEmbedding, PairRepresentation};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Cosine similarities between input rows and support columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Vec<Vec<f64>>,
    cols: usize,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// `s_ij = cos(v_i, v_j)`, with zero-norm vectors scoring 0.
pub fn similarity_matrix(input: &[Vec<f64>], support: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    if input.is_empty() || support.is_empty() {
        return Err(Error::Index("similarity_matrix: empty representation list".into()));
    }
    let dim = input[0].len();
    if let Some(bad) = input.iter().chain(support).find(|v| v.len() != dim) {
        return Err(Error::shape("similarity_matrix", &[&[dim], &[bad.len()]]));
    }
    let values = input
        .iter()
        .map(|a| support.iter().map(|b| cosine(a, b).unwrap_or(0.0)).collect())
        .collect();
    Ok(SimilarityMatrix {
        values,
        cols: support.len(),
    })
}

/// Row-to-column matching of `min(n, m)` pairs, in ascending row order.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

const TIE_TOLERANCE: f64 = 1e-10;

/// Minimum-cost perfect matching on a square matrix; returns the column of each row.
fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[owner[j] - 1] = j - 1;
    }
    col_of
}

/// Best total weight matching `rows` onto `cols` (equal lengths).
fn best_total(w: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    // per-row shift by the row maximum keeps costs non-negative
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| {
            let top = cols.iter().map(|&j| w[i][j]).fold(f64::NEG_INFINITY, f64::max);
            cols.iter().map(|&j| top - w[i][j]).collect()
        })
        .collect();
    let assign = hungarian_min(&cost);
    rows.iter().zip(assign).map(|(&i, k)| w[i][cols[k]]).sum()
}

/// Maximum-weight assignment of `min(n, m)` pairs.
///
/// Among optimal assignments the lexicographically smallest column sequence
/// (rows ascending) is returned. Rectangular inputs are padded to square with
/// `min entry - 1`; padded pairs are not reported.
pub fn hungarian_max(matrix: &[Vec<f64>]) -> Result<Assignment> {
    let n = matrix.len();
    let m = matrix.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let mut lowest = f64::INFINITY;
    for (i, row) in matrix.iter().enumerate() {
        if row.len() != m {
            return Err(Error::shape("hungarian_max", &[&[m], &[row.len()]]));
        }
        for (j, &x) in row.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NanWeight { row: i, col: j });
            }
            lowest = lowest.min(x);
        }
    }
    let size = n.max(m);
    let pad = lowest - 1.0;
    let w: Vec<Vec<f64>> = (0..size)
        .map(|i| (0..size).map(|j| if i < n && j < m { matrix[i][j] } else { pad }).collect())
        .collect();
    let all: Vec<usize> = (0..size).collect();
    let mut remaining_target = best_total(&w, &all, &all);
    let tol = TIE_TOLERANCE * (1.0 + remaining_target.abs());
    let mut free_cols = all.clone();
    let mut pairs = Vec::new();
    for i in 0..size {
        let rest_rows = &all[i + 1..];
        let mut pick = None;
        for (slot, &j) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != j).collect();
            let value = w[i][j] + best_total(&w, rest_rows, &rest_cols);
            if value >= remaining_target - tol {
                pick = Some(slot);
                break;
            }
        }
        // the optimal column always qualifies; fall back to it if rounding says otherwise
        let slot = pick.unwrap_or(0);
        let j = free_cols.remove(slot);
        remaining_target -= w[i][j];
        if i < n && j < m {
            pairs.push((i, j));
        }
    }
    let total = pairs.iter().map(|&(i, j)| matrix[i][j]).sum();
    Ok(Assignment { pairs, total })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub input: usize,
    pub support: usize,
    pub similarity: f64,
}

/// Kept pairs (all with non-negative similarity) and their summed similarity `r`.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
    pub score: f64,
}

pub fn align_schemas(input: &[Vec<f64>], support: &[Vec<f64>]) -> Result<Alignment> {
    let sim = similarity_matrix(input, support)?;
    let assignment = hungarian_max(sim.values())?;
    let pairs: Vec<AlignedPair> = assignment
        .pairs
        .into_iter()
        .filter(|&(i, j)| sim.get(i, j) >= 0.0)
        .map(|(i, j)| AlignedPair {
            input: i,
            support: j,
            similarity: sim.get(i, j),
        })
        .collect();
    let score = pairs.iter().map(|p| p.similarity).sum();
    Ok(Alignment { pairs, score })
}

/// Index of the support table with the highest alignment score (lowest index on ties).
pub fn select_support(input: &[Vec<f64>], support: &[Vec<Vec<f64>>]) -> Result<(usize, Alignment)> {
    let mut best: Option<(usize, Alignment)> = None;
    for (k, reps) in support.iter().enumerate() {
        let a = align_schemas(input, reps)?;
        if best.as_ref().is_none_or(|(_, b)| a.score > b.score) {
            best = Some((k, a));
        }
    }
    best.ok_or_else(|| Error::Index("select_support: empty support set".into()))
}

/// Input pair embeddings with aligned attribute embeddings taken from the support table.
pub fn replace_embeddings(input: &[PairEmbedding], alignment: &Alignment, support: &[PairEmbedding]) -> Result<Vec<PairEmbedding>> {
    let mut out = input.to_vec();
    for p in &alignment.pairs {
        let target = out
            .get_mut(p.input)
            .ok_or_else(|| Error::Index(format!("input pair {} of {}", p.input, input.len())))?;
        let source = support
            .get(p.support)
            .ok_or_else(|| Error::Index(format!("support pair {} of {}", p.support, support.len())))?;
        target.e_a.clone_from(&source.e_a);
    }
    Ok(out)
}

/// Replaces aligned attribute embeddings and recomputes every pair vector.
pub fn replace_attributes(
    input: &[PairEmbedding],
    alignment: &Alignment,
    support: &[PairEmbedding],
    params: &ModelParams,
) -> Result<Vec<PairRepresentation>> {
    represent(params, &replace_embeddings(input, alignment, support)?)
}

/// Differentiable `r`: the sum of the kept cosines, with the matching held fixed.
///
/// `input_v` and `support_v` are `[n, d]` and `[m, d]` pair-vector nodes.
/// Pairs involving a zero vector contribute a constant 0.
pub fn score_graph(g: &mut Graph, input_v: Var, support_v: Var, alignment: &Alignment) -> Result<Var> {
    let mut terms = Vec::new();
    for p in &alignment.pairs {
        let a = g.row(input_v, p.input)?;
        let b = g.row(support_v, p.support)?;
        if cosine(g.value(a).data(), g.value(b).data()).is_some() {
            terms.push(g.cosine(a, b)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(crate::autodiff::Tensor::scalar(0.0)));
    }
    let stacked = g.concat(&terms)?;
    g.sum(stacked)
}

/// Default support-set size for a training subset of `train_size` tables.
pub fn default_support_size(train_size: usize) -> usize {
    if train_size <= 50 {
        25
    } else {
        50
    }
}

/// Up to `k` distinct pool indices (ascending), never including `exclude`.
pub fn sample_support<R: Rng + ?Sized>(pool: usize, exclude: Option<usize>, k: usize, rng: &mut R) -> Vec<usize> {
    let candidates: Vec<usize> = (0..pool).filter(|&i| Some(i) != exclude).collect();
    let take = k.min(candidates.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), take)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Per-instance alignment report for qualitative inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub id: String,
    pub input_schema: Vec<String>,
    pub support_id: String,
    pub support_schema: Vec<String>,
    /// `(input attribute, support attribute, similarity)`.
    pub pairs: Vec<(String, String, f64)>,
    pub score: f64,
}

impl AlignmentRecord {
    pub fn new(input: &crate::corpus::Table, support: &crate::corpus::Table, alignment: &Alignment) -> Self {
        let a = input.attributes();
        let b = support.attributes();
        AlignmentRecord {
            id: input.id.clone(),
            pairs: alignment
                .pairs
                .iter()
                .map(|p| (a[p.input].clone(), b[p.support].clone(), p.similarity))
                .collect(),
            input_schema: a,
            support_id: support.id.clone(),
            support_schema: b,
            score: alignment.score,
        }
    }
}
