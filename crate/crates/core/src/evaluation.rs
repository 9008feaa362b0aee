//! Clustering accuracy under the best one-to-one cluster/label matching,
//! and label-free model selection by distortion.

use crate::clustering::ClusterState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `mapping[cluster] = label`; a bijection on `0..K`.
    pub mapping: Vec<usize>,
    pub matched: usize,
    pub distortion: Option<f64>,
    pub per_cluster_sizes: Vec<usize>,
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, `O(n³)`). Returns `row → column`.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost[r0 - 1][col - 1] - u[r0] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[owner[col] - 1] = col - 1;
    }
    assignment
}

/// Maximum-weight perfect matching, `row → column`.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<usize> {
    let cost: Vec<Vec<f64>> = weights
        .iter()
        .map(|row| row.iter().map(|w| -w).collect())
        .collect();
    hungarian_min(&cost)
}

/// `K × K` table, `table[cluster][label]` = co-occurrence count.
pub fn contingency(labels: &[usize], assignments: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != assignments.len() {
        return Err(Error::mismatch(
            format!("{} assignments", labels.len()),
            assignments.len(),
        ));
    }
    let mut table = vec![vec![0usize; k]; k];
    for (&l, &a) in labels.iter().zip(assignments) {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, k });
        }
        if a >= k {
            return Err(Error::LabelOutOfRange { label: a, k });
        }
        table[a][l] += 1;
    }
    Ok(table)
}

/// Fraction of samples whose cluster maps to their label under the best
/// bijection between clusters and labels.
pub fn clustering_accuracy(
    labels: &[usize],
    assignments: &[usize],
    k: usize,
) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    let table = contingency(labels, assignments, k)?;
    let weights: Vec<Vec<f64>> = table
        .iter()
        .map(|row| row.iter().map(|&c| c as f64).collect())
        .collect();
    let mapping = hungarian_max(&weights);
    let matched: usize = mapping.iter().enumerate().map(|(c, &l)| table[c][l]).sum();
    Ok(EvalReport {
        accuracy: matched as f64 / labels.len() as f64,
        mapping,
        matched,
        distortion: None,
        per_cluster_sizes: table.iter().map(|row| row.iter().sum()).collect(),
    })
}

/// Sum of cached distances of the samples to their assigned centroids.
pub fn distortion(state: &ClusterState) -> f64 {
    state.distortion()
}

/// One cell of a hyperparameter sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun<H> {
    pub params: H,
    pub distortion: f64,
    pub accuracy: Option<f64>,
}

/// The run with the lowest final distortion (first one on ties).
pub fn crossval_select<H>(runs: &[SweepRun<H>]) -> Result<&SweepRun<H>> {
    runs.iter()
        .reduce(|best, r| {
            if r.distortion < best.distortion {
                r
            } else {
                best
            }
        })
        .ok_or(Error::EmptyInput("sweep runs"))
}

/// Pearson correlation coefficient. `NaN` when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}
