//! Borderline SMOTE (borderline-1) over flattened windows.
//!
//! Windows are flattened to `T*F` vectors before oversampling and reshaped
//! back afterwards. For each minority class, a sample is in the DANGER set
//! when, among its `m_danger` nearest neighbors across the whole training
//! set, more than half but not all belong to other classes. Synthetic
//! vectors interpolate from a DANGER sample toward one of its `k_synth`
//! nearest same-class neighbors: `x + u * (x_nn - x)`, `u` uniform in [0, 1).
//!
//! Neighbor ties break by ascending sample index, so results are independent
//! of the internal parallelism.

use std::collections::BTreeMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::ClassLabel;
use crate::tensor::Tensor;

use super::{Provenance, WindowedDataset};

/// Squared Euclidean distance (monotone in the true distance, so rankings
/// and ties are unchanged).
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `k` nearest candidates to `query` (excluding `skip`),
/// ties broken by ascending index.
fn k_nearest<'a, F>(query: &[f64], candidates: &[usize], vectors: &F, skip: usize, k: usize) -> Vec<usize>
where
    F: Fn(usize) -> &'a [f64],
{
    // Small fixed-size insertion keeps this O(n * k) with exact tie order.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for &c in candidates {
        if c == skip {
            continue;
        }
        let d = dist_sq(query, vectors(c));
        let pos = best
            .binary_search_by(|&(bd, bi)| bd.total_cmp(&d).then(bi.cmp(&c)))
            .unwrap_or_else(|p| p);
        if pos < k {
            best.insert(pos, (d, c));
            best.truncate(k);
        }
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Oversamples minority classes up to `target_counts` per class. Classes at
/// or above their target are untouched; classes with fewer than
/// `k_synth + 1` samples are skipped with a warning (class weights
/// compensate downstream). Deterministic per seed.
pub fn borderline_smote(
    train: &WindowedDataset,
    target_counts: &BTreeMap<ClassLabel, usize>,
    m_danger: usize,
    k_synth: usize,
    seed: u64,
) -> Result<WindowedDataset> {
    if m_danger == 0 || k_synth == 0 {
        return Err(Error::Config(
            "borderline_smote: m_danger and k_synth must be positive".into(),
        ));
    }
    let n = train.len();
    let dim = train.t() * train.f();
    let get = |i: usize| train.window(i);
    let all: Vec<usize> = (0..n).collect();

    let mut new_data: Vec<f64> = Vec::new();
    let mut new_labels: Vec<ClassLabel> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for class in ClassLabel::ALL {
        let target = match target_counts.get(&class) {
            Some(&t) => t,
            None => continue,
        };
        let members: Vec<usize> = (0..n).filter(|&i| train.labels[i] == class).collect();
        let current = members.len();
        if current == 0 || target <= current {
            continue;
        }
        if current < k_synth + 1 {
            warn!(
                "class {class} has {current} sample(s), fewer than k_synth + 1 = {}; \
                 skipping SMOTE (class weights compensate)",
                k_synth + 1
            );
            continue;
        }

        // DANGER classification against the full training set.
        let danger: Vec<usize> = members
            .par_iter()
            .filter(|&&i| {
                let neighbors = k_nearest(get(i), &all, &get, i, m_danger);
                let others = neighbors
                    .iter()
                    .filter(|&&j| train.labels[j] != class)
                    .count();
                others * 2 > m_danger && others < m_danger
            })
            .copied()
            .collect();

        let base: &[usize] = if danger.is_empty() {
            warn!("class {class}: empty DANGER set; falling back to plain SMOTE over the class");
            &members
        } else {
            &danger
        };

        // Same-class neighbor lists for every base sample.
        let neighbor_lists: Vec<Vec<usize>> = base
            .par_iter()
            .map(|&i| k_nearest(get(i), &members, &get, i, k_synth))
            .collect();

        let needed = target - current;
        for s in 0..needed {
            let b = s % base.len();
            let x = get(base[b]);
            let nn_list = &neighbor_lists[b];
            let x_nn = get(nn_list[rng.gen_range(0..nn_list.len())]);
            let u: f64 = rng.gen();
            new_data.extend(x.iter().zip(x_nn).map(|(a, bv)| a + u * (bv - a)));
            new_labels.push(class);
        }
    }

    let total = n + new_labels.len();
    let mut data = Vec::with_capacity(total * dim);
    data.extend_from_slice(train.windows.data());
    data.extend_from_slice(&new_data);
    let mut labels = train.labels.clone();
    labels.extend_from_slice(&new_labels);
    let mut provenance = train.provenance.clone();
    provenance.extend(std::iter::repeat(Provenance::SyntheticSmote).take(new_labels.len()));

    Ok(WindowedDataset {
        windows: Tensor::new(vec![total, train.t(), train.f()], data)?,
        labels,
        provenance,
    })
}
