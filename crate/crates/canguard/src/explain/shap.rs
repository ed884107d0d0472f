//! Kernel SHAP over payload-byte groups.
//!
//! Attribution features are the 8 byte positions: masking byte `j` replaces
//! its column at every time step with the background column. The explained
//! scalar is the probability the model assigns to the window's predicted
//! class. Coalition values feed a weighted least squares with the Shapley
//! kernel `pi(s) = (M-1) / (C(M,s) * s * (M-s))`; the efficiency constraint
//! is enforced by eliminating the last feature, so the returned values
//! always satisfy `sum(phi) = f(x) - f(background)` up to solver precision.
//! With all `2^8` coalitions enumerated (the default) the solution is the
//! exact Shapley value.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Number of attribution features: the payload byte positions.
pub const BYTE_FEATURES: usize = 8;

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

fn kernel_weight(size: usize, m: usize) -> f64 {
    (m - 1) as f64 / (binomial(m, size) * size as f64 * (m - size) as f64)
}

/// Builds the masked window for a coalition bitmask: bit `j` set takes byte
/// `j` from `x`, clear takes it from `background`.
fn masked_window(x: &Tensor, background: &Tensor, mask: u32) -> Vec<f64> {
    let f = *x.shape().last().unwrap();
    x.data()
        .iter()
        .zip(background.data())
        .enumerate()
        .map(|(i, (xv, bv))| {
            if mask & (1 << (i % f)) != 0 {
                *xv
            } else {
                *bv
            }
        })
        .collect()
}

/// Evaluates the predicted-class probability for a batch of coalition
/// bitmasks in one model call.
fn coalition_values(
    model: &Model,
    x: &Tensor,
    background: &Tensor,
    masks: &[u32],
    class: usize,
) -> Result<Vec<f64>> {
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(masks.len() * t * f);
    for &mask in masks {
        data.extend(masked_window(x, background, mask));
    }
    let batch = Tensor::new(vec![masks.len(), t, f], data)?;
    let pred = model.predict(&batch)?;
    let c = model.config.num_classes;
    Ok(pred
        .probs
        .data()
        .chunks(c)
        .map(|row| row[class])
        .collect())
}

/// Solves `A x = b` with partial pivoting; falls back to a ridge-regularized
/// system when a pivot collapses.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let original = (a.clone(), b.clone());
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 {
            warn!("kernel_shap: singular system; retrying with ridge regularization");
            let (mut ar, br) = original;
            for (i, row) in ar.iter_mut().enumerate() {
                row[i] += 1e-8;
            }
            return solve_ridge(ar, br);
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

fn solve_ridge(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m = a;
    let mut rhs = b;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        if m[pivot_row][col].abs() < 1e-15 {
            return Err(Error::Data(
                "kernel_shap: system singular even after regularization".into(),
            ));
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= factor * m[col][k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}

/// Per-byte Shapley value estimates for one window.
///
/// `window` and `background` are `(T, F)` with `F = 8`. With
/// `n_coalitions >= 254` every non-trivial coalition is enumerated (exact);
/// otherwise `n_coalitions` distinct non-trivial coalitions are sampled
/// (seeded). Fewer than 10 coalitions is rejected.
pub fn kernel_shap(
    model: &Model,
    window: &Tensor,
    background: &Tensor,
    n_coalitions: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let m = BYTE_FEATURES;
    if n_coalitions < 10 {
        return Err(Error::Config(format!(
            "kernel_shap: n_coalitions {n_coalitions} below minimum 10"
        )));
    }
    let expect = [model.config.t, model.config.f];
    if window.shape() != expect || background.shape() != expect {
        return Err(Error::ShapeMismatch {
            op: "kernel_shap",
            lhs: window.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }

    // Predicted class of the unmasked window, fixed for all evaluations.
    let full_mask = (1u32 << m) - 1;
    let batch = Tensor::new(
        vec![1, model.config.t, model.config.f],
        window.data().to_vec(),
    )?;
    let class = model.predict(&batch)?.argmax()[0];

    let max_nontrivial = (1usize << m) - 2;
    let masks: Vec<u32> = if n_coalitions >= max_nontrivial {
        (1..full_mask).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::BTreeSet::new();
        while seen.len() < n_coalitions {
            let candidate = rng.gen_range(1..full_mask);
            seen.insert(candidate);
        }
        seen.into_iter().collect()
    };

    // f over the trivial coalitions plus all regression rows.
    let mut eval_masks = vec![0u32, full_mask];
    eval_masks.extend_from_slice(&masks);
    let values = coalition_values(model, window, background, &eval_masks, class)?;
    let f0 = values[0];
    let fx = values[1];
    let delta = fx - f0;

    // Weighted least squares on M-1 unknowns; the last feature is
    // eliminated through the efficiency constraint.
    let dim = m - 1;
    let mut ata = vec![vec![0.0; dim]; dim];
    let mut atb = vec![0.0; dim];
    for (row, &mask) in masks.iter().enumerate() {
        let size = mask.count_ones() as usize;
        let w = kernel_weight(size, m);
        let z_last = ((mask >> (m - 1)) & 1) as f64;
        let y = (values[row + 2] - f0) - z_last * delta;
        let x_row: Vec<f64> = (0..dim)
            .map(|j| ((mask >> j) & 1) as f64 - z_last)
            .collect();
        for i in 0..dim {
            if x_row[i] == 0.0 {
                continue;
            }
            for j in 0..dim {
                ata[i][j] += w * x_row[i] * x_row[j];
            }
            atb[i] += w * x_row[i] * y;
        }
    }
    let mut phi = solve_linear(ata, atb)?;
    let sum_head: f64 = phi.iter().sum();
    phi.push(delta - sum_head);
    Ok(phi)
}
