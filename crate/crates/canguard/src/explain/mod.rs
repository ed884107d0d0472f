//! Model interpretability: attention-weight export, Kernel SHAP byte
//! attribution, and permutation importance.

mod shap;

pub use shap::{kernel_shap, BYTE_FEATURES};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::ClassLabel;
use crate::model::Model;
use crate::preprocess::WindowedDataset;
use crate::training::{confusion_matrix, metrics_from_confusion};
use crate::tensor::Tensor;

/// Attention weights for one window, summing to one over pooled time steps.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionTrace {
    pub window: usize,
    pub predicted: ClassLabel,
    pub weights: Vec<f64>,
}

/// Extracts per-window attention weights and the heatmap matrix
/// (windows x pooled time steps, rows normalized by construction).
pub fn export_attention(
    model: &Model,
    windows: &Tensor,
) -> Result<(Vec<AttentionTrace>, Vec<Vec<f64>>)> {
    if !model.config.use_attention {
        return Err(Error::Unsupported(
            "attention export requires a model built with use_attention".into(),
        ));
    }
    let pred = model.predict(windows)?;
    let attention = pred
        .attention
        .as_ref()
        .expect("attention-enabled model returns weights");
    let t_att = attention.shape()[1];
    let labels = pred.labels();
    let mut traces = Vec::with_capacity(labels.len());
    let mut heatmap = Vec::with_capacity(labels.len());
    for (i, &predicted) in labels.iter().enumerate() {
        let row = attention.data()[i * t_att..(i + 1) * t_att].to_vec();
        traces.push(AttentionTrace {
            window: i,
            predicted,
            weights: row.clone(),
        });
        heatmap.push(row);
    }
    Ok((traces, heatmap))
}

/// Serializes a heatmap matrix as CSV (one row per window).
pub fn heatmap_csv(heatmap: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in heatmap {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Per-byte macro-F1 drop when the byte's column is shuffled across windows
/// (one permutation per repeat, applied at every time step), averaged over
/// `n_repeats`. Deterministic per seed.
pub fn permutation_importance(
    model: &Model,
    test: &WindowedDataset,
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if test.is_empty() {
        return Err(Error::Data("permutation_importance: empty test set".into()));
    }
    if n_repeats == 0 {
        return Err(Error::Config("permutation_importance: n_repeats must be positive".into()));
    }
    let truth = test.label_indices();
    let classes = model.config.num_classes;
    let metric = |windows: &Tensor| -> Result<f64> {
        let pred = model.predict(windows)?;
        Ok(metrics_from_confusion(confusion_matrix(&truth, &pred.argmax(), classes)?).macro_f1)
    };
    let baseline = metric(&test.windows)?;

    let (n, t, f) = (test.len(), test.t(), test.f());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut importance = vec![0.0; f];
    for (feature, imp) in importance.iter_mut().enumerate() {
        let mut drop_total = 0.0;
        for _ in 0..n_repeats {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut data = test.windows.data().to_vec();
            for (i, &src) in perm.iter().enumerate() {
                for step in 0..t {
                    data[(i * t + step) * f + feature] =
                        test.windows.data()[(src * t + step) * f + feature];
                }
            }
            let shuffled = Tensor::new(vec![n, t, f], data)?;
            drop_total += baseline - metric(&shuffled)?;
        }
        *imp = drop_total / n_repeats as f64;
    }
    Ok(importance)
}

/// Attribution method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    KernelShap,
    Permutation,
}

/// Aggregated per-byte importance report.
#[derive(Debug, Clone, Serialize)]
pub struct AttributionReport {
    pub method: AttributionMethod,
    /// `DATA_0`..`DATA_7` to nonnegative importance (mean absolute Shapley
    /// value, or metric drop clamped at zero for permutation importance).
    pub importance: BTreeMap<String, f64>,
    pub sample_count: usize,
    pub seed: u64,
    pub background: String,
}

impl AttributionReport {
    /// Byte indices sorted by descending importance.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..BYTE_FEATURES).collect();
        order.sort_by(|&a, &b| {
            let va = self.importance[&format!("DATA_{a}")];
            let vb = self.importance[&format!("DATA_{b}")];
            vb.total_cmp(&va).then(a.cmp(&b))
        });
        order
    }
}

/// Background reference for SHAP: the dataset's per-feature mean frame,
/// tiled over the window length.
pub fn mean_background(ds: &WindowedDataset) -> Result<Tensor> {
    if ds.is_empty() {
        return Err(Error::Data("mean_background: empty dataset".into()));
    }
    let (t, f) = (ds.t(), ds.f());
    let mut mean = vec![0.0; f];
    for (i, v) in ds.windows.data().iter().enumerate() {
        mean[i % f] += v;
    }
    let count = (ds.len() * t) as f64;
    for m in &mut mean {
        *m /= count;
    }
    let mut data = Vec::with_capacity(t * f);
    for _ in 0..t {
        data.extend_from_slice(&mean);
    }
    Tensor::new(vec![t, f], data)
}

/// Parameters for [`build_attribution_report`].
#[derive(Debug, Clone)]
pub struct AttributionParams {
    /// Windows sampled for SHAP aggregation.
    pub n_samples: usize,
    pub n_coalitions: usize,
    pub n_repeats: usize,
}

impl Default for AttributionParams {
    fn default() -> Self {
        Self {
            n_samples: 32,
            n_coalitions: 256,
            n_repeats: 3,
        }
    }
}

/// Builds the per-byte importance report over a dataset.
///
/// Kernel SHAP aggregates mean `|phi|` over a seeded sample of windows
/// against the dataset-mean background; permutation importance scores the
/// whole set. Values are nonnegative by construction (permutation drops are
/// clamped at zero).
pub fn build_attribution_report(
    model: &Model,
    ds: &WindowedDataset,
    method: AttributionMethod,
    params: &AttributionParams,
    seed: u64,
) -> Result<AttributionReport> {
    if ds.is_empty() {
        return Err(Error::Data("build_attribution_report: empty dataset".into()));
    }
    let (values, sample_count, background) = match method {
        AttributionMethod::KernelShap => {
            let background = mean_background(ds)?;
            let mut indices: Vec<usize> = (0..ds.len()).collect();
            if params.n_samples < ds.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                indices.shuffle(&mut rng);
                indices.truncate(params.n_samples);
                indices.sort_unstable();
            }
            let (t, f) = (ds.t(), ds.f());
            let mut acc = vec![0.0; BYTE_FEATURES];
            for &i in &indices {
                let window = Tensor::new(vec![t, f], ds.window(i).to_vec())?;
                let phi = kernel_shap(model, &window, &background, params.n_coalitions, seed)?;
                for (a, p) in acc.iter_mut().zip(&phi) {
                    *a += p.abs();
                }
            }
            for a in &mut acc {
                *a /= indices.len() as f64;
            }
            (acc, indices.len(), "dataset per-feature mean frame".to_string())
        }
        AttributionMethod::Permutation => {
            let imp = permutation_importance(model, ds, params.n_repeats, seed)?;
            (
                imp.into_iter().map(|v| v.max(0.0)).collect(),
                ds.len(),
                "column permutation across windows".to_string(),
            )
        }
    };
    Ok(AttributionReport {
        method,
        importance: values
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("DATA_{i}"), v))
            .collect(),
        sample_count,
        seed,
        background,
    })
}

/// Plain-text bar chart of a report.
pub fn render_attribution(report: &AttributionReport) -> String {
    let max = report
        .importance
        .values()
        .cloned()
        .fold(f64::EPSILON, f64::max);
    let mut out = format!(
        "method {:?} | samples {} | seed {} | background: {}\n",
        report.method, report.sample_count, report.seed, report.background
    );
    for i in 0..BYTE_FEATURES {
        let key = format!("DATA_{i}");
        let v = report.importance[&key];
        let bar = "#".repeat(((v / max) * 40.0).round() as usize);
        out.push_str(&format!("{key:<7} {v:>10.6} {bar}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::preprocess::Provenance;

    fn test_model(use_attention: bool) -> Model {
        let config = ModelConfig {
            conv_filters: vec![3, 4],
            gru_units: vec![3],
            dense_units: vec![6],
            use_attention,
            dropout: 0.0,
            recurrent_dropout: 0.0,
            t: 4,
            f: 8,
            ..Default::default()
        };
        Model::build(config, 23).unwrap()
    }

    fn toy_ds(n: usize) -> WindowedDataset {
        let data = (0..n * 4 * 8).map(|i| ((i * 13) as f64 * 0.17).sin()).collect();
        WindowedDataset {
            windows: Tensor::new(vec![n, 4, 8], data).unwrap(),
            labels: (0..n)
                .map(|i| ClassLabel::from_index(i % 3).unwrap())
                .collect(),
            provenance: vec![Provenance::Real; n],
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = test_model(true);
        let ds = toy_ds(5);
        let (traces, heatmap) = export_attention(&model, &ds.windows).unwrap();
        assert_eq!(traces.len(), 5);
        for row in &heatmap {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn attention_export_requires_attention_model() {
        let model = test_model(false);
        let ds = toy_ds(2);
        let err = export_attention(&model, &ds.windows).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn zero_scoring_attention_is_uniform() {
        let mut model = test_model(true);
        for p in model.params_mut().iter_mut() {
            if p.name.starts_with("attention") {
                p.tensor = Tensor::zeros(p.tensor.shape().to_vec()).with_requires_grad();
            }
        }
        let ds = toy_ds(3);
        let (_, heatmap) = export_attention(&model, &ds.windows).unwrap();
        let t_att = heatmap[0].len();
        for row in &heatmap {
            for &v in row {
                assert!((v - 1.0 / t_att as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_column_has_zero_permutation_importance() {
        let model = test_model(true);
        let mut ds = toy_ds(12);
        // Make byte 3 constant across all windows and steps.
        let (n, t, f) = (ds.len(), ds.t(), ds.f());
        let mut data = ds.windows.data().to_vec();
        for i in 0..n {
            for step in 0..t {
                data[(i * t + step) * f + 3] = 0.42;
            }
        }
        ds.windows = Tensor::new(vec![n, t, f], data).unwrap();
        let imp = permutation_importance(&model, &ds, 2, 7).unwrap();
        assert_eq!(imp[3], 0.0);
    }

    #[test]
    fn single_window_shap_report_equals_window_phi() {
        let model = test_model(true);
        let ds = toy_ds(1);
        let params = AttributionParams {
            n_samples: 1,
            ..Default::default()
        };
        let report =
            build_attribution_report(&model, &ds, AttributionMethod::KernelShap, &params, 5)
                .unwrap();
        let background = mean_background(&ds).unwrap();
        let window = Tensor::new(vec![4, 8], ds.window(0).to_vec()).unwrap();
        let phi = kernel_shap(&model, &window, &background, 256, 5).unwrap();
        for (i, p) in phi.iter().enumerate() {
            let got = report.importance[&format!("DATA_{i}")];
            assert!((got - p.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn report_is_deterministic_per_seed() {
        let model = test_model(true);
        let ds = toy_ds(10);
        let params = AttributionParams {
            n_samples: 4,
            ..Default::default()
        };
        let a = build_attribution_report(&model, &ds, AttributionMethod::KernelShap, &params, 9)
            .unwrap();
        let b = build_attribution_report(&model, &ds, AttributionMethod::KernelShap, &params, 9)
            .unwrap();
        assert_eq!(a.importance, b.importance);
        assert_eq!(a.sample_count, 4);
    }

    #[test]
    fn ranking_orders_by_importance() {
        let mut importance = BTreeMap::new();
        for i in 0..8 {
            importance.insert(format!("DATA_{i}"), i as f64 * 0.1);
        }
        importance.insert("DATA_4".into(), 10.0);
        let report = AttributionReport {
            method: AttributionMethod::Permutation,
            importance,
            sample_count: 1,
            seed: 0,
            background: String::new(),
        };
        let ranking = report.ranking();
        assert_eq!(ranking[0], 4);
        assert_eq!(ranking[1], 7);
    }
}
