//! Component ablation harness: trains the four architecture variants on one
//! prepared dataset and reports a component-indicator table.

use serde::Serialize;

use super::{evaluate, train, History, MetricsReport, TrainConfig};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::preprocess::PreparedData;
use crate::seeds;

/// One ablation run: component switches plus its held-out metrics.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub number: usize,
    pub use_cnn: bool,
    pub use_gru: bool,
    pub use_attention: bool,
    pub report: MetricsReport,
    pub history: History,
}

/// Trains {CNN}, {GRU}, {CNN+GRU}, {CNN+GRU+Attn} on the same prepared
/// split (identical data, seeds derived per row) and evaluates each on the
/// shared test set.
pub fn run_ablation(
    prepared: &PreparedData,
    base: &ModelConfig,
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let switches = [
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (true, true, true),
    ];
    let mut rows = Vec::with_capacity(switches.len());
    for (i, &(use_cnn, use_gru, use_attention)) in switches.iter().enumerate() {
        let model_config = ModelConfig {
            use_cnn,
            use_gru,
            use_attention,
            ..base.clone()
        };
        let mut model = Model::build(
            model_config,
            seeds::derive(config.seed, &format!("ablation-init/{i}")),
        )?;
        let history = train(&mut model, &prepared.train, config, &prepared.class_weights)?;
        let report = evaluate(&model, &prepared.test)?;
        rows.push(AblationRow {
            number: i + 1,
            use_cnn,
            use_gru,
            use_attention,
            report,
            history,
        });
    }
    Ok(rows)
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        " "
    }
}

/// Aligned plain-text table with the four-row component-indicator structure
/// (headline metrics are the weighted variants).
pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<4} {:<4} {:<4} {:<5} {:>9} {:>10} {:>8} {:>9}\n",
        "No.", "CNN", "GRU", "Attn.", "Accuracy", "Precision", "Recall", "F1-Score"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<4} {:<4} {:<4} {:<5} {:>9.4} {:>10.4} {:>8.4} {:>9.4}\n",
            row.number,
            mark(row.use_cnn),
            mark(row.use_gru),
            mark(row.use_attention),
            row.report.accuracy,
            row.report.weighted_precision,
            row.report.weighted_recall,
            row.report.weighted_f1,
        ));
    }
    out
}
