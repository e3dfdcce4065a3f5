use serde::{Deserialize, Serialize};

/// Metrics this crate never computes; every report lists them.
pub const EXCLUDED_METRICS: &[&str] = &["meteor"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub step: u64,
    pub metrics: MetricSet,
    pub beam: usize,
    pub n_items: usize,
    pub seed: u64,
    #[serde(default = "excluded")]
    pub excluded_metrics: Vec<String>,
}

fn excluded() -> Vec<String> {
    EXCLUDED_METRICS.iter().map(|s| s.to_string()).collect()
}

impl EvalReport {
    pub fn new(dataset: &str, split: &str, step: u64, metrics: MetricSet, beam: usize, n_items: usize, seed: u64) -> Self {
        Self {
            dataset: dataset.to_string(),
            split: split.to_string(),
            step,
            metrics,
            beam,
            n_items,
            seed,
            excluded_metrics: excluded(),
        }
    }

    /// Validation selection metric: accuracy when present, else CIDEr-D.
    pub fn selection_metric(&self) -> f64 {
        self.metrics.accuracy.unwrap_or(self.metrics.cider_d)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
