//! Per-epoch metric rows and their CSV form.

use serde::{Deserialize, Serialize};

/// Column order of `metrics.csv`. Changing it is a format change.
pub const CSV_COLUMNS: [&str; 10] = [
    "epoch",
    "clean_acc",
    "robust_acc",
    "F_B",
    "F_R",
    "F_O",
    "gen_steps",
    "loss_passes",
    "wall_ms",
    "F_R_estimate",
];

pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Empty on epochs without evaluation.
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub f_b: f64,
    pub f_r: f64,
    pub f_o: f64,
    pub gen_steps: u64,
    pub loss_passes: u64,
    pub wall_ms: Option<u128>,
    pub f_r_estimate: f64,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        [
            self.epoch.to_string(),
            opt(self.clean_acc),
            opt(self.robust_acc),
            self.f_b.to_string(),
            self.f_r.to_string(),
            self.f_o.to_string(),
            self.gen_steps.to_string(),
            self.loss_passes.to_string(),
            opt(self.wall_ms),
            self.f_r_estimate.to_string(),
        ]
        .join(",")
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}
