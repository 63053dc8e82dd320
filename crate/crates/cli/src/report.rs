//! Cost report rendering for `count`.
//!
//! The structured form is a JSON object:
//!
//! ```text
//! {
//!   "model": "convformer-s",         preset name or file:<path>
//!   "ablation": "no-gating" | null,
//!   "config_digest": "<64 hex>",
//!   "convention": "...",             how MACs and params are counted
//!   "input": [224, 224] | null,      null for a params-only report
//!   "total_params": 26542376,
//!   "total_macs": 5032011776,
//!   "modules": [{"path", "params", "macs"}, ...],
//!   "layers":  [{"path", "params", "macs"}, ...]
//! }
//! ```

use std::fmt::Write;

use convformer_core::accounting::{CostEntry, CostReport, CONVENTION};
use serde::Serialize;

use crate::format::sig6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountDocument {
    pub model: String,
    pub ablation: Option<String>,
    pub config_digest: String,
    pub convention: String,
    pub input: Option<[usize; 2]>,
    pub total_params: u64,
    pub total_macs: u64,
    pub modules: Vec<CostEntry>,
    pub layers: Vec<CostEntry>,
}

impl CountDocument {
    pub fn new(model: String, ablation: Option<String>, config_digest: String, report: &CostReport) -> Self {
        CountDocument {
            model,
            ablation,
            config_digest,
            convention: CONVENTION.to_string(),
            input: report.input.map(|(h, w)| [h, w]),
            total_params: report.total_params,
            total_macs: report.total_macs,
            modules: report.by_module(),
            layers: report.entries.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self, report: &CostReport) -> String {
        let mut out = String::new();
        writeln!(out, "model {}", self.model).unwrap();
        writeln!(out, "ablation {}", self.ablation.as_deref().unwrap_or("none")).unwrap();
        writeln!(out, "config_digest {}", self.config_digest).unwrap();
        write!(out, "{report}").unwrap();
        writeln!(out, "params {} M", sig6(self.total_params as f64 / 1e6)).unwrap();
        if self.input.is_some() {
            writeln!(out, "macs {} G", sig6(self.total_macs as f64 / 1e9)).unwrap();
        }
        out
    }
}
