//! Training metric log as CSV.

use convformer_core::train::MetricRow;

use crate::format::sig6;

pub const HEADER: &str = "step,loss,accuracy";

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, sig6(r.loss), sig6(r.accuracy)));
    }
    out
}
