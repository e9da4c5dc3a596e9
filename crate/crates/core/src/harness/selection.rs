use std::collections::HashSet;

use crate::error::{Error, Result};

use super::{TrainLog, ValidationRecord};

/// The `k` distinct validated prompts with the highest metric. Ties go to the
/// earlier step; a prompt seen several times keeps its best record.
pub fn select_top_prompts(log: &TrainLog, k: usize) -> Result<Vec<(u64, ValidationRecord)>> {
    let mut all: Vec<(u64, &ValidationRecord)> = log.validations().collect();
    all.sort_by(|a, b| b.1.metric.total_cmp(&a.1.metric).then(a.0.cmp(&b.0)));
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    for (step, v) in all {
        if seen.insert(v.prompt_text.as_str()) {
            out.push((step, v.clone()));
        }
    }
    if out.len() < k {
        return Err(Error::InsufficientHistory {
            available: out.len(),
            requested: k,
        });
    }
    out.truncate(k);
    Ok(out)
}
