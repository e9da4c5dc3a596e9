use crate::error::{Error, Result};

/// `(J, GM)`: J is the mean per-sentence product of the three scores, GM the
/// geometric mean of the three aspect means.
pub fn joint_score(content: &[f64], style: &[f64], fluency: &[f64]) -> Result<(f64, f64)> {
    let n = content.len();
    if n == 0 || style.len() != n || fluency.len() != n {
        return Err(Error::LengthMismatch(format!(
            "content {}, style {}, fluency {} (need equal and non-zero)",
            n,
            style.len(),
            fluency.len()
        )));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / n as f64;
    let j = (0..n).map(|i| content[i] * style[i] * fluency[i]).sum::<f64>() / n as f64;
    let gm = (mean(content) * mean(style) * mean(fluency)).cbrt();
    Ok((j, gm))
}

/// Placeholder fluency scorer: every sentence counts as fluent.
pub fn unit_fluency<S: AsRef<str>>(outputs: &[S]) -> Vec<f64> {
    vec![1.0; outputs.len()]
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Mean recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let recalls: Vec<f64> = (0..num_classes)
        .filter(|&c| total[c] > 0)
        .map(|c| hit[c] as f64 / total[c] as f64)
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}
