use super::BenchError;

/// Unweighted mean of per-class F1 over `0..class_count`. A class with
/// neither predictions nor true members scores 0.
pub fn macro_f1(preds: &[usize], truth: &[usize], class_count: usize) -> Result<f64, BenchError> {
    if preds.len() != truth.len() {
        return Err(BenchError::Invalid(format!(
            "length mismatch: {} predictions, {} labels",
            preds.len(),
            truth.len()
        )));
    }
    if class_count == 0 {
        return Err(BenchError::Invalid("class count must be positive".into()));
    }
    if let Some(bad) = preds.iter().chain(truth).find(|&&l| l >= class_count) {
        return Err(BenchError::Invalid(format!("label {bad} out of range")));
    }
    let mut tp = vec![0usize; class_count];
    let mut pred_n = vec![0usize; class_count];
    let mut true_n = vec![0usize; class_count];
    for (&p, &t) in preds.iter().zip(truth) {
        pred_n[p] += 1;
        true_n[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let total: f64 = (0..class_count)
        .map(|k| {
            // 2PR/(P+R) reduces to 2tp/(pred + true)
            let denom = pred_n[k] + true_n[k];
            if tp[k] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / class_count as f64)
}
