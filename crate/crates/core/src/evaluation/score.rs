use crate::error::{Error, Result};

pub const DEFAULT_SPLITS: usize = 10;

/// `exp(E_x KL(p(y|x) || p(y)))` per split, returned as `(mean, std)` over
/// splits. Images beyond `n_splits * (len / n_splits)` are dropped.
pub fn discriminability_score(class_probs: &[Vec<f64>], n_splits: usize) -> Result<(f64, f64)> {
    if n_splits == 0 {
        return Err(Error::Validation("n_splits must be at least 1".into()));
    }
    let k = class_probs
        .first()
        .ok_or_else(|| Error::Validation("no probability vectors".into()))?
        .len();
    for (i, p) in class_probs.iter().enumerate() {
        if p.len() != k {
            return Err(Error::Validation(format!("vector {i} has {} entries, expected {k}", p.len())));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("vector {i} is not a probability distribution (sum {sum})")));
        }
    }
    let size = class_probs.len() / n_splits;
    if size == 0 {
        return Err(Error::Validation(format!(
            "{} vectors cannot fill {n_splits} splits",
            class_probs.len()
        )));
    }
    let scores: Vec<f64> = class_probs
        .chunks_exact(size)
        .take(n_splits)
        .map(|split| {
            let mut marginal = vec![0.0; k];
            for p in split {
                for (m, v) in marginal.iter_mut().zip(p) {
                    *m += v / split.len() as f64;
                }
            }
            let mean_kl: f64 = split
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(v, _)| **v > 0.0)
                        .map(|(v, m)| v * (v / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / split.len() as f64;
            mean_kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    Ok((mean, var.sqrt()))
}
