//! Small dense-vector helpers.

pub fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    norm_sq(x).sqrt()
}

/// Coordinate-wise mean of equally sized vectors.
pub fn mean<M: AsRef<[f64]>>(models: &[M]) -> Vec<f64> {
    let d = models[0].as_ref().len();
    let mut mu = vec![0.0; d];
    for m in models {
        mu.iter_mut().zip(m.as_ref()).for_each(|(a, b)| *a += b);
    }
    let n = models.len() as f64;
    mu.iter_mut().for_each(|a| *a /= n);
    mu
}

/// `sum_i ||x_i - mu||^2`.
pub fn spread<M: AsRef<[f64]>>(models: &[M], mu: &[f64]) -> f64 {
    models
        .iter()
        .map(|m| m.as_ref().iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}
