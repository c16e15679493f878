//! Multinomial logistic-regression baseline trained by full-batch gradient
//! descent on the L2-regularized cross-entropy.

use serde::{Deserialize, Serialize};

use crate::domain::N_CLASSES;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticHyper {
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
}

impl Default for LogisticHyper {
    fn default() -> Self {
        LogisticHyper {
            learning_rate: 0.1,
            l2: 1e-4,
            epochs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Row-major (N_CLASSES x n_features) weight matrix.
    pub weights: Vec<f64>,
    pub bias: [f64; N_CLASSES],
    pub n_features: usize,
    pub hyper: LogisticHyper,
}

fn softmax(logits: &mut [f64; N_CLASSES]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

fn logits(weights: &[f64], bias: &[f64; N_CLASSES], row: &[f64]) -> [f64; N_CLASSES] {
    let d = row.len();
    std::array::from_fn(|c| {
        bias[c]
            + weights[c * d..(c + 1) * d]
                .iter()
                .zip(row)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    })
}

/// Mean cross-entropy plus 0.5 * l2 * ||W||^2, with its analytic gradient.
/// Exposed so the gradient can be checked against finite differences.
pub fn loss_and_gradient(
    weights: &[f64],
    bias: &[f64; N_CLASSES],
    x: &Matrix,
    y: &[u8],
    l2: f64,
) -> (f64, Vec<f64>, [f64; N_CLASSES]) {
    let n = x.n_rows();
    let d = x.n_cols;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = [0.0; N_CLASSES];
    for i in 0..n {
        let row = x.row(i);
        let mut p = logits(weights, bias, row);
        softmax(&mut p);
        let target = y[i] as usize - 1;
        loss -= p[target].max(1e-300).ln();
        for c in 0..N_CLASSES {
            let delta = p[c] - (c == target) as usize as f64;
            grad_b[c] += delta;
            for (g, &xj) in grad_w[c * d..(c + 1) * d].iter_mut().zip(row) {
                *g += delta * xj;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    for g in &mut grad_w {
        *g *= inv_n;
    }
    for g in &mut grad_b {
        *g *= inv_n;
    }
    for (g, &w) in grad_w.iter_mut().zip(weights) {
        *g += l2 * w;
    }
    loss += 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>();
    (loss, grad_w, grad_b)
}

/// Full-batch gradient descent from zero-initialized weights for a fixed
/// epoch count. A non-finite loss aborts with the offending epoch.
pub fn fit_logistic(x: &Matrix, y: &[u8], hyper: LogisticHyper) -> Result<LogisticModel> {
    if x.n_rows() == 0 {
        return Err(Error::Fit("cannot fit logistic model on zero rows".into()));
    }
    let d = x.n_cols;
    let mut weights = vec![0.0; N_CLASSES * d];
    let mut bias = [0.0; N_CLASSES];
    for epoch in 0..hyper.epochs {
        let (loss, grad_w, grad_b) = loss_and_gradient(&weights, &bias, x, y, hyper.l2);
        if !loss.is_finite() {
            return Err(Error::Fit(format!(
                "non-finite loss at epoch {epoch}; lower the learning rate"
            )));
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= hyper.learning_rate * g;
        }
        for (b, g) in bias.iter_mut().zip(&grad_b) {
            *b -= hyper.learning_rate * g;
        }
    }
    Ok(LogisticModel {
        weights,
        bias,
        n_features: d,
        hyper,
    })
}

impl LogisticModel {
    pub fn predict_proba(&self, row: &[f64]) -> Result<[f64; N_CLASSES]> {
        if row.len() != self.n_features {
            return Err(Error::Structural(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.n_features
            )));
        }
        let mut p = logits(&self.weights, &self.bias, row);
        softmax(&mut p);
        Ok(p)
    }

    pub fn predict(&self, row: &[f64]) -> Result<u8> {
        let p = self.predict_proba(row)?;
        Ok(crate::learn::tree::argmax_class(&p))
    }

    pub fn predict_all(&self, x: &Matrix) -> Result<Vec<u8>> {
        (0..x.n_rows()).map(|i| self.predict(x.row(i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_model_is_uniform() {
        let model = LogisticModel {
            weights: vec![0.0; N_CLASSES * 3],
            bias: [0.0; N_CLASSES],
            n_features: 3,
            hyper: LogisticHyper::default(),
        };
        let p = model.predict_proba(&[1.0, -2.0, 0.5]).unwrap();
        for q in p {
            assert!((q - 0.2).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn separable_points_are_learned() {
        let x = Matrix::from_rows(&[vec![-1.0], vec![1.0]]);
        let y = vec![1, 2];
        let model = fit_logistic(
            &x,
            &y,
            LogisticHyper {
                learning_rate: 0.5,
                l2: 0.0,
                epochs: 500,
            },
        )
        .unwrap();
        assert_eq!(model.predict(&[-1.0]).unwrap(), 1);
        assert_eq!(model.predict(&[1.0]).unwrap(), 2);
    }

    /// Analytic gradient vs central finite differences on random small
    /// problems.
    #[test]
    fn gradient_matches_finite_differences() {
        let eps = 1e-5;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(3..=8);
            let d = rng.random_range(1..=4);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let x = Matrix::from_rows(&rows);
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(1..=5)).collect();
            let mut weights: Vec<f64> =
                (0..N_CLASSES * d).map(|_| rng.random::<f64>() - 0.5).collect();
            let bias: [f64; N_CLASSES] = std::array::from_fn(|_| rng.random::<f64>() - 0.5);
            let l2 = 0.01;
            let (_, grad_w, grad_b) = loss_and_gradient(&weights, &bias, &x, &y, l2);
            for j in 0..weights.len() {
                let orig = weights[j];
                weights[j] = orig + eps;
                let (lp, _, _) = loss_and_gradient(&weights, &bias, &x, &y, l2);
                weights[j] = orig - eps;
                let (lm, _, _) = loss_and_gradient(&weights, &bias, &x, &y, l2);
                weights[j] = orig;
                let numeric = (lp - lm) / (2.0 * eps);
                let denom = numeric.abs().max(grad_w[j].abs()).max(1e-8);
                assert!(
                    ((grad_w[j] - numeric) / denom).abs() < 1e-5,
                    "seed {seed} w[{j}]: {} vs {numeric}",
                    grad_w[j]
                );
            }
            for c in 0..N_CLASSES {
                let mut b = bias;
                b[c] += eps;
                let (lp, _, _) = loss_and_gradient(&weights, &b, &x, &y, l2);
                b[c] = bias[c] - eps;
                let (lm, _, _) = loss_and_gradient(&weights, &b, &x, &y, l2);
                let numeric = (lp - lm) / (2.0 * eps);
                let denom = numeric.abs().max(grad_b[c].abs()).max(1e-8);
                assert!(((grad_b[c] - numeric) / denom).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn loss_is_non_increasing_at_small_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>()])
            .collect();
        let x = Matrix::from_rows(&rows);
        let y: Vec<u8> = rows
            .iter()
            .map(|r| if r[0] > 0.0 { 2 } else { 3 })
            .collect();
        let hyper = LogisticHyper {
            learning_rate: 1e-3,
            l2: 1e-4,
            epochs: 1,
        };
        let mut weights = vec![0.0; N_CLASSES * 2];
        let mut bias = [0.0; N_CLASSES];
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let (loss, grad_w, grad_b) = loss_and_gradient(&weights, &bias, &x, &y, hyper.l2);
            assert!(loss <= prev + 1e-12);
            prev = loss;
            for (w, g) in weights.iter_mut().zip(&grad_w) {
                *w -= hyper.learning_rate * g;
            }
            for (b, g) in bias.iter_mut().zip(&grad_b) {
                *b -= hyper.learning_rate * g;
            }
        }
    }
}
