//! Single-modality reference classifiers used to calibrate the synthetic
//! data and as the floor the fused model must clear.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::metrics::{auc, EvalResult};
use crate::model::Sample;
use crate::ops::sigmoid;

/// L2-regularized logistic regression on standardized features, fitted by
/// Newton iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Intercept first.
    weights: Vec<f64>,
}

const RIDGE: f64 = 1e-2;
const NEWTON_STEPS: usize = 50;

impl Logistic {
    pub fn fit(features: &[Vec<f64>], labels: &[u8]) -> Result<Self> {
        let n = features.len();
        let d = features.first().map_or(0, Vec::len);
        if n == 0 || n != labels.len() || features.iter().any(|f| f.len() != d) {
            return Err(Error::Input("logistic fit needs equal-length, non-empty features".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 0.0 {
                    1.0 / var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let x = DMatrix::from_fn(n, d + 1, |i, j| {
            if j == 0 {
                1.0
            } else {
                (features[i][j - 1] - mean[j - 1]) * scale[j - 1]
            }
        });
        let y = DVector::from_iterator(n, labels.iter().map(|&l| l as f64));
        let mut w = DVector::zeros(d + 1);
        for _ in 0..NEWTON_STEPS {
            let p = (&x * &w).map(sigmoid);
            let mut grad = x.transpose() * (&p - &y);
            let mut hess = x.transpose() * DMatrix::from_diagonal(&p.map(|v| v * (1.0 - v))) * &x;
            for j in 1..=d {
                grad[j] += RIDGE * w[j];
                hess[(j, j)] += RIDGE;
            }
            hess[(0, 0)] += 1e-12;
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Numeric("logistic Hessian is not positive definite".into()))?
                .solve(&grad);
            w -= &step;
            if step.amax() < 1e-12 {
                break;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("logistic fit diverged".into()));
        }
        Ok(Self {
            mean,
            scale,
            weights: w.iter().copied().collect(),
        })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let z = self.weights[0]
            + features
                .iter()
                .enumerate()
                .map(|(j, &v)| (v - self.mean[j]) * self.scale[j] * self.weights[j + 1])
                .sum::<f64>();
        sigmoid(z)
    }
}

fn tabular_features(s: &Sample) -> Vec<f64> {
    s.record.features()
}

fn volume_features(s: &Sample) -> Vec<f64> {
    vec![s.volume.mean()]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineReport {
    pub tabular_auc: f64,
    pub visual_auc: f64,
    /// AUC of the averaged probabilities of the two baselines.
    pub averaged_auc: f64,
}

impl BaselineReport {
    pub fn mean_auc(&self) -> f64 {
        (self.tabular_auc + self.visual_auc) / 2.0
    }
}

/// Fits both baselines on `train` and scores them on `test`.
pub fn evaluate_baselines(train: &[&Sample], test: &[&Sample]) -> Result<BaselineReport> {
    let labels: Vec<u8> = train.iter().map(|s| s.label).collect();
    let test_labels: Vec<u8> = test.iter().map(|s| s.label).collect();
    let fit = |f: fn(&Sample) -> Vec<f64>| -> Result<Vec<f64>> {
        let model = Logistic::fit(&train.iter().map(|s| f(s)).collect::<Vec<_>>(), &labels)?;
        Ok(test.iter().map(|s| model.predict(&f(s))).collect())
    };
    let tab = fit(tabular_features)?;
    let vis = fit(volume_features)?;
    let avg: Vec<f64> = tab.iter().zip(&vis).map(|(a, b)| (a + b) / 2.0).collect();
    let score = |s: Vec<f64>| -> Result<f64> { Ok(auc(&EvalResult::new(s, test_labels.clone())?)?) };
    Ok(BaselineReport {
        tabular_auc: score(tab)?,
        visual_auc: score(vis)?,
        averaged_auc: score(avg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_one_feature() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<u8> = (0..20).map(|i| u8::from(i >= 10)).collect();
        let m = Logistic::fit(&x, &y).unwrap();
        assert!(m.predict(&[19.0]) > 0.9);
        assert!(m.predict(&[0.0]) < 0.1);
    }

    #[test]
    fn constant_feature_is_ignored() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![3.0, (i % 3) as f64]).collect();
        let y: Vec<u8> = (0..10).map(|i| (i % 2) as u8).collect();
        assert!(Logistic::fit(&x, &y).is_ok());
    }
}
