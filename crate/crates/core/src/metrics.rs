//! Evaluation metrics: NLL, accuracy, expected calibration error and
//! error-versus-confidence curves.
//!
//! Confidence is the largest predicted probability; the predicted class is
//! its index, with ties resolved toward the smaller index. Bin `b` of `B`
//! equal-width bins holds confidences in `(b/B, (b+1)/B]` (bin 0 also
//! takes confidence 0).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Target};
use crate::error::{EllaError, Result};
use crate::likelihood::LikelihoodHead;
use crate::posterior::PredictiveGaussian;

pub const DEFAULT_ECE_BINS: usize = 15;
const ROW_SUM_TOL: f64 = 1e-6;

/// `(confidence, predicted class)`.
pub fn confidence(p: &[f64]) -> (f64, usize) {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    (p[best], best)
}

/// Bin `b` covers `(b/B, (b+1)/B]`, bin 0 also holding 0.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let last = bins as isize - 1;
    let mut b = ((conf * bins as f64).ceil() as isize - 1).clamp(0, last);
    while b > 0 && conf <= b as f64 / bins as f64 {
        b -= 1;
    }
    while b < last && conf > (b + 1) as f64 / bins as f64 {
        b += 1;
    }
    b as usize
}

fn validate(probs: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if probs.is_empty() {
        return Err(EllaError::InvalidArgument("no predictions to evaluate".into()));
    }
    if probs.len() != labels.len() {
        return Err(EllaError::Shape(format!("{} predictions but {} labels", probs.len(), labels.len())));
    }
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        let s: f64 = p.iter().sum();
        if p.is_empty() || (s - 1.0).abs() > ROW_SUM_TOL || p.iter().any(|v| !(*v >= 0.0)) {
            return Err(EllaError::InvalidArgument(format!("row {i} is not a probability vector (sum {s})")));
        }
        if y >= p.len() {
            return Err(EllaError::OutOfRange { what: "label", index: y, len: p.len() });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    /// Mean confidence in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction correct in the bin (0 when empty).
    pub accuracy: f64,
    pub count: usize,
}

pub fn reliability_bins(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<Vec<BinStat>> {
    validate(probs, labels)?;
    if bins == 0 {
        return Err(EllaError::InvalidArgument("need at least one bin".into()));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let (c, pred) = confidence(p);
        let b = bin_index(c, bins);
        conf_sum[b] += c;
        count[b] += 1;
        correct[b] += usize::from(pred == y);
    }
    Ok((0..bins)
        .map(|b| {
            let n = count[b];
            BinStat {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                confidence: if n > 0 { conf_sum[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { correct[b] as f64 / n as f64 } else { 0.0 },
                count: n,
            }
        })
        .collect())
}

fn ece_from_bins(table: &[BinStat], n: usize) -> f64 {
    table
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs())
        .sum()
}

/// `Σ_b (n_b/n)·|acc_b − conf_b|`.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    let table = reliability_bins(probs, labels, bins)?;
    Ok(ece_from_bins(&table, probs.len()))
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    validate(probs, labels)?;
    let correct = probs.iter().zip(labels).filter(|(p, &y)| confidence(p).1 == y).count();
    Ok(correct as f64 / probs.len() as f64)
}

/// `−log p_y`, with `p_y` floored at the smallest positive double.
pub fn categorical_nll(p: &[f64], y: usize) -> f64 {
    -p[y].max(f64::MIN_POSITIVE).ln()
}

/// `−log N(y | mean, cov + σ²I)` including the normalizing constant.
pub fn gaussian_nll(pred: &PredictiveGaussian, y: &[f64], noise_var: f64) -> Result<f64> {
    let c = pred.dim();
    if y.len() != c {
        return Err(EllaError::Shape(format!("target has {} entries, prediction {c}", y.len())));
    }
    let mut s = pred.covariance.clone();
    for i in 0..c {
        s[(i, i)] += noise_var;
    }
    let chol = crate::linalg::cholesky(&s, "predictive covariance")?;
    let r = nalgebra::DVector::from_iterator(c, y.iter().zip(&pred.mean).map(|(a, b)| a - b));
    let z = chol.l().solve_lower_triangular(&r).expect("cholesky factor is nonsingular");
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (z.norm_squared() + logdet + c as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// A per-item predictive distribution to be scored.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Probs(Vec<f64>),
    Gaussian(PredictiveGaussian),
}

/// Mean NLL of `dataset` under per-item predictions. Regression
/// predictions add the head's noise variance to the latent covariance.
pub fn nll_dataset(predictions: &[Prediction], dataset: &Dataset, head: &LikelihoodHead) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != dataset.len() {
        return Err(EllaError::Shape(format!(
            "{} predictions for {} items",
            predictions.len(),
            dataset.len()
        )));
    }
    let mut total = 0.0;
    for (i, pred) in predictions.iter().enumerate() {
        total += match (pred, dataset.target(i), head) {
            (Prediction::Probs(p), Target::Class(y), LikelihoodHead::Categorical) => {
                if y >= p.len() {
                    return Err(EllaError::OutOfRange { what: "label", index: y, len: p.len() });
                }
                categorical_nll(p, y)
            }
            (Prediction::Gaussian(g), Target::Real(t), LikelihoodHead::Gaussian { noise_var }) => {
                gaussian_nll(g, t, *noise_var)?
            }
            _ => return Err(EllaError::InvalidArgument("prediction kind does not match targets".into())),
        };
    }
    Ok(total / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// `1 − accuracy` among items with confidence ≤ threshold; `None` if there are none.
    pub error: Option<f64>,
    pub count: usize,
}

pub fn error_vs_confidence(probs: &[Vec<f64>], labels: &[usize], thresholds: &[f64]) -> Result<Vec<CurvePoint>> {
    validate(probs, labels)?;
    let items: Vec<(f64, bool)> = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let (c, pred) = confidence(p);
            (c, pred == y)
        })
        .collect();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (n, correct) = items
                .iter()
                .filter(|(c, _)| *c <= t)
                .fold((0usize, 0usize), |(n, k), (_, ok)| (n + 1, k + usize::from(*ok)));
            CurvePoint {
                threshold: t,
                error: (n > 0).then(|| 1.0 - correct as f64 / n as f64),
                count: n,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll: f64,
    pub accuracy: f64,
    pub ece: f64,
    pub n: usize,
    pub bins: Vec<BinStat>,
}

impl MetricsReport {
    pub fn classification(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<Self> {
        let table = reliability_bins(probs, labels, bins)?;
        let n = probs.len();
        let nll = probs.iter().zip(labels).map(|(p, &y)| categorical_nll(p, y)).sum::<f64>() / n as f64;
        let correct: usize = table.iter().map(|b| (b.accuracy * b.count as f64).round() as usize).sum();
        Ok(Self {
            nll,
            accuracy: correct as f64 / n as f64,
            ece: ece_from_bins(&table, n),
            n,
            bins: table,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// One CSV row per bin.
    pub fn write_bins_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for b in &self.bins {
            w.serialize(b)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "error", "count"])?;
    for p in curve {
        let err = p.error.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([p.threshold.to_string(), err, p.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Targets;
    use nalgebra::DMatrix;

    #[test]
    fn one_hot_correct_is_calibrated() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(ece(&probs, &[0, 1], 15).unwrap(), 0.0);
    }

    #[test]
    fn confident_half_wrong() {
        let probs = vec![vec![1.0, 0.0]; 4];
        assert_eq!(ece(&probs, &[0, 1, 0, 1], 15).unwrap(), 0.5);
        assert!(ece(&[], &[], 15).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(confidence(&[0.5, 0.5]), (0.5, 0));
        assert_eq!(accuracy(&[vec![0.5, 0.5]], &[0]).unwrap(), 1.0);
    }

    #[test]
    fn nll_examples() {
        let ds = Dataset::new(vec![vec![0.0]; 2], vec![1], Targets::Labels(vec![3, 7]), 10, "t").unwrap();
        let head = LikelihoodHead::Categorical;
        let onehot = |y: usize| {
            let mut p = vec![0.0; 10];
            p[y] = 1.0;
            Prediction::Probs(p)
        };
        assert_eq!(nll_dataset(&[onehot(3), onehot(7)], &ds, &head).unwrap(), 0.0);
        let uniform = Prediction::Probs(vec![0.1; 10]);
        let v = nll_dataset(&[uniform.clone(), uniform], &ds, &head).unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_one_dimensional() {
        let p = PredictiveGaussian::new(vec![0.0], DMatrix::from_element(1, 1, 0.5)).unwrap();
        let v = gaussian_nll(&p, &[1.0], 0.5).unwrap();
        let expect = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn curve_examples() {
        let probs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let labels = [0, 0, 0];
        let c = error_vs_confidence(&probs, &labels, &[0.5, 1.0]).unwrap();
        assert_eq!(c[0].error, None);
        assert_eq!(c[1].error, Some(1.0 - accuracy(&probs, &labels).unwrap()));
    }

    #[test]
    fn report_bins_sum_to_n() {
        let probs = vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.55, 0.45]];
        let r = MetricsReport::classification(&probs, &[0, 0, 1], 15).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 3);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        let mut buf = Vec::new();
        r.write_bins_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 16);
    }
}
