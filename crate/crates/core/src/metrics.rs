//! Classification error, binned expected calibration error and negative
//! log-likelihood over the extended label set `{1, ..., c+1}`.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::numeric::{pairwise_mean, pairwise_sum};
use crate::predict::{ExtendedPrediction, Method};

pub const DEFAULT_BINS: usize = 15;

/// One equal-width confidence bin `(lower, upper]` (the first bin also holds 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Negative log-likelihood with explicit bookkeeping of zero-probability events.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nll {
    /// Mean over records whose true-class probability is positive (0 if there are none).
    pub finite_mean: f64,
    pub infinite: bool,
    pub zero_events: usize,
}

impl Nll {
    /// `+inf` when any event had probability zero.
    pub fn value(&self) -> f64 {
        if self.infinite {
            f64::INFINITY
        } else {
            self.finite_mean
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub err: f64,
    pub ece: f64,
    pub nll: f64,
    pub nll_infinite: bool,
    pub nll_zero_events: usize,
    pub n: usize,
    pub bins: Vec<BinStat>,
}

/// A [`MetricsReport`] tagged with where it came from; this is the report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub predictor: Method,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

fn check_lengths(preds: &[ExtendedPrediction], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("metrics need at least one record".into()));
    }
    Ok(())
}

/// Fraction of records whose predicted extended label differs from the true one.
pub fn err(preds: &[ExtendedPrediction], labels: &[usize]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let wrong = preds.iter().zip(labels).filter(|(p, &y)| p.predicted != y).count();
    Ok(wrong as f64 / preds.len() as f64)
}

/// Bin holding `confidence` among `n_bins` right-closed equal-width bins.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    let nb = n_bins as f64;
    let mut b = ((confidence * nb).ceil() as usize).saturating_sub(1).min(n_bins - 1);
    while b > 0 && confidence <= b as f64 / nb {
        b -= 1;
    }
    while b + 1 < n_bins && confidence > (b + 1) as f64 / nb {
        b += 1;
    }
    b
}

fn binned(preds: &[ExtendedPrediction], labels: &[usize], n_bins: usize) -> Result<(f64, Vec<BinStat>)> {
    check_lengths(preds, labels)?;
    if n_bins == 0 {
        return Err(Error::Input("ece needs at least one bin".into()));
    }
    if let Some(p) = preds.iter().find(|p| !(0.0..=1.0).contains(&p.confidence)) {
        return Err(Error::Input(format!("confidence {} outside [0, 1]", p.confidence)));
    }
    let mut confidences = vec![Vec::new(); n_bins];
    let mut correct = vec![0usize; n_bins];
    for (p, &y) in preds.iter().zip(labels) {
        let b = bin_index(p.confidence, n_bins);
        confidences[b].push(p.confidence);
        correct[b] += usize::from(p.predicted == y);
    }
    let n = preds.len() as f64;
    let mut gaps = Vec::with_capacity(n_bins);
    let bins = (0..n_bins)
        .map(|b| {
            let count = confidences[b].len();
            let (mean_confidence, accuracy) = if count == 0 {
                (None, None)
            } else {
                let conf = pairwise_mean(&confidences[b]);
                let acc = correct[b] as f64 / count as f64;
                gaps.push(count as f64 / n * (acc - conf).abs());
                (Some(conf), Some(acc))
            };
            BinStat {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok((pairwise_sum(&gaps), bins))
}

/// Binned expected calibration error `Σ_b (n_b / n) |acc_b - conf_b|`, in `[0, 1]`.
pub fn ece(preds: &[ExtendedPrediction], labels: &[usize], n_bins: usize) -> Result<f64> {
    binned(preds, labels, n_bins).map(|(e, _)| e)
}

/// Mean `-log p_y` using the probability assigned to the true extended label.
pub fn nll(preds: &[ExtendedPrediction], labels: &[usize]) -> Result<Nll> {
    check_lengths(preds, labels)?;
    let mut terms = Vec::with_capacity(preds.len());
    let mut zero_events = 0;
    for (p, &y) in preds.iter().zip(labels) {
        let prob = *p
            .probs
            .get(y.wrapping_sub(1))
            .ok_or_else(|| Error::Input(format!("label {y} outside the {}-vector", p.probs.len())))?;
        if prob == 0.0 {
            zero_events += 1;
        } else {
            terms.push(-prob.ln());
        }
    }
    Ok(Nll {
        // `+ 0.0` turns the -0.0 of an all-certain set into 0.0
        finite_mean: if terms.is_empty() { 0.0 } else { pairwise_mean(&terms) + 0.0 },
        infinite: zero_events > 0,
        zero_events,
    })
}

pub fn compute_metrics(preds: &[ExtendedPrediction], labels: &[usize], n_bins: usize) -> Result<MetricsReport> {
    let err = err(preds, labels)?;
    let (ece, bins) = binned(preds, labels, n_bins)?;
    let nll = nll(preds, labels)?;
    Ok(MetricsReport {
        err,
        ece,
        nll: nll.finite_mean,
        nll_infinite: nll.infinite,
        nll_zero_events: nll.zero_events,
        n: preds.len(),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predict::Region;

    fn pred(probs: Vec<f64>) -> ExtendedPrediction {
        let top = crate::numeric::argmax(&probs);
        ExtendedPrediction {
            predicted: top + 1,
            confidence: probs[top],
            probs,
            region: Region::A,
        }
    }

    #[test]
    fn err_examples() {
        let all_right = vec![pred(vec![0.9, 0.1, 0.0]), pred(vec![0.2, 0.7, 0.1])];
        assert_eq!(err(&all_right, &[1, 2]).unwrap(), 0.0);
        let abstain = vec![pred(vec![0.0, 0.0, 1.0]); 4];
        assert_eq!(err(&abstain, &[3; 4]).unwrap(), 0.0);
        let mixed = vec![
            pred(vec![0.8, 0.1, 0.1]),
            pred(vec![0.1, 0.2, 0.7]),
            pred(vec![0.0, 0.0, 1.0]),
        ];
        assert_eq!(err(&mixed, &[1, 2, 3]).unwrap(), 1.0 / 3.0);
        assert!(matches!(err(&mixed, &[1]), Err(Error::Input(_))));
    }

    #[test]
    fn ece_examples() {
        let sure = vec![pred(vec![1.0, 0.0, 0.0]); 3];
        assert_eq!(ece(&sure, &[1, 1, 1], 15).unwrap(), 0.0);
        assert_eq!(ece(&sure[..1], &[2], 15).unwrap(), 1.0);
        let two = vec![pred(vec![0.8, 0.2, 0.0]), pred(vec![0.8, 0.2, 0.0])];
        assert!((ece(&two, &[1, 2], 15).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn ece_rejects_bad_confidence() {
        let mut p = pred(vec![0.5, 0.5]);
        p.confidence = 1.2;
        assert!(matches!(ece(&[p], &[1], 10), Err(Error::Input(_))));
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.8, 15), 11);
        assert_eq!(bin_index(0.5, 2), 0);
        assert_eq!(bin_index(0.5000001, 2), 1);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
    }

    #[test]
    fn nll_examples() {
        let uniform = vec![pred(vec![0.25; 4]); 3];
        let v = nll(&uniform, &[1, 4, 2]).unwrap();
        assert!((v.finite_mean - 4f64.ln()).abs() < 1e-15);
        assert!(!v.infinite);
        let rc = vec![pred(vec![0.0, 0.0, 1.0])];
        let v = nll(&rc, &[1]).unwrap();
        assert!(v.infinite);
        assert_eq!(v.zero_events, 1);
        assert_eq!(v.value(), f64::INFINITY);
        let v = nll(&[pred(vec![0.5, 0.25, 0.25])], &[1]).unwrap();
        assert!((v.finite_mean - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn report_json_has_documented_fields() {
        let preds = vec![pred(vec![0.5, 0.25, 0.25])];
        let report = EvalReport {
            split: Split::TestIn,
            predictor: Method::U2c,
            metrics: compute_metrics(&preds, &[1], 15).unwrap(),
        };
        let v: serde_json::Value = serde_json::to_value(&report).unwrap();
        for key in ["split", "predictor", "err", "ece", "nll", "nll_infinite", "nll_zero_events", "n", "bins"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["split"], "test-in");
        assert_eq!(v["predictor"], "u2c");
        assert_eq!(v["bins"].as_array().unwrap().len(), 15);
    }
}
