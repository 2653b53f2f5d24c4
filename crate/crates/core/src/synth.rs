//! Deterministic Gaussian benchmark: class-conditional in-domain features,
//! a shifted out-domain cloud, label noise, and a linear head producing logits.
//!
//! Each record draws from its own ChaCha8 stream keyed by `(split, index)`, so
//! records can be generated in any order or in parallel with identical output.

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LinearHead, Record, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Default,
    /// Logits multiplied by 5 after generation.
    Overconfident,
    /// Supplies `u = -max logit` as a column and negates it, in standardized
    /// units, on a fraction of the evaluation records. Confident inputs then
    /// carry high uncertainty, which populates region C.
    Misspecified,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Preset::Default),
            "overconfident" => Ok(Preset::Overconfident),
            "misspecified" => Ok(Preset::Misspecified),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected default, overconfident or misspecified)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub c: usize,
    pub d: usize,
    pub class_means: Vec<Vec<f64>>,
    /// Mixture weights over classes; normalized on use.
    pub class_weights: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub out_mean: Vec<f64>,
    pub out_covariance: Vec<Vec<f64>>,
    /// Probability that a label is replaced by a uniformly chosen other class.
    pub eta: f64,
    /// Logit head; `None` uses the Bayes-optimal linear head for the configured Gaussians.
    pub head: Option<LinearHead>,
    pub logit_scale: f64,
    /// When set, every record carries `u = -max logit`, and this fraction of
    /// test-in and out-domain records gets `u ↦ 2ū - u` instead, where `ū` is
    /// the train-val mean of u. `None` leaves the u column out entirely.
    pub misspecified_fraction: Option<f64>,
    pub n_train_val: usize,
    pub n_test_in: usize,
    pub n_out: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        // Equilateral triangle of side 6 centred on the origin.
        let radius = 6.0 / 3f64.sqrt();
        let class_means: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let angle = std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        let centroid = [0.0, 0.0];
        SynthConfig {
            c: 3,
            d: 2,
            class_means,
            class_weights: vec![1.0; 3],
            covariance: identity(2, 1.0),
            out_mean: vec![centroid[0] + 10.0, centroid[1] + 10.0],
            out_covariance: identity(2, 4.0),
            eta: 0.2,
            head: None,
            logit_scale: 1.0,
            misspecified_fraction: None,
            n_train_val: 10_000,
            n_test_in: 10_000,
            n_out: 10_000,
            seed: 0,
        }
    }
}

fn identity(d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { scale } else { 0.0 }).collect()).collect()
}

fn to_matrix(rows: &[Vec<f64>], name: &str, d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("{name} must be {d}x{d}")));
    }
    let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::Config(format!("{name} is not symmetric")));
            }
        }
    }
    Ok(m)
}

fn cholesky(rows: &[Vec<f64>], name: &str, d: usize) -> Result<DMatrix<f64>> {
    let m = to_matrix(rows, name, d)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{name} has non-finite entries")));
    }
    m.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Config(format!("{name} is not positive definite")))
}

impl SynthConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = SynthConfig::default();
        match preset {
            Preset::Default => {}
            Preset::Overconfident => cfg.logit_scale = 5.0,
            Preset::Misspecified => cfg.misspecified_fraction = Some(0.2),
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.c, self.d);
        if c < 2 || d == 0 {
            return Err(Error::Config("need c >= 2 classes and d >= 1 features".into()));
        }
        if self.class_means.len() != c || self.class_means.iter().any(|m| m.len() != d) {
            return Err(Error::Config(format!("class_means must be {c} vectors of length {d}")));
        }
        if self.class_means.iter().flatten().chain(&self.out_mean).any(|v| !v.is_finite()) {
            return Err(Error::Config("means must be finite".into()));
        }
        for i in 0..c {
            for j in 0..i {
                if self.class_means[i] == self.class_means[j] {
                    return Err(Error::Config(format!("class means {} and {} coincide", j + 1, i + 1)));
                }
            }
        }
        if self.class_weights.len() != c
            || self.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || !self.class_weights.iter().any(|w| *w > 0.0)
        {
            return Err(Error::Config(format!("class_weights must be {c} non-negative weights, not all 0")));
        }
        if self.out_mean.len() != d {
            return Err(Error::Config(format!("out_mean must have length {d}")));
        }
        cholesky(&self.covariance, "covariance", d)?;
        cholesky(&self.out_covariance, "out_covariance", d)?;
        if !(0.0..0.5).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 0.5), got {}", self.eta)));
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Config("logit_scale must be positive".into()));
        }
        if let Some(f) = self.misspecified_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("misspecified_fraction must lie in [0, 1]".into()));
            }
        }
        if let Some(h) = &self.head {
            h.validate()?;
            if h.classes() != c || h.input_dim() != d {
                return Err(Error::Config(format!("head must map {d} features to {c} logits")));
            }
        }
        if self.n_train_val == 0 || self.n_test_in == 0 || self.n_out == 0 {
            return Err(Error::Config("every split needs at least one record".into()));
        }
        Ok(())
    }

    /// `w_j = Σ⁻¹ μ_j`, `b_j = -μ_jᵀ Σ⁻¹ μ_j / 2 + log π_j`: the Bayes rule for the
    /// clean class-conditional Gaussians.
    pub fn bayes_head(&self) -> Result<LinearHead> {
        let sigma = to_matrix(&self.covariance, "covariance", self.d)?;
        let inv = sigma
            .try_inverse()
            .ok_or_else(|| Error::Config("covariance is singular".into()))?;
        let total: f64 = self.class_weights.iter().sum();
        let mut weights = Vec::with_capacity(self.c);
        let mut bias = Vec::with_capacity(self.c);
        for (mu, w) in self.class_means.iter().zip(&self.class_weights) {
            let mu = DVector::from_column_slice(mu);
            let wj = &inv * &mu;
            bias.push(-0.5 * mu.dot(&wj) + (w / total).ln());
            weights.push(wj.iter().copied().collect());
        }
        LinearHead::new(weights, bias)
    }

    pub fn head(&self) -> Result<LinearHead> {
        match &self.head {
            Some(h) => Ok(h.clone()),
            None => self.bayes_head(),
        }
    }
}

/// A generated record together with its noiseless class (`None` for out-domain).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRecord {
    pub record: Record,
    pub true_class: Option<usize>,
}

/// Everything needed to draw records; built once per config.
pub struct Sampler {
    cfg: SynthConfig,
    head: LinearHead,
    chol_in: DMatrix<f64>,
    chol_out: DMatrix<f64>,
    classes: WeightedIndex<f64>,
    /// Train-val mean of `-max logit`, the reflection point for misspecified scores.
    pivot: Option<f64>,
}

fn stream_id(split: Split) -> u64 {
    match split {
        Split::TrainVal => 0,
        Split::TestIn => 1,
        Split::OutDomain => 2,
        Split::CovariateShift => 3,
    }
}

impl Sampler {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut sampler = Sampler {
            head: cfg.head()?,
            chol_in: cholesky(&cfg.covariance, "covariance", cfg.d)?,
            chol_out: cholesky(&cfg.out_covariance, "out_covariance", cfg.d)?,
            classes: WeightedIndex::new(&cfg.class_weights)
                .map_err(|e| Error::Config(format!("class_weights: {e}")))?,
            cfg: cfg.clone(),
            pivot: None,
        };
        if cfg.misspecified_fraction.is_some() {
            let u = sampler
                .sample_split(Split::TrainVal, cfg.n_train_val)?
                .into_iter()
                .map(|s| s.record.u_score.unwrap_or(0.0))
                .collect::<Vec<_>>();
            sampler.pivot = Some(crate::numeric::pairwise_mean(&u));
        }
        Ok(sampler)
    }

    fn rng(&self, split: Split, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream((stream_id(split) << 56) | index as u64);
        rng
    }

    fn gaussian(rng: &mut ChaCha8Rng, mean: &[f64], chol: &DMatrix<f64>) -> Vec<f64> {
        let n = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = chol * n;
        mean.iter().zip(x.iter()).map(|(m, v)| m + v).collect()
    }

    /// Draws record `index` of `split`. Covariate-shift requests are rejected.
    pub fn sample(&self, split: Split, index: usize) -> Result<SampledRecord> {
        let cfg = &self.cfg;
        let mut rng = self.rng(split, index);
        let id = format!("{}-{index}", split.as_str());
        let (features, label, true_class) = match split {
            Split::TrainVal | Split::TestIn => {
                let k = self.classes.sample(&mut rng);
                let x = Self::gaussian(&mut rng, &cfg.class_means[k], &self.chol_in);
                let flip: f64 = rng.gen();
                let mut label = k;
                if flip < cfg.eta {
                    let other = rng.gen_range(0..cfg.c - 1);
                    label = if other >= k { other + 1 } else { other };
                }
                (x, label + 1, Some(k + 1))
            }
            Split::OutDomain => (Self::gaussian(&mut rng, &cfg.out_mean, &self.chol_out), cfg.c + 1, None),
            Split::CovariateShift => {
                return Err(Error::Config("the generator has no covariate-shift split".into()));
            }
        };
        let logits: Vec<f64> = self.head.apply(&features).into_iter().map(|z| z * cfg.logit_scale).collect();
        let mut record = Record::new(id, label, logits).with_features(features);
        if let Some(frac) = cfg.misspecified_fraction {
            let max = record.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let u = -max;
            let flip = split != Split::TrainVal && rng.gen::<f64>() < frac;
            record = record.with_u(match self.pivot {
                Some(pivot) if flip => 2.0 * pivot - u,
                _ => u,
            });
        }
        Ok(SampledRecord { record, true_class })
    }

    pub fn sample_split(&self, split: Split, n: usize) -> Result<Vec<SampledRecord>> {
        (0..n).into_par_iter().map(|i| self.sample(split, i)).collect()
    }

    pub fn dataset(&self, split: Split, n: usize) -> Result<Dataset> {
        let records = self.sample_split(split, n)?.into_iter().map(|s| s.record).collect();
        Dataset::new(self.cfg.c, split, records)
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train_val: Dataset,
    pub test_in: Dataset,
    pub out_domain: Dataset,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    let s = Sampler::new(cfg)?;
    Ok(SynthData {
        train_val: s.dataset(Split::TrainVal, cfg.n_train_val)?,
        test_in: s.dataset(Split::TestIn, cfg.n_test_in)?,
        out_domain: s.dataset(Split::OutDomain, cfg.n_out)?,
    })
}

/// Independent brute-force references used by the test suite.
pub mod oracle {
    use crate::data::Dataset;
    use crate::metrics::{BinStat, MetricsReport};
    use crate::predict::ExtendedPrediction;

    /// err, ece and nll by direct enumeration, sharing no helpers with the metrics module.
    pub fn oracle_metrics(preds: &[ExtendedPrediction], labels: &[usize], n_bins: usize) -> MetricsReport {
        let n = preds.len();
        let mut wrong = 0usize;
        let mut nll_sum = 0.0;
        let mut zero = 0usize;
        for (p, &y) in preds.iter().zip(labels) {
            if p.predicted != y {
                wrong += 1;
            }
            let q = p.probs[y - 1];
            if q > 0.0 {
                nll_sum += -q.ln();
            } else {
                zero += 1;
            }
        }
        let mut bins = Vec::with_capacity(n_bins);
        let mut ece = 0.0;
        for b in 0..n_bins {
            let lower = b as f64 / n_bins as f64;
            let upper = (b + 1) as f64 / n_bins as f64;
            let mut count = 0usize;
            let mut conf = 0.0;
            let mut hits = 0.0;
            for (p, &y) in preds.iter().zip(labels) {
                let s = p.confidence;
                // (lower, upper], with 0 belonging to the first bin.
                let inside = if b == 0 { s <= upper } else { s > lower && s <= upper };
                let inside = inside || (b == n_bins - 1 && s > 1.0);
                if inside {
                    count += 1;
                    conf += s;
                    if p.predicted == y {
                        hits += 1.0;
                    }
                }
            }
            let (mean_confidence, accuracy) = if count == 0 {
                (None, None)
            } else {
                let (mc, acc) = (conf / count as f64, hits / count as f64);
                ece += count as f64 / n as f64 * (acc - mc).abs();
                (Some(mc), Some(acc))
            };
            bins.push(BinStat { lower, upper, count, mean_confidence, accuracy });
        }
        MetricsReport {
            err: wrong as f64 / n as f64,
            ece,
            nll: if zero > 0 {
                f64::INFINITY
            } else {
                nll_sum / n as f64
            },
            nll_infinite: zero > 0,
            nll_zero_events: zero,
            n,
            bins,
        }
    }

    /// Per-record epistemic-calibration loss for a constant out logit `b`.
    fn constant_loss(relabeled: &Dataset, tau: f64, b: f64) -> f64 {
        let c = relabeled.c();
        let mut total = 0.0;
        for r in relabeled.records() {
            let mut top = b;
            for z in &r.logits {
                top = top.max(z / tau);
            }
            let mut s = (b - top).exp();
            for z in &r.logits {
                s += (z / tau - top).exp();
            }
            let target = if r.label == c + 1 { b } else { r.logits[r.label - 1] / tau };
            total += top + s.ln() - target;
        }
        total / relabeled.len() as f64
    }

    /// Grid search over 1001 constants spanning the scaled-logit range padded by 5.
    pub fn oracle_best_constant_calibrator(relabeled: &Dataset, tau: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in relabeled.records() {
            for z in &r.logits {
                lo = lo.min(z / tau);
                hi = hi.max(z / tau);
            }
        }
        let (lo, hi) = (lo - 5.0, hi + 5.0);
        let mut best = (lo, f64::INFINITY);
        for i in 0..=1000 {
            let b = lo + (hi - lo) * i as f64 / 1000.0;
            let loss = constant_loss(relabeled, tau, b);
            if loss < best.1 {
                best = (b, loss);
            }
        }
        best
    }
}
