//! Epistemic uncertainty estimators `u(x)`.
//!
//! Four fitted scorers plus a pass-through mode for scores computed elsewhere.
//! Larger `u` always means "less like the validation data".

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LinearHead, Record};
use crate::error::{Error, Result};
use crate::numeric::{ceil_fraction, max_value};

/// Smallest ridge added to the pooled covariance, used when the data has no scatter at all.
pub const MIN_RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    MaxLogit,
    Mahalanobis,
    Knn,
    Ash,
    Passthrough,
}

impl EstimatorKind {
    pub fn needs_features(self) -> bool {
        matches!(self, EstimatorKind::Mahalanobis | EstimatorKind::Knn | EstimatorKind::Ash)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::MaxLogit => "maxlogit",
            EstimatorKind::Mahalanobis => "mahalanobis",
            EstimatorKind::Knn => "knn",
            EstimatorKind::Ash => "ash",
            EstimatorKind::Passthrough => "passthrough",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxlogit" => Ok(EstimatorKind::MaxLogit),
            "mahalanobis" => Ok(EstimatorKind::Mahalanobis),
            "knn" => Ok(EstimatorKind::Knn),
            "ash" => Ok(EstimatorKind::Ash),
            "passthrough" => Ok(EstimatorKind::Passthrough),
            other => Err(Error::Parse(format!("unknown estimator kind {other:?}"))),
        }
    }
}

/// Knobs for [`fit_estimator`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOptions {
    /// Neighbours averaged by the KNN scorer.
    pub k: usize,
    /// Fraction of feature entries ASH keeps.
    pub ash_keep_fraction: f64,
    /// Value written into every surviving ASH entry.
    pub ash_fill: f64,
    /// Read-out used by ASH to turn reshaped features into logits.
    pub head: Option<LinearHead>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions {
            k: 5,
            ash_keep_fraction: 0.1,
            ash_fill: 1.0,
            head: None,
        }
    }
}

/// Class-conditional Gaussians with one pooled covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MahalanobisParams", into = "MahalanobisParams")]
pub struct Mahalanobis {
    means: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
    ridge: f64,
    factor: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MahalanobisParams {
    means: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
    ridge: f64,
}

impl PartialEq for Mahalanobis {
    fn eq(&self, other: &Self) -> bool {
        self.means == other.means && self.covariance == other.covariance && self.ridge == other.ridge
    }
}

impl From<Mahalanobis> for MahalanobisParams {
    fn from(m: Mahalanobis) -> Self {
        MahalanobisParams {
            means: m.means,
            covariance: m.covariance,
            ridge: m.ridge,
        }
    }
}

impl TryFrom<MahalanobisParams> for Mahalanobis {
    type Error = Error;

    fn try_from(p: MahalanobisParams) -> Result<Self> {
        Mahalanobis::new(p.means, p.covariance, p.ridge)
    }
}

impl Mahalanobis {
    /// Builds the scorer from already-regularized parameters and checks that
    /// the covariance is symmetric with every eigenvalue at least `ridge`.
    pub fn new(means: Vec<Vec<f64>>, covariance: Vec<Vec<f64>>, ridge: f64) -> Result<Self> {
        let d = covariance.len();
        if means.is_empty() || d == 0 {
            return Err(Error::Invariant("mahalanobis needs at least one mean and d >= 1".into()));
        }
        if means.iter().any(|m| m.len() != d) || covariance.iter().any(|row| row.len() != d) {
            return Err(Error::Invariant("mahalanobis dimensions disagree".into()));
        }
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::Invariant(format!("mahalanobis ridge must be positive, got {ridge}")));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
        if cov.iter().any(|v| !v.is_finite()) || means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("mahalanobis parameters must be finite".into()));
        }
        if cov != cov.transpose() {
            return Err(Error::Invariant("mahalanobis covariance is not symmetric".into()));
        }
        let min_eig = cov.clone().symmetric_eigenvalues().min();
        if min_eig < ridge * (1.0 - 1e-6) {
            return Err(Error::Invariant(format!(
                "mahalanobis covariance eigenvalue {min_eig} is below ridge {ridge}"
            )));
        }
        let factor = cov
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance is singular despite ridge".into()))?
            .l();
        Ok(Mahalanobis {
            means,
            covariance,
            ridge,
            factor,
        })
    }

    pub fn fit(validation: &Dataset) -> Result<Self> {
        let d = validation
            .d_feat()
            .filter(|_| validation.has_features())
            .ok_or_else(|| Error::Input("mahalanobis: features required".into()))?;
        let c = validation.c();
        let mut sums = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for r in validation.records() {
            let j = in_domain_index(r, c)?;
            counts[j] += 1;
            for (s, x) in sums[j].iter_mut().zip(features_of(r)?) {
                *s += x;
            }
        }
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Fit(format!(
                "mahalanobis: class {} has no validation examples",
                j + 1
            )));
        }
        let means: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect();
        let mut scatter = vec![vec![0.0; d]; d];
        for r in validation.records() {
            let mu = &means[r.label - 1];
            let centered: Vec<f64> = features_of(r)?.iter().zip(mu).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in 0..=i {
                    scatter[i][j] += centered[i] * centered[j];
                }
            }
        }
        let n = validation.len() as f64;
        let mut covariance = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..=i {
                let v = scatter[i][j] / n;
                covariance[i][j] = v;
                covariance[j][i] = v;
            }
        }
        let trace: f64 = (0..d).map(|i| covariance[i][i]).sum();
        let ridge = (1e-6 * trace / d as f64).max(MIN_RIDGE);
        for (i, row) in covariance.iter_mut().enumerate() {
            row[i] += ridge;
        }
        Mahalanobis::new(means, covariance, ridge)
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Distance to the closest class mean.
    pub fn distance(&self, features: &[f64]) -> Result<f64> {
        let d = self.covariance.len();
        if features.len() != d {
            return Err(Error::Input(format!(
                "mahalanobis expects {d} features, got {}",
                features.len()
            )));
        }
        let mut best = f64::INFINITY;
        for mu in &self.means {
            let diff = DVector::from_iterator(d, features.iter().zip(mu).map(|(x, m)| x - m));
            let y = self
                .factor
                .solve_lower_triangular(&diff)
                .ok_or_else(|| Error::Numeric("singular covariance factor".into()))?;
            best = best.min(y.norm_squared().sqrt());
        }
        Ok(best)
    }
}

/// Mean distance to the `k` nearest stored validation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnnParams", into = "KnnParams")]
pub struct Knn {
    k: usize,
    dim: usize,
    /// Reference vectors stored row-major.
    flat: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KnnParams {
    k: usize,
    reference: Vec<Vec<f64>>,
}

impl From<Knn> for KnnParams {
    fn from(k: Knn) -> Self {
        KnnParams {
            k: k.k,
            reference: k.reference().map(<[f64]>::to_vec).collect(),
        }
    }
}

impl TryFrom<KnnParams> for Knn {
    type Error = Error;

    fn try_from(p: KnnParams) -> Result<Self> {
        Knn::new(p.k, p.reference)
    }
}

impl Knn {
    pub fn new(k: usize, reference: Vec<Vec<f64>>) -> Result<Self> {
        if k == 0 || k > reference.len() {
            return Err(Error::Invariant(format!(
                "knn: k = {k} must be in 1..={}",
                reference.len()
            )));
        }
        let dim = reference[0].len();
        if reference.iter().any(|r| r.len() != dim) {
            return Err(Error::Invariant("knn reference rows differ in length".into()));
        }
        if reference.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("knn reference must be finite".into()));
        }
        Ok(Knn {
            k,
            dim,
            flat: reference.concat(),
        })
    }

    pub fn fit(validation: &Dataset, k: usize) -> Result<Self> {
        if !validation.has_features() {
            return Err(Error::Input("knn: features required".into()));
        }
        let reference = validation
            .records()
            .iter()
            .map(|r| features_of(r).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Knn::new(k, reference)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reference(&self) -> impl Iterator<Item = &[f64]> {
        self.flat.chunks_exact(self.dim.max(1))
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn distance(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dim {
            return Err(Error::Input(format!(
                "knn expects {} features, got {}",
                self.dim,
                features.len()
            )));
        }
        // Sorted buffer of the k best (squared distance, index) pairs; ties go
        // to the lower index since candidates arrive in index order.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(self.k + 1);
        for (i, r) in self.reference().enumerate() {
            let sq: f64 = r.iter().zip(features).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.len() == self.k && sq >= best[self.k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(d, _)| d <= sq);
            best.insert(pos, (sq, i));
            best.truncate(self.k);
        }
        let total: f64 = best.iter().map(|(sq, _)| sq.sqrt()).sum();
        Ok(total / self.k as f64)
    }
}

/// Binarizing activation shaping followed by a fixed linear read-out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ash {
    pub keep_fraction: f64,
    pub fill: f64,
    pub head: LinearHead,
}

impl Ash {
    pub fn new(keep_fraction: f64, fill: f64, head: LinearHead) -> Result<Self> {
        if !(keep_fraction > 0.0 && keep_fraction < 1.0) {
            return Err(Error::Invariant(format!(
                "ash keep fraction must lie in (0, 1), got {keep_fraction}"
            )));
        }
        if !fill.is_finite() {
            return Err(Error::Invariant("ash fill must be finite".into()));
        }
        head.validate()?;
        Ok(Ash {
            keep_fraction,
            fill,
            head,
        })
    }

    pub fn score_features(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.head.input_dim() {
            return Err(Error::Input(format!(
                "ash head expects {} features, got {}",
                self.head.input_dim(),
                features.len()
            )));
        }
        let shaped = ash_reshape(features, self.keep_fraction, self.fill);
        Ok(-max_value(&self.head.apply(&shaped)))
    }
}

/// Keeps the `ceil(keep_fraction * d)` largest-magnitude entries (ties to the
/// lower index), sets them to `fill` and zeroes the rest.
pub fn ash_reshape(features: &[f64], keep_fraction: f64, fill: f64) -> Vec<f64> {
    let d = features.len();
    let keep = ceil_fraction(keep_fraction, d).clamp(1, d.max(1));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| features[b].abs().total_cmp(&features[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; d];
    for &i in order.iter().take(keep) {
        out[i] = fill;
    }
    out
}

/// A fitted scorer. Serialized inside the model file as `{"kind": ..., "params": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum EpistemicEstimator {
    MaxLogit,
    Mahalanobis(Mahalanobis),
    Knn(Knn),
    Ash(Ash),
    /// Every record must carry its own `u` column.
    Passthrough,
}

impl EpistemicEstimator {
    pub fn kind(&self) -> EstimatorKind {
        match self {
            EpistemicEstimator::MaxLogit => EstimatorKind::MaxLogit,
            EpistemicEstimator::Mahalanobis(_) => EstimatorKind::Mahalanobis,
            EpistemicEstimator::Knn(_) => EstimatorKind::Knn,
            EpistemicEstimator::Ash(_) => EstimatorKind::Ash,
            EpistemicEstimator::Passthrough => EstimatorKind::Passthrough,
        }
    }

    /// Feature dimension the scorer consumes, if any.
    pub fn feature_dim(&self) -> Option<usize> {
        match self {
            EpistemicEstimator::Mahalanobis(m) => Some(m.covariance.len()),
            EpistemicEstimator::Knn(k) => Some(k.dim()),
            EpistemicEstimator::Ash(a) => Some(a.head.input_dim()),
            _ => None,
        }
    }

    /// `u(x)` for one record. A precomputed `u_score` on the record wins over the fitted scorer.
    pub fn score(&self, r: &Record) -> Result<f64> {
        if let Some(u) = r.u_score {
            return Ok(u);
        }
        match self {
            EpistemicEstimator::MaxLogit => {
                if r.logits.is_empty() {
                    return Err(Error::Input(format!("record {}: no logits", r.id)));
                }
                Ok(-max_value(&r.logits))
            }
            EpistemicEstimator::Mahalanobis(m) => m.distance(features_of(r)?),
            EpistemicEstimator::Knn(k) => k.distance(features_of(r)?),
            EpistemicEstimator::Ash(a) => a.score_features(features_of(r)?),
            EpistemicEstimator::Passthrough => Err(Error::Input(format!(
                "record {}: passthrough estimator needs a u column",
                r.id
            ))),
        }
    }

    /// Scores every record; output order matches input order.
    pub fn score_all(&self, records: &[Record]) -> Result<Vec<f64>> {
        records.par_iter().map(|r| self.score(r)).collect()
    }
}

/// Fits the requested estimator on in-domain validation data.
pub fn fit_estimator(
    kind: EstimatorKind,
    validation: &Dataset,
    options: &EstimatorOptions,
) -> Result<EpistemicEstimator> {
    if !validation.split().is_in_domain() {
        return Err(Error::Fit("estimators are fitted on in-domain data".into()));
    }
    match kind {
        EstimatorKind::MaxLogit => Ok(EpistemicEstimator::MaxLogit),
        EstimatorKind::Passthrough => {
            if !validation.has_u_scores() {
                return Err(Error::Input("passthrough: every record needs a u column".into()));
            }
            Ok(EpistemicEstimator::Passthrough)
        }
        EstimatorKind::Mahalanobis => Mahalanobis::fit(validation).map(EpistemicEstimator::Mahalanobis),
        EstimatorKind::Knn => Knn::fit(validation, options.k).map(EpistemicEstimator::Knn),
        EstimatorKind::Ash => {
            let head = options
                .head
                .clone()
                .ok_or_else(|| Error::Input("ash: a linear head is required".into()))?;
            if validation.d_feat().is_some_and(|d| d != head.input_dim()) || !validation.has_features() {
                return Err(Error::Input("ash: features matching the head are required".into()));
            }
            Ash::new(options.ash_keep_fraction, options.ash_fill, head).map(EpistemicEstimator::Ash)
        }
    }
}

fn features_of(r: &Record) -> Result<&[f64]> {
    r.features
        .as_deref()
        .ok_or_else(|| Error::Input(format!("record {}: features required", r.id)))
}

fn in_domain_index(r: &Record, c: usize) -> Result<usize> {
    if (1..=c).contains(&r.label) {
        Ok(r.label - 1)
    } else {
        Err(Error::Fit(format!("record {}: label {} is not in-domain", r.id, r.label)))
    }
}
