//! Fitting the calibrated model: temperature, rejection threshold, relabeled
//! validation set and the scalar epistemic calibrator `τ_u`.
//!
//! The fitted [`CalibratedModel`] is persisted as JSON:
//!
//! ```text
//! {version, c, tau, theta, alpha,
//!  tau_u: {form, params, u_mean, u_std},
//!  estimator: {kind, params}}
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::epistemic::{fit_estimator, EpistemicEstimator, EstimatorKind, EstimatorOptions};
use crate::error::{Error, Result};
use crate::numeric::{
    ceil_fraction, golden_section_minimize, log_sum_exp, max_value, pairwise_mean,
    pairwise_sum,
};

pub const MODEL_VERSION: u32 = 1;
pub const TAU_MIN: f64 = 0.05;
pub const TAU_MAX: f64 = 20.0;
pub const TAU_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.95;
/// Smallest validation set for which a 5% tail is meaningful.
pub const MIN_THRESHOLD_SAMPLES: usize = 20;

pub const ITERATIONS: usize = 2000;
pub const STEP: f64 = 0.05;
pub const MOMENTUM: f64 = 0.9;
pub const DEFAULT_HIDDEN: usize = 8;
const INIT_JITTER: f64 = 1e-2;
const CONSTANT_GRID: usize = 101;

// ---------------------------------------------------------------------------
// Temperature
// ---------------------------------------------------------------------------

/// Mean cross-entropy of `softmax(logits / tau)` against in-domain labels.
pub fn temperature_nll(records: &[Record], tau: f64) -> f64 {
    let terms: Vec<f64> = records
        .iter()
        .map(|r| {
            let scaled: Vec<f64> = r.logits.iter().map(|z| z / tau).collect();
            log_sum_exp(&scaled) - scaled[r.label - 1]
        })
        .collect();
    pairwise_mean(&terms)
}

/// Golden-section search for the temperature in `[TAU_MIN, TAU_MAX]`.
/// The result never has higher validation NLL than `tau = 1`.
pub fn fit_temperature(validation: &Dataset) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Fit("temperature: empty validation set".into()));
    }
    let c = validation.c();
    if let Some(r) = validation.records().iter().find(|r| !(1..=c).contains(&r.label)) {
        return Err(Error::Fit(format!(
            "temperature: record {} has non in-domain label {}",
            r.id, r.label
        )));
    }
    let records = validation.records();
    let objective = |tau: f64| temperature_nll(records, tau);
    let best = golden_section_minimize(objective, TAU_MIN, TAU_MAX, TAU_TOLERANCE);
    let at_one = objective(1.0);
    if !best.value.is_finite() {
        return Err(Error::Numeric("temperature objective is not finite".into()));
    }
    Ok(if at_one < best.value { 1.0 } else { best.x })
}

// ---------------------------------------------------------------------------
// Threshold and relabeling
// ---------------------------------------------------------------------------

/// Percentile threshold over validation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub theta: f64,
    /// `ceil(alpha * m)`.
    pub k: usize,
    /// `m - k`, the count a tie-free sample rejects.
    pub expected_rejections: usize,
    /// Validation points with `u >= theta`.
    pub rejections: usize,
}

impl ThresholdFit {
    /// Ties at the threshold make the realized tail larger than intended.
    pub fn is_degenerate(&self) -> bool {
        self.rejections != self.expected_rejections
    }
}

/// `theta = u_(k+1)` for `k = ceil(alpha * m)` (1-based order statistics), or
/// `u_(m) + 1` when `k = m`. Rejection everywhere is `u >= theta`.
pub fn fit_threshold(u_values: &[f64], alpha: f64) -> Result<ThresholdFit> {
    let m = u_values.len();
    if m < MIN_THRESHOLD_SAMPLES {
        return Err(Error::Fit(format!(
            "threshold needs at least {MIN_THRESHOLD_SAMPLES} validation scores, got {m}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Fit(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if u_values.iter().any(|u| !u.is_finite()) {
        return Err(Error::Numeric("threshold: non-finite validation score".into()));
    }
    let mut sorted = u_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ceil_fraction(alpha, m).min(m);
    let theta = if k < m { sorted[k] } else { sorted[m - 1] + 1.0 };
    let rejections = u_values.iter().filter(|&&u| u >= theta).count();
    Ok(ThresholdFit {
        theta,
        k,
        expected_rejections: m - k,
        rejections,
    })
}

/// Copy of `validation` where every record with `u >= theta` is labeled `c + 1`.
pub fn relabel(validation: &Dataset, estimator: &EpistemicEstimator, theta: f64) -> Result<Dataset> {
    relabel_scored(validation, &estimator.score_all(validation.records())?, theta)
}

/// [`relabel`] with the scores already computed, one per record.
pub fn relabel_scored(validation: &Dataset, u: &[f64], theta: f64) -> Result<Dataset> {
    if u.len() != validation.len() {
        return Err(Error::Input("one score per record is required".into()));
    }
    let c = validation.c();
    let records = validation
        .records()
        .iter()
        .zip(u.iter().copied())
        .map(|(r, u)| {
            let mut r = r.clone();
            if u >= theta {
                r.label = c + 1;
            }
            r
        })
        .collect();
    Ok(validation.with_records_unchecked(records))
}

// ---------------------------------------------------------------------------
// Epistemic calibrator
// ---------------------------------------------------------------------------

/// Parameters of a tanh network with a linear skip connection:
/// `t(z) = skip_slope * z + output_bias + Σ_k output_weights[k] * tanh(input_weights[k] * z + input_biases[k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub skip_slope: f64,
    pub input_weights: Vec<f64>,
    pub input_biases: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
}

impl MlpParams {
    pub fn hidden(&self) -> usize {
        self.input_weights.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "params", rename_all = "lowercase")]
pub enum CalibratorMap {
    Linear { slope: f64, intercept: f64 },
    Mlp(MlpParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibratorForm {
    Linear,
    Mlp,
}

impl std::str::FromStr for CalibratorForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(CalibratorForm::Linear),
            "mlp" => Ok(CalibratorForm::Mlp),
            other => Err(Error::Parse(format!("unknown calibrator form {other:?}"))),
        }
    }
}

/// `τ_u`: maps a raw score `u` to the logit of the out-domain class.
/// Scores are standardized with validation statistics before the map is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpistemicCalibrator {
    #[serde(flatten)]
    pub map: CalibratorMap,
    pub u_mean: f64,
    pub u_std: f64,
}

impl EpistemicCalibrator {
    pub fn linear(slope: f64, intercept: f64, u_mean: f64, u_std: f64) -> Self {
        EpistemicCalibrator {
            map: CalibratorMap::Linear { slope, intercept },
            u_mean,
            u_std,
        }
    }

    /// A calibrator that ignores `u` and always returns `value`.
    pub fn constant(value: f64) -> Self {
        Self::linear(0.0, value, 0.0, 1.0)
    }

    pub fn form(&self) -> CalibratorForm {
        match self.map {
            CalibratorMap::Linear { .. } => CalibratorForm::Linear,
            CalibratorMap::Mlp(_) => CalibratorForm::Mlp,
        }
    }

    pub fn standardize(&self, u: f64) -> f64 {
        (u - self.u_mean) / self.u_std
    }

    /// `τ_u(u)` for a raw score.
    pub fn apply(&self, u: f64) -> f64 {
        self.apply_standardized(self.standardize(u))
    }

    pub fn apply_standardized(&self, z: f64) -> f64 {
        match &self.map {
            CalibratorMap::Linear { slope, intercept } => slope * z + intercept,
            CalibratorMap::Mlp(p) => {
                let hidden: f64 = (0..p.hidden())
                    .map(|k| p.output_weights[k] * tanh(p.input_weights[k] * z + p.input_biases[k]))
                    .sum();
                p.skip_slope * z + p.output_bias + hidden
            }
        }
    }

    /// Flat parameter vector. Linear: `[slope, intercept]`. Mlp:
    /// `[skip_slope, output_bias, input_weights.., input_biases.., output_weights..]`.
    pub fn params(&self) -> Vec<f64> {
        match &self.map {
            CalibratorMap::Linear { slope, intercept } => vec![*slope, *intercept],
            CalibratorMap::Mlp(p) => {
                let mut v = vec![p.skip_slope, p.output_bias];
                v.extend(&p.input_weights);
                v.extend(&p.input_biases);
                v.extend(&p.output_weights);
                v
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match &self.map {
            CalibratorMap::Linear { .. } => 2,
            CalibratorMap::Mlp(p) => 2 + 3 * p.hidden(),
        }
    }

    /// Same form and standardization with a new flat parameter vector.
    pub fn with_params(&self, params: &[f64]) -> Self {
        assert_eq!(params.len(), self.n_params(), "parameter vector length");
        let map = match &self.map {
            CalibratorMap::Linear { .. } => CalibratorMap::Linear {
                slope: params[0],
                intercept: params[1],
            },
            CalibratorMap::Mlp(p) => {
                let h = p.hidden();
                CalibratorMap::Mlp(MlpParams {
                    skip_slope: params[0],
                    output_bias: params[1],
                    input_weights: params[2..2 + h].to_vec(),
                    input_biases: params[2 + h..2 + 2 * h].to_vec(),
                    output_weights: params[2 + 2 * h..].to_vec(),
                })
            }
        };
        EpistemicCalibrator {
            map,
            u_mean: self.u_mean,
            u_std: self.u_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u_std > 0.0 && self.u_std.is_finite() && self.u_mean.is_finite()) {
            return Err(Error::Invariant(format!(
                "tau_u standardization must be finite with positive std (mean {}, std {})",
                self.u_mean, self.u_std
            )));
        }
        if let CalibratorMap::Mlp(p) = &self.map {
            let h = p.hidden();
            if h == 0 || p.input_biases.len() != h || p.output_weights.len() != h {
                return Err(Error::Invariant(format!(
                    "tau_u mlp needs h >= 1 and matching layer sizes (got {}, {}, {})",
                    h,
                    p.input_biases.len(),
                    p.output_weights.len()
                )));
            }
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::Invariant("tau_u parameters must be finite".into()));
        }
        Ok(())
    }
}

/// `tanh` via one `exp`; absolute error stays near machine epsilon and it is
/// several times cheaper than the libm call, which dominates the mlp fit.
fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

/// One relabeled validation record reduced to what the `τ_u` loss needs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ObjectiveTerm {
    /// `log Σ_j exp(f_τ(x)_j)` over the c in-domain classes.
    lse_in: f64,
    /// `f_τ(x)_y` for in-domain labels; `None` for label `c + 1`.
    target_logit: Option<f64>,
    /// Standardized epistemic score.
    z: f64,
}

/// Mean cross-entropy of `softmax(concat(logits / τ, τ_u(u)))` over a relabeled validation set.
#[derive(Debug, Clone)]
pub struct EpistemicObjective {
    terms: Vec<ObjectiveTerm>,
    u_mean: f64,
    u_std: f64,
    min_scaled_logit: f64,
    max_scaled_logit: f64,
    max_scaled_per_record: Vec<f64>,
}

impl EpistemicObjective {
    /// Scores the relabeled set and derives the standardization constants from it.
    pub fn new(relabeled: &Dataset, tau: f64, estimator: &EpistemicEstimator) -> Result<Self> {
        Self::from_scores(relabeled, tau, &estimator.score_all(relabeled.records())?)
    }

    /// Same as [`Self::new`] with the scores already computed.
    pub fn from_scores(relabeled: &Dataset, tau: f64, u: &[f64]) -> Result<Self> {
        let mean = pairwise_mean(u);
        let var = pairwise_mean(&u.iter().map(|v| (v - mean) * (v - mean)).collect::<Vec<_>>());
        let std = if var.sqrt() > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
        Self::with_scores(relabeled, tau, u, mean, std)
    }

    /// Builds the objective from precomputed scores and fixed standardization constants.
    pub fn with_scores(relabeled: &Dataset, tau: f64, u: &[f64], u_mean: f64, u_std: f64) -> Result<Self> {
        if u.len() != relabeled.len() {
            return Err(Error::Input("one score per record is required".into()));
        }
        let c = relabeled.c();
        let mut terms = Vec::with_capacity(u.len());
        let mut max_scaled_per_record = Vec::with_capacity(u.len());
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (r, &score) in relabeled.records().iter().zip(u) {
            let scaled: Vec<f64> = r.logits.iter().map(|v| v / tau).collect();
            let mx = max_value(&scaled);
            lo = lo.min(scaled.iter().copied().fold(f64::INFINITY, f64::min));
            hi = hi.max(mx);
            max_scaled_per_record.push(mx);
            let target_logit = match r.label {
                l if (1..=c).contains(&l) => Some(scaled[l - 1]),
                l if l == c + 1 => None,
                l => return Err(Error::Data(format!("record {}: label {l} out of range", r.id))),
            };
            terms.push(ObjectiveTerm {
                lse_in: log_sum_exp(&scaled),
                target_logit,
                z: (score - u_mean) / u_std,
            });
        }
        Ok(EpistemicObjective {
            terms,
            u_mean,
            u_std,
            min_scaled_logit: lo,
            max_scaled_logit: hi,
            max_scaled_per_record,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn out_count(&self) -> usize {
        self.terms.iter().filter(|t| t.target_logit.is_none()).count()
    }

    pub fn u_mean(&self) -> f64 {
        self.u_mean
    }

    pub fn u_std(&self) -> f64 {
        self.u_std
    }

    /// Smallest and largest temperature-scaled logit over the set.
    pub fn scaled_logit_range(&self) -> (f64, f64) {
        (self.min_scaled_logit, self.max_scaled_logit)
    }

    fn term_loss(t: &ObjectiveTerm, out_logit: f64) -> f64 {
        Self::term_loss_and_slope(t, out_logit).0
    }

    pub fn loss(&self, cal: &EpistemicCalibrator) -> f64 {
        let terms: Vec<f64> = self
            .terms
            .iter()
            .map(|t| Self::term_loss(t, cal.apply_standardized(t.z)))
            .collect();
        pairwise_mean(&terms)
    }

    /// Loss of the constant calibrator `τ_u ≡ value`.
    pub fn constant_loss(&self, value: f64) -> f64 {
        let terms: Vec<f64> = self.terms.iter().map(|t| Self::term_loss(t, value)).collect();
        pairwise_mean(&terms)
    }

    /// Loss and analytic gradient with respect to [`EpistemicCalibrator::params`].
    pub fn loss_and_grad(&self, cal: &EpistemicCalibrator) -> (f64, Vec<f64>) {
        let n = self.terms.len() as f64;
        let mut grad = vec![0.0; cal.n_params()];
        let mut losses = Vec::with_capacity(self.terms.len());
        match &cal.map {
            CalibratorMap::Linear { slope, intercept } => {
                for t in &self.terms {
                    let out = slope * t.z + intercept;
                    let (loss, g) = Self::term_loss_and_slope(t, out);
                    losses.push(loss);
                    grad[0] += g * t.z;
                    grad[1] += g;
                }
            }
            CalibratorMap::Mlp(p) => {
                let h = p.hidden();
                let mut act = vec![0.0; h];
                for t in &self.terms {
                    let mut out = p.skip_slope * t.z + p.output_bias;
                    for k in 0..h {
                        act[k] = tanh(p.input_weights[k] * t.z + p.input_biases[k]);
                        out += p.output_weights[k] * act[k];
                    }
                    let (loss, g) = Self::term_loss_and_slope(t, out);
                    losses.push(loss);
                    grad[0] += g * t.z;
                    grad[1] += g;
                    for k in 0..h {
                        let a = act[k];
                        let da = g * p.output_weights[k] * (1.0 - a * a);
                        grad[2 + k] += da * t.z;
                        grad[2 + h + k] += da;
                        grad[2 + 2 * h + k] += g * a;
                    }
                }
            }
        }
        grad.iter_mut().for_each(|g| *g /= n);
        (pairwise_mean(&losses), grad)
    }

    /// Per-record loss and its derivative `p_out - 1[label = c+1]` with respect to
    /// the out logit, sharing one exponential between the two.
    fn term_loss_and_slope(t: &ObjectiveTerm, out: f64) -> (f64, f64) {
        let d = out - t.lse_in;
        let e = (-d.abs()).exp();
        let softplus = d.max(0.0) + e.ln_1p();
        let p_out = if d >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        match t.target_logit {
            Some(target) => (t.lse_in + softplus - target, p_out),
            None => (softplus - d, p_out - 1.0),
        }
    }

    /// Best constant on the fixed grid over the scaled-logit range, refined by
    /// golden-section search around the winning grid point.
    pub fn best_constant(&self) -> (f64, f64) {
        let (lo, hi) = self.scaled_logit_range();
        let step = (hi - lo) / (CONSTANT_GRID - 1) as f64;
        let mut best = (lo, self.constant_loss(lo));
        for i in 1..CONSTANT_GRID {
            let b = lo + step * i as f64;
            let l = self.constant_loss(b);
            if l < best.1 {
                best = (b, l);
            }
        }
        if step > 0.0 {
            let refined =
                golden_section_minimize(|b| self.constant_loss(b), best.0 - step, best.0 + step, 1e-10);
            if refined.value < best.1 {
                best = (refined.x, refined.value);
            }
        }
        best
    }

    /// Least-squares line through paired quantiles of standardized `u` and of the max scaled logit.
    fn quantile_line(&self) -> (f64, f64) {
        let mut z: Vec<f64> = self.terms.iter().map(|t| t.z).collect();
        let mut y = self.max_scaled_per_record.clone();
        z.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let zm = pairwise_mean(&z);
        let ym = pairwise_mean(&y);
        let sxy = pairwise_sum(&z.iter().zip(&y).map(|(a, b)| (a - zm) * (b - ym)).collect::<Vec<_>>());
        let sxx = pairwise_sum(&z.iter().map(|a| (a - zm) * (a - zm)).collect::<Vec<_>>());
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        (slope, ym - slope * zm)
    }
}

/// Summary of one calibrator fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratorFit {
    pub calibrator: EpistemicCalibrator,
    pub loss: f64,
    /// Loss of the linear stage (equal to `loss` for the linear form).
    pub linear_loss: f64,
    /// Best constant calibrator on the 101-point grid (refined).
    pub constant: f64,
    pub constant_loss: f64,
    /// Largest relative error between analytic and central-difference gradients at the start point.
    pub gradient_check: f64,
}

/// Heavy-ball gradient descent; returns the best iterate seen, including the start.
fn descend(objective: &EpistemicObjective, start: &EpistemicCalibrator) -> Result<(EpistemicCalibrator, f64)> {
    let mut params = start.params();
    let mut velocity = vec![0.0; params.len()];
    let mut best = (start.clone(), objective.loss(start));
    for iteration in 0..ITERATIONS {
        let current = start.with_params(&params);
        let (loss, grad) = objective.loss_and_grad(&current);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "tau_u loss became non-finite at iteration {iteration}"
            )));
        }
        if loss < best.1 {
            best = (current, loss);
        }
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = MOMENTUM * *v - STEP * g;
            *p += *v;
        }
    }
    let last = start.with_params(&params);
    let loss = objective.loss(&last);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("tau_u loss became non-finite at iteration {ITERATIONS}")));
    }
    if loss < best.1 {
        best = (last, loss);
    }
    Ok(best)
}

/// Max over parameters of `|analytic - central difference| / max(|analytic|, |fd|, 1e-6)`.
pub fn gradient_check(objective: &EpistemicObjective, cal: &EpistemicCalibrator, h: f64) -> f64 {
    let (_, grad) = objective.loss_and_grad(cal);
    let base = cal.params();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (objective.loss(&cal.with_params(&plus)) - objective.loss(&cal.with_params(&minus))) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    worst
}

/// Fits `τ_u` on a relabeled validation set with the temperature held fixed.
///
/// The linear form starts from the better of a quantile least-squares line and
/// the best constant; the mlp form starts from the fitted linear solution with
/// zero output weights and seed-controlled jitter on its hidden layer.
pub fn fit_epistemic_calibrator(
    relabeled: &Dataset,
    tau: f64,
    estimator: &EpistemicEstimator,
    form: CalibratorForm,
    hidden: usize,
    seed: u64,
) -> Result<CalibratorFit> {
    let objective = EpistemicObjective::new(relabeled, tau, estimator)?;
    fit_calibrator_on(&objective, form, hidden, seed)
}

/// Same as [`fit_epistemic_calibrator`] on an already-built objective.
pub fn fit_calibrator_on(
    objective: &EpistemicObjective,
    form: CalibratorForm,
    hidden: usize,
    seed: u64,
) -> Result<CalibratorFit> {
    let outs = objective.out_count();
    if outs == 0 {
        return Err(Error::Fit("tau_u: no out-domain (c+1) labels after relabeling".into()));
    }
    if outs == objective.len() {
        return Err(Error::Fit("tau_u: no in-domain labels after relabeling".into()));
    }
    if form == CalibratorForm::Mlp && hidden == 0 {
        return Err(Error::Fit("tau_u: mlp needs at least one hidden unit".into()));
    }
    let (u_mean, u_std) = (objective.u_mean(), objective.u_std());
    let (constant, constant_loss) = objective.best_constant();
    let (slope, intercept) = objective.quantile_line();
    let line = EpistemicCalibrator::linear(slope, intercept, u_mean, u_std);
    let flat = EpistemicCalibrator::linear(0.0, constant, u_mean, u_std);
    let start = if objective.loss(&line) < constant_loss { line } else { flat };
    let gradient_check_linear = gradient_check(objective, &start, 1e-5);
    let (linear, linear_loss) = descend(objective, &start)?;
    if form == CalibratorForm::Linear {
        return Ok(CalibratorFit {
            calibrator: linear,
            loss: linear_loss,
            linear_loss,
            constant,
            constant_loss,
            gradient_check: gradient_check_linear,
        });
    }
    let mlp_start = mlp_from_linear(&linear, hidden, seed);
    let gradient_check_mlp = gradient_check(objective, &mlp_start, 1e-5);
    let (mlp, loss) = descend(objective, &mlp_start)?;
    Ok(CalibratorFit {
        calibrator: mlp,
        loss,
        linear_loss,
        constant,
        constant_loss,
        gradient_check: gradient_check_linear.max(gradient_check_mlp),
    })
}

/// An mlp computing exactly the same function as `linear`: output weights are
/// zero, hidden units are spread over `[-2, 2]` in standardized units and jittered.
pub fn mlp_from_linear(linear: &EpistemicCalibrator, hidden: usize, seed: u64) -> EpistemicCalibrator {
    let (slope, intercept) = match linear.map {
        CalibratorMap::Linear { slope, intercept } => (slope, intercept),
        CalibratorMap::Mlp(_) => panic!("mlp_from_linear expects a linear calibrator"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = || rng.gen_range(-INIT_JITTER..=INIT_JITTER);
    let centers: Vec<f64> = (0..hidden)
        .map(|k| if hidden == 1 { 0.0 } else { -2.0 + 4.0 * k as f64 / (hidden - 1) as f64 })
        .collect();
    let input_weights: Vec<f64> = (0..hidden).map(|_| 1.0 + jitter()).collect();
    let input_biases: Vec<f64> = centers.iter().map(|c| -c + jitter()).collect();
    EpistemicCalibrator {
        map: CalibratorMap::Mlp(MlpParams {
            skip_slope: slope,
            input_weights,
            input_biases,
            output_weights: vec![0.0; hidden],
            output_bias: intercept,
        }),
        u_mean: linear.u_mean,
        u_std: linear.u_std,
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Everything needed to turn a record into RC and U2C predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    pub c: usize,
    pub tau: f64,
    pub theta: f64,
    pub alpha: f64,
    pub tau_u: EpistemicCalibrator,
    pub estimator: EpistemicEstimator,
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    version: u32,
    #[serde(flatten)]
    model: &'a CalibratedModel,
}

#[derive(Deserialize)]
struct ModelFile {
    #[allow(dead_code)]
    version: u32,
    #[serde(flatten)]
    model: CalibratedModel,
}

/// Temperature-scaled logits, score and calibrated out-domain logit of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scaled_logits: Vec<f64>,
    pub u: f64,
    pub out_logit: f64,
}

impl CalibratedModel {
    pub fn validate(&self) -> Result<()> {
        if self.c < 1 {
            return Err(Error::Invariant("model class count must be at least 1".into()));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau) {
            return Err(Error::Invariant(format!(
                "tau = {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Invariant(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if !self.theta.is_finite() {
            return Err(Error::Invariant("theta must be finite".into()));
        }
        self.tau_u.validate()
    }

    /// Errors unless `d` has the model's class count and, when the estimator
    /// reads features, a matching feature dimension. A dataset carrying its own
    /// `u` column never needs features.
    pub fn check_compatible(&self, d: &Dataset) -> Result<()> {
        if d.c() != self.c {
            return Err(Error::Compatibility(format!(
                "class count: dataset has {}, model has {}",
                d.c(),
                self.c
            )));
        }
        if d.has_u_scores() {
            return Ok(());
        }
        if self.estimator.kind() == EstimatorKind::Passthrough {
            return Err(Error::Compatibility("u scores required by the passthrough estimator".into()));
        }
        if let Some(need) = self.estimator.feature_dim() {
            match d.d_feat() {
                Some(have) if have == need && d.has_features() => {}
                Some(have) if have != need => {
                    return Err(Error::Compatibility(format!(
                        "feature dimension: dataset has {have}, estimator needs {need}"
                    )))
                }
                _ => {
                    return Err(Error::Compatibility(format!(
                        "features required by the {} estimator",
                        self.estimator.kind()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn scaled_logits(&self, r: &Record) -> Vec<f64> {
        r.logits.iter().map(|v| v / self.tau).collect()
    }

    pub fn evaluate(&self, r: &Record) -> Result<Evaluation> {
        if r.logits.len() != self.c {
            return Err(Error::Compatibility(format!(
                "class count: record {} has {} logits, model has {}",
                r.id,
                r.logits.len(),
                self.c
            )));
        }
        let u = self.estimator.score(r)?;
        Ok(Evaluation {
            scaled_logits: self.scaled_logits(r),
            u,
            out_logit: self.tau_u.apply(u),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ModelFileRef {
            version: MODEL_VERSION,
            model: self,
        })
        .map_err(|e| Error::Parse(format!("cannot serialize model: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("model json: {e}")))?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Parse("model json: missing numeric field `version`".into()))?;
        if version != u64::from(MODEL_VERSION) {
            return Err(Error::Version {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: MODEL_VERSION,
            });
        }
        check_enum_field(&value, &["tau_u", "form"], &["linear", "mlp"])?;
        check_enum_field(
            &value,
            &["estimator", "kind"],
            &["maxlogit", "mahalanobis", "knn", "ash", "passthrough"],
        )?;
        let file: ModelFile =
            serde_json::from_value(value).map_err(|e| Error::Parse(format!("model json: {e}")))?;
        file.model.validate()?;
        Ok(file.model)
    }
}

fn check_enum_field(value: &serde_json::Value, path: &[&str], allowed: &[&str]) -> Result<()> {
    let name = path.join(".");
    let mut cur = value;
    for key in path {
        cur = cur
            .get(key)
            .ok_or_else(|| Error::Parse(format!("model json: missing field `{name}`")))?;
    }
    match cur.as_str() {
        Some(s) if allowed.contains(&s) => Ok(()),
        _ => Err(Error::Parse(format!(
            "model json: field `{name}` has unknown value {cur}, expected one of {allowed:?}"
        ))),
    }
}

pub fn save_model(m: &CalibratedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = m.to_json()?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CalibratedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CalibratedModel::from_json(&text)
}

// ---------------------------------------------------------------------------
// End-to-end fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub estimator: EstimatorKind,
    pub estimator_options: EstimatorOptions,
    pub alpha: f64,
    pub form: CalibratorForm,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            estimator: EstimatorKind::MaxLogit,
            estimator_options: EstimatorOptions::default(),
            alpha: DEFAULT_ALPHA,
            form: CalibratorForm::Mlp,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

/// What happened during [`fit_model`]; written next to the model by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub m: usize,
    pub tau: f64,
    pub nll_at_unit_tau: f64,
    pub nll_at_tau: f64,
    pub estimator: EstimatorKind,
    pub theta: f64,
    pub alpha: f64,
    pub relabeled: usize,
    pub expected_relabeled: usize,
    pub threshold_degenerate: bool,
    pub form: CalibratorForm,
    pub final_loss: f64,
    pub linear_loss: f64,
    pub best_constant: f64,
    pub best_constant_loss: f64,
    pub gradient_check_max_rel_error: f64,
}

/// Temperature, estimator, threshold, relabeling and `τ_u`, in that order.
pub fn fit_model(validation: &Dataset, options: &FitOptions) -> Result<(CalibratedModel, FitLog)> {
    let tau = fit_temperature(validation)?;
    let estimator = fit_estimator(options.estimator, validation, &options.estimator_options)?;
    let u = estimator.score_all(validation.records())?;
    let threshold = fit_threshold(&u, options.alpha)?;
    let relabeled = relabel_scored(validation, &u, threshold.theta)?;
    let objective = EpistemicObjective::from_scores(&relabeled, tau, &u)?;
    let fit = fit_calibrator_on(&objective, options.form, options.hidden, options.seed)?;
    let model = CalibratedModel {
        c: validation.c(),
        tau,
        theta: threshold.theta,
        alpha: options.alpha,
        tau_u: fit.calibrator,
        estimator,
    };
    model.validate()?;
    let log = FitLog {
        m: validation.len(),
        tau,
        nll_at_unit_tau: temperature_nll(validation.records(), 1.0),
        nll_at_tau: temperature_nll(validation.records(), tau),
        estimator: options.estimator,
        theta: threshold.theta,
        alpha: options.alpha,
        relabeled: threshold.rejections,
        expected_relabeled: threshold.expected_rejections,
        threshold_degenerate: threshold.is_degenerate(),
        form: options.form,
        final_loss: fit.loss,
        linear_loss: fit.linear_loss,
        best_constant: fit.constant,
        best_constant_loss: fit.constant_loss,
        gradient_check_max_rel_error: fit.gradient_check,
    };
    Ok((model, log))
}
