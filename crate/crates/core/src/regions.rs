//! Region analysis and exact checks of the RC-versus-U2C identities.
//!
//! Every probability here is an empirical frequency over the supplied
//! datasets, so the error identity holds exactly (up to float rounding) for
//! any model and any data.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibratedModel;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::numeric::argmax;
use crate::calibration::Evaluation;
use crate::predict::{evaluate_all, predict_evaluated, region_of, ExtendedPrediction, ExtendedPredictor, Method, Region};

/// Residual tolerance for the error identity.
pub const LEMMA1_TOLERANCE: f64 = 1e-12;
/// Agreement tolerance for the likelihood and calibration identities.
pub const FORMULA_TOLERANCE: f64 = 1e-9;

/// Region frequencies and the bare classifier's error inside each region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMasses {
    pub n: usize,
    pub counts: [usize; 4],
    pub masses: [f64; 4],
    /// Error of `argmax f_τ` within each region; `None` marks an empty region.
    pub conditional_error: [Option<f64>; 4],
}

impl RegionMasses {
    pub fn mass(&self, r: Region) -> f64 {
        self.masses[r.index()]
    }

    /// `P(r) * err(h | r)`, which is 0 for an empty region.
    pub fn weighted_error(&self, r: Region) -> f64 {
        match self.conditional_error[r.index()] {
            Some(e) => self.masses[r.index()] * e,
            None => 0.0,
        }
    }
}

/// Region of every record, using the model's own rejection rules.
pub fn regions_of(m: &CalibratedModel, d: &Dataset) -> Result<Vec<Region>> {
    Ok(evaluate_all(m, d.records())?.iter().map(|ev| region_of(m, ev)).collect())
}

pub fn region_masses(m: &CalibratedModel, d: &Dataset) -> Result<RegionMasses> {
    if d.is_empty() {
        return Err(Error::Input("region masses need a non-empty dataset".into()));
    }
    let evals = evaluate_all(m, d.records())?;
    let regions: Vec<Region> = evals.iter().map(|ev| region_of(m, ev)).collect();
    Ok(masses_from(&regions, &evals, &d.labels()))
}

fn masses_from(regions: &[Region], evals: &[Evaluation], labels: &[usize]) -> RegionMasses {
    let mut counts = [0usize; 4];
    let mut wrong = [0usize; 4];
    for ((region, ev), &y) in regions.iter().zip(evals).zip(labels) {
        counts[region.index()] += 1;
        let h = argmax(&ev.scaled_logits) + 1;
        wrong[region.index()] += usize::from(h != y);
    }
    let n = regions.len();
    RegionMasses {
        n,
        counts,
        masses: counts.map(|k| k as f64 / n as f64),
        conditional_error: std::array::from_fn(|i| {
            (counts[i] > 0).then(|| wrong[i] as f64 / counts[i] as f64)
        }),
    }
}

// ---------------------------------------------------------------------------
// Error identity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub err_out_rc: f64,
    pub err_out_u2c: f64,
    pub err_in_rc: f64,
    pub err_in_u2c: f64,
    pub masses_out: RegionMasses,
    pub masses_in: RegionMasses,
    /// `[err_out(RC) - err_out(U2C)] - [P_out(B) - P_out(C)]`.
    pub residual_out: f64,
    /// `[err_in(RC) - err_in(U2C)] - [P_in(C) - P_in(B) + P_in(B) err(h|B) - P_in(C) err(h|C)]`.
    pub residual_in: f64,
}

impl Lemma1Report {
    pub fn check(&self) -> Result<()> {
        if !(self.residual_out.abs() <= LEMMA1_TOLERANCE) {
            return Err(Error::Verification(format!(
                "error identity (out-domain): residual {:e} exceeds {LEMMA1_TOLERANCE:e}",
                self.residual_out
            )));
        }
        if !(self.residual_in.abs() <= LEMMA1_TOLERANCE) {
            return Err(Error::Verification(format!(
                "error identity (in-domain): residual {:e} exceeds {LEMMA1_TOLERANCE:e}",
                self.residual_in
            )));
        }
        Ok(())
    }
}

pub fn lemma1_residuals<P: ExtendedPredictor + ?Sized>(p: &P, d_in: &Dataset, d_out: &Dataset) -> Result<Lemma1Report> {
    let (pass_in, pass_out) = passes(p, d_in, d_out, "error identity")?;
    lemma1_from(&pass_in, &pass_out)
}

fn lemma1_from(pass_in: &SplitPass, pass_out: &SplitPass) -> Result<Lemma1Report> {
    let masses_out = pass_out.masses();
    let masses_in = pass_in.masses();
    let err_out_rc = metrics::err(&pass_out.preds_rc, &pass_out.labels)?;
    let err_out_u2c = metrics::err(&pass_out.preds_u2c, &pass_out.labels)?;
    let err_in_rc = metrics::err(&pass_in.preds_rc, &pass_in.labels)?;
    let err_in_u2c = metrics::err(&pass_in.preds_u2c, &pass_in.labels)?;
    let residual_out = split_residual(false, &masses_out, err_out_rc, err_out_u2c);
    let residual_in = split_residual(true, &masses_in, err_in_rc, err_in_u2c);
    Ok(Lemma1Report {
        err_out_rc,
        err_out_u2c,
        err_in_rc,
        err_in_u2c,
        masses_out,
        masses_in,
        residual_out,
        residual_in,
    })
}

/// Error-identity residual for a single dataset: the out-domain form for
/// out-domain data, the in-domain form otherwise.
pub fn split_residual(in_domain: bool, masses: &RegionMasses, err_rc: f64, err_u2c: f64) -> f64 {
    let (b, c) = (masses.mass(Region::B), masses.mass(Region::C));
    if in_domain {
        (err_rc - err_u2c) - (c - b + masses.weighted_error(Region::B) - masses.weighted_error(Region::C))
    } else {
        (err_rc - err_u2c) - (b - c)
    }
}

/// RC and U2C metrics on one dataset with its region masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub split: Split,
    pub rc: EvalReport,
    pub u2c: EvalReport,
    pub masses: RegionMasses,
    /// `err(U2C) - err(RC)`.
    pub err_delta: f64,
    /// `ece(U2C) - ece(RC)`.
    pub ece_delta: f64,
    /// `err(RC) - err(U2C)` predicted from region masses alone.
    pub err_gap_from_regions: f64,
    pub lemma1_residual: f64,
}

pub fn evaluate_dataset<P: ExtendedPredictor + ?Sized>(p: &P, d: &Dataset, n_bins: usize) -> Result<DatasetEvaluation> {
    if d.is_empty() {
        return Err(Error::Input("evaluation needs a non-empty dataset".into()));
    }
    p.model().check_compatible(d)?;
    let pass = split_pass(p, d)?;
    let rc = metrics::compute_metrics(&pass.preds_rc, &pass.labels, n_bins)?;
    let u2c = metrics::compute_metrics(&pass.preds_u2c, &pass.labels, n_bins)?;
    let masses = pass.masses();
    let in_domain = d.split().is_in_domain();
    let lemma1_residual = split_residual(in_domain, &masses, rc.err, u2c.err);
    let (b, c) = (masses.mass(Region::B), masses.mass(Region::C));
    let err_gap_from_regions = if in_domain {
        c - b + masses.weighted_error(Region::B) - masses.weighted_error(Region::C)
    } else {
        b - c
    };
    Ok(DatasetEvaluation {
        split: d.split(),
        err_delta: u2c.err - rc.err,
        ece_delta: u2c.ece - rc.ece,
        err_gap_from_regions,
        lemma1_residual,
        masses,
        rc: EvalReport {
            split: d.split(),
            predictor: Method::Rc,
            metrics: rc,
        },
        u2c: EvalReport {
            split: d.split(),
            predictor: Method::U2c,
            metrics: u2c,
        },
    })
}

/// Computes both residuals and fails unless each is within [`LEMMA1_TOLERANCE`].
pub fn verify_lemma1<P: ExtendedPredictor + ?Sized>(p: &P, d_in: &Dataset, d_out: &Dataset) -> Result<Lemma1Report> {
    let report = lemma1_residuals(p, d_in, d_out)?;
    report.check()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Likelihood identities
// ---------------------------------------------------------------------------

/// Likelihood summary of one method on the records of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionNll {
    pub region: Region,
    pub count: usize,
    /// `None` for an empty region.
    pub rc: Option<metrics::Nll>,
    pub u2c: Option<metrics::Nll>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitNll {
    /// U2C nll from the closed-form log-likelihood expression.
    pub u2c_formula: f64,
    /// U2C nll from the metrics module applied to predictor outputs.
    pub u2c_metrics: metrics::Nll,
    pub rc_metrics: metrics::Nll,
    pub per_region: Vec<RegionNll>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Report {
    pub out_domain: SplitNll,
    pub in_domain: SplitNll,
    /// Plain temperature-scaled classifier nll over in-domain records in `A ∪ B`.
    pub in_ab_classifier_nll: Option<f64>,
    /// RC nll over the same records.
    pub in_ab_rc_nll: Option<metrics::Nll>,
    pub violations: Vec<String>,
}

impl Lemma2Report {
    pub fn check(&self) -> Result<()> {
        match self.violations.first() {
            Some(v) => Err(Error::Verification(format!("likelihood identity: {v}"))),
            None => Ok(()),
        }
    }
}

fn log_sum_exp_local(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// One split evaluated once: every check reads from here.
struct SplitPass {
    preds_rc: Vec<ExtendedPrediction>,
    preds_u2c: Vec<ExtendedPrediction>,
    regions: Vec<Region>,
    labels: Vec<usize>,
    evals: Vec<Evaluation>,
}

impl SplitPass {
    fn masses(&self) -> RegionMasses {
        masses_from(&self.regions, &self.evals, &self.labels)
    }
}

fn split_pass<P: ExtendedPredictor + ?Sized>(p: &P, d: &Dataset) -> Result<SplitPass> {
    let m = p.model();
    let evals = evaluate_all(m, d.records())?;
    Ok(SplitPass {
        preds_rc: predict_evaluated(p, Method::Rc, &evals)?,
        preds_u2c: predict_evaluated(p, Method::U2c, &evals)?,
        regions: evals.iter().map(|ev| region_of(m, ev)).collect(),
        labels: d.labels(),
        evals,
    })
}

fn passes<P: ExtendedPredictor + ?Sized>(
    p: &P,
    d_in: &Dataset,
    d_out: &Dataset,
    what: &str,
) -> Result<(SplitPass, SplitPass)> {
    if d_in.is_empty() || d_out.is_empty() {
        return Err(Error::Input(format!("{what} needs non-empty in and out datasets")));
    }
    Ok((split_pass(p, d_in)?, split_pass(p, d_out)?))
}

fn subset<T: Clone>(items: &[T], keep: &[bool]) -> Vec<T> {
    items.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| x.clone()).collect()
}

fn split_nll(pass: &SplitPass, c: usize) -> Result<SplitNll> {
    let formula_terms: Vec<f64> = pass
        .evals
        .iter()
        .map(|ev| (&ev.scaled_logits, &ev.out_logit))
        .zip(&pass.labels)
        .map(|((z, t), &y)| {
            let lse = log_sum_exp_local(z.iter().copied().chain(std::iter::once(*t)));
            let target = if y == c + 1 { *t } else { z[y - 1] };
            lse - target
        })
        .collect();
    let per_region = Region::ALL
        .iter()
        .map(|&region| {
            let keep: Vec<bool> = pass.regions.iter().map(|&r| r == region).collect();
            let count = keep.iter().filter(|&&k| k).count();
            let labels = subset(&pass.labels, &keep);
            let summarize = |preds: &[ExtendedPrediction]| -> Result<Option<metrics::Nll>> {
                if count == 0 {
                    Ok(None)
                } else {
                    metrics::nll(&subset(preds, &keep), &labels).map(Some)
                }
            };
            Ok(RegionNll {
                region,
                count,
                rc: summarize(&pass.preds_rc)?,
                u2c: summarize(&pass.preds_u2c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitNll {
        u2c_formula: crate::numeric::pairwise_mean(&formula_terms),
        u2c_metrics: metrics::nll(&pass.preds_u2c, &pass.labels)?,
        rc_metrics: metrics::nll(&pass.preds_rc, &pass.labels)?,
        per_region,
    })
}

pub fn lemma2_table<P: ExtendedPredictor + ?Sized>(p: &P, d_in: &Dataset, d_out: &Dataset) -> Result<Lemma2Report> {
    let (pass_in, pass_out) = passes(p, d_in, d_out, "likelihood identities")?;
    lemma2_from(&pass_in, &pass_out, p.model().c)
}

fn lemma2_from(pass_in: &SplitPass, pass_out: &SplitPass, c: usize) -> Result<Lemma2Report> {
    let out_domain = split_nll(pass_out, c)?;
    let in_domain = split_nll(pass_in, c)?;
    let mut violations = Vec::new();

    for (name, s) in [("out-domain", &out_domain), ("in-domain", &in_domain)] {
        if s.u2c_metrics.infinite {
            violations.push(format!("U2C nll on {name} data is infinite"));
        } else if !((s.u2c_formula - s.u2c_metrics.finite_mean).abs() <= FORMULA_TOLERANCE) {
            violations.push(format!(
                "U2C nll on {name} data: closed form {} vs metrics {}",
                s.u2c_formula, s.u2c_metrics.finite_mean
            ));
        }
    }

    // Per-record RC clauses.
    for (i, region) in pass_out.regions.iter().enumerate() {
        let p_true = pass_out.preds_rc[i].probs[c];
        let rejected = region.rc_rejects();
        if rejected && p_true != 1.0 {
            violations.push(format!("RC nll on out-domain record {i} in {region} is not 0"));
            break;
        }
        if !rejected && p_true != 0.0 {
            violations.push(format!("RC nll on out-domain record {i} in {region} is not infinite"));
            break;
        }
    }
    for (i, region) in pass_in.regions.iter().enumerate() {
        if region.rc_rejects() && pass_in.preds_rc[i].probs[pass_in.labels[i] - 1] != 0.0 {
            violations.push(format!("RC nll on in-domain record {i} in {region} is not infinite"));
            break;
        }
    }

    let in_ab: Vec<bool> = pass_in.regions.iter().map(|r| !r.rc_rejects()).collect();
    let (in_ab_classifier_nll, in_ab_rc_nll) = if in_ab.iter().any(|&k| k) {
        let terms: Vec<f64> = pass_in
            .evals
            .iter()
            .zip(&pass_in.labels)
            .zip(&in_ab)
            .filter(|(_, &k)| k)
            .map(|((ev, &y), _)| log_sum_exp_local(ev.scaled_logits.iter().copied()) - ev.scaled_logits[y - 1])
            .collect();
        let plain = crate::numeric::pairwise_mean(&terms);
        let rc = metrics::nll(&subset(&pass_in.preds_rc, &in_ab), &subset(&pass_in.labels, &in_ab))?;
        if rc.infinite || !((rc.finite_mean - plain).abs() <= FORMULA_TOLERANCE) {
            violations.push(format!(
                "RC nll on in-domain A∪B ({}) differs from the classifier nll ({plain})",
                rc.value()
            ));
        }
        (Some(plain), Some(rc))
    } else {
        (None, None)
    };

    Ok(Lemma2Report {
        out_domain,
        in_domain,
        in_ab_classifier_nll,
        in_ab_rc_nll,
        violations,
    })
}

/// Builds the likelihood table and fails on the first violated clause.
pub fn verify_lemma2<P: ExtendedPredictor + ?Sized>(p: &P, d_in: &Dataset, d_out: &Dataset) -> Result<Lemma2Report> {
    let report = lemma2_table(p, d_in, d_out)?;
    report.check()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Region-conditional calibration identities
// ---------------------------------------------------------------------------

/// One closed-form calibration gap and its per-record re-derivation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceEntry {
    pub domain: String,
    pub method: Method,
    pub region: Region,
    pub count: usize,
    /// Closed-form expectation evaluated from raw scaled logits and `τ_u`.
    pub closed_form: Option<f64>,
    /// Mean `|1[prediction correct] - confidence|` over the predictor's outputs.
    pub rederived: Option<f64>,
}

impl EceEntry {
    pub fn agrees(&self) -> bool {
        match (self.closed_form, self.rederived) {
            (Some(a), Some(b)) => (a - b).abs() <= FORMULA_TOLERANCE,
            (None, None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceLemmaReport {
    pub entries: Vec<EceEntry>,
}

impl EceLemmaReport {
    pub fn check(&self) -> Result<()> {
        match self.entries.iter().find(|e| !e.agrees()) {
            Some(e) => Err(Error::Verification(format!(
                "calibration identity ({} {} in {}): closed form {:?} vs re-derived {:?}",
                e.domain, e.method, e.region, e.closed_form, e.rederived
            ))),
            None => Ok(()),
        }
    }

    pub fn get(&self, domain: &str, method: Method, region: Region) -> Option<&EceEntry> {
        self.entries
            .iter()
            .find(|e| e.domain == domain && e.method == method && e.region == region)
    }
}

/// Extended softmax written out directly; deliberately independent of `numeric::softmax`.
fn direct_probs(z: &[f64], out_logit: Option<f64>) -> Vec<f64> {
    let mut all: Vec<f64> = z.to_vec();
    all.extend(out_logit);
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = all.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// The closed-form per-record quantity of each region lemma, or `None` where
/// no closed form exists (U2C on in-domain data in A and C).
fn closed_form_term(out_domain: bool, method: Method, region: Region, z: &[f64], t: f64, label: usize) -> Option<f64> {
    let c = z.len();
    let plain = || direct_probs(z, None);
    let ext = || direct_probs(z, Some(t));
    let max_in = |p: &[f64]| p[..c].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match (out_domain, method, region) {
        (true, Method::Rc, Region::A | Region::B) => Some(max_in(&plain())),
        (true, Method::Rc, Region::C | Region::D) => Some(0.0),
        (true, Method::U2c, Region::A | Region::C) => Some(max_in(&ext())),
        (true, Method::U2c, Region::B | Region::D) => Some(1.0 - ext()[c]),
        (false, Method::Rc, Region::A | Region::B) => {
            let p = plain();
            let h = argmax(z) + 1;
            let hit = if h == label { 1.0 } else { 0.0 };
            Some((hit - max_in(&p)).abs())
        }
        (false, Method::Rc, Region::C | Region::D) => Some(1.0),
        (false, Method::U2c, Region::B | Region::D) => Some(ext()[c]),
        (false, Method::U2c, Region::A | Region::C) => None,
    }
}

fn ece_entries(pass: &SplitPass, out_domain: bool) -> Vec<EceEntry> {
    let domain = if out_domain { "out-domain" } else { "in-domain" };
    let mut entries = Vec::new();
    for method in [Method::Rc, Method::U2c] {
        let preds = match method {
            Method::Rc => &pass.preds_rc,
            Method::U2c => &pass.preds_u2c,
        };
        for region in Region::ALL {
            if !out_domain && method == Method::U2c && matches!(region, Region::A | Region::C) {
                continue;
            }
            let idx: Vec<usize> = (0..pass.regions.len()).filter(|&i| pass.regions[i] == region).collect();
            let count = idx.len();
            let (closed_form, rederived) = if count == 0 {
                (None, None)
            } else {
                let closed: Vec<f64> = idx
                    .iter()
                    .filter_map(|&i| {
                        let ev = &pass.evals[i];
                        closed_form_term(out_domain, method, region, &ev.scaled_logits, ev.out_logit, pass.labels[i])
                    })
                    .collect();
                let gaps: Vec<f64> = idx
                    .iter()
                    .map(|&i| {
                        let p = &preds[i];
                        let hit = if p.predicted == pass.labels[i] { 1.0 } else { 0.0 };
                        (hit - p.confidence).abs()
                    })
                    .collect();
                (
                    Some(crate::numeric::pairwise_mean(&closed)),
                    Some(crate::numeric::pairwise_mean(&gaps)),
                )
            };
            entries.push(EceEntry {
                domain: domain.to_string(),
                method,
                region,
                count,
                closed_form,
                rederived,
            });
        }
    }
    entries
}

pub fn ece_lemma_table<P: ExtendedPredictor + ?Sized>(p: &P, d_in: &Dataset, d_out: &Dataset) -> Result<EceLemmaReport> {
    let (pass_in, pass_out) = passes(p, d_in, d_out, "calibration identities")?;
    Ok(ece_from(&pass_in, &pass_out))
}

fn ece_from(pass_in: &SplitPass, pass_out: &SplitPass) -> EceLemmaReport {
    let mut entries = ece_entries(pass_out, true);
    entries.extend(ece_entries(pass_in, false));
    EceLemmaReport { entries }
}

/// Evaluates every region-conditional expression and fails on the first disagreement.
pub fn verify_ece_lemmas<P: ExtendedPredictor + ?Sized>(p: &P, d_in: &Dataset, d_out: &Dataset) -> Result<EceLemmaReport> {
    let report = ece_lemma_table(p, d_in, d_out)?;
    report.check()?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Combined report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub masses_in: RegionMasses,
    pub masses_out: RegionMasses,
    pub lemma1_residual_in: f64,
    pub lemma1_residual_out: f64,
    pub lemma1: Lemma1Report,
    pub lemma2: Lemma2Report,
    pub ece: EceLemmaReport,
}

impl RegionReport {
    pub fn check(&self) -> Result<()> {
        self.lemma1.check()?;
        self.lemma2.check()?;
        self.ece.check()
    }
}

/// All three tables, without asserting anything.
pub fn region_report<P: ExtendedPredictor + ?Sized>(p: &P, d_in: &Dataset, d_out: &Dataset) -> Result<RegionReport> {
    let (pass_in, pass_out) = passes(p, d_in, d_out, "region report")?;
    let lemma1 = lemma1_from(&pass_in, &pass_out)?;
    Ok(RegionReport {
        masses_in: lemma1.masses_in.clone(),
        masses_out: lemma1.masses_out.clone(),
        lemma1_residual_in: lemma1.residual_in,
        lemma1_residual_out: lemma1.residual_out,
        lemma2: lemma2_from(&pass_in, &pass_out, p.model().c)?,
        ece: ece_from(&pass_in, &pass_out),
        lemma1,
    })
}

/// Fixed-width 2x2 table: rows are RC accept/reject, columns U2C accept/reject.
pub fn format_quadrants(report: &RegionReport) -> String {
    let cell = |r: Region| {
        format!(
            "{r}  in {:>6.2}%  out {:>6.2}%",
            100.0 * report.masses_in.mass(r),
            100.0 * report.masses_out.mass(r)
        )
    };
    let mut s = String::new();
    let _ = writeln!(s, "{:<12}| {:<30}| {:<30}", "", "U2C accepts", "U2C rejects");
    let _ = writeln!(s, "{:-<12}+{:-<31}+{:-<31}", "", "", "");
    let _ = writeln!(s, "{:<12}| {:<30}| {:<30}", "RC accepts", cell(Region::A), cell(Region::B));
    let _ = writeln!(s, "{:<12}| {:<30}| {:<30}", "RC rejects", cell(Region::C), cell(Region::D));
    s
}

/// CSV of `(u, π_f, correct)` per record, where `π_f` is the top temperature-scaled
/// softmax probability and `correct` whether `argmax f` matches the label.
pub fn write_triples<W: Write>(m: &CalibratedModel, d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    w.write_record(["id", "u", "confidence", "correct", "region"]).map_err(csv_err)?;
    for r in d.records() {
        let ev = m.evaluate(r)?;
        let p = direct_probs(&ev.scaled_logits, None);
        let top = argmax(&p);
        w.write_record([
            r.id.clone(),
            format!("{:?}", ev.u),
            format!("{:?}", p[top]),
            u8::from(top + 1 == r.label).to_string(),
            region_of(m, &ev).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))
}
