//! Extended (c+1)-class predictions: reject-or-classify (RC) and unified
//! uncertainty calibration (U2C), plus the A/B/C/D region partition.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibratedModel, Evaluation};
use crate::data::Record;
use crate::error::{Error, Result};
use crate::numeric::{argmax, max_value, softmax};

/// Quadrant of the (RC reject, U2C reject) plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Neither rejects.
    A,
    /// Only U2C rejects.
    B,
    /// Only RC rejects.
    C,
    /// Both reject.
    D,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::A, Region::B, Region::C, Region::D];

    pub fn from_rejections(rc_rejects: bool, u2c_rejects: bool) -> Self {
        match (rc_rejects, u2c_rejects) {
            (false, false) => Region::A,
            (false, true) => Region::B,
            (true, false) => Region::C,
            (true, true) => Region::D,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn rc_rejects(self) -> bool {
        matches!(self, Region::C | Region::D)
    }

    pub fn u2c_rejects(self) -> bool {
        matches!(self, Region::B | Region::D)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rc,
    U2c,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rc => "rc",
            Method::U2c => "u2c",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rc" => Ok(Method::Rc),
            "u2c" => Ok(Method::U2c),
            other => Err(Error::Parse(format!("unknown predictor {other:?}"))),
        }
    }
}

/// A probability vector over `c + 1` classes and what it implies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtendedPrediction {
    pub probs: Vec<f64>,
    /// 1-based; `c + 1` means "abstain".
    pub predicted: usize,
    /// Largest entry of `probs`.
    pub confidence: f64,
    pub region: Region,
}

impl ExtendedPrediction {
    fn from_probs(probs: Vec<f64>, region: Region) -> Self {
        let top = argmax(&probs);
        ExtendedPrediction {
            predicted: top + 1,
            confidence: probs[top],
            probs,
            region,
        }
    }

    /// Whether the prediction lands on the abstention class.
    pub fn abstains(&self) -> bool {
        self.predicted == self.probs.len()
    }
}

/// Region of an already evaluated record. U2C rejection uses a strict
/// inequality so that it agrees with the lowest-index argmax of the U2C vector.
pub fn region_of(m: &CalibratedModel, ev: &Evaluation) -> Region {
    let rc_rejects = ev.u >= m.theta;
    let u2c_rejects = max_value(&ev.scaled_logits) < ev.out_logit;
    Region::from_rejections(rc_rejects, u2c_rejects)
}

pub fn assign_region(m: &CalibratedModel, r: &Record) -> Result<Region> {
    Ok(region_of(m, &m.evaluate(r)?))
}

pub fn rc_from_evaluation(m: &CalibratedModel, ev: &Evaluation) -> Result<ExtendedPrediction> {
    let region = region_of(m, ev);
    let probs = if ev.u >= m.theta {
        let mut p = vec![0.0; m.c + 1];
        p[m.c] = 1.0;
        p
    } else {
        let mut p = softmax(&ev.scaled_logits)?;
        p.push(0.0);
        p
    };
    Ok(ExtendedPrediction::from_probs(probs, region))
}

pub fn u2c_from_evaluation(m: &CalibratedModel, ev: &Evaluation) -> Result<ExtendedPrediction> {
    let region = region_of(m, ev);
    let mut extended = ev.scaled_logits.clone();
    extended.push(ev.out_logit);
    Ok(ExtendedPrediction::from_probs(softmax(&extended)?, region))
}

/// `(softmax(f/τ), 0)` when `u < θ`, else a certain abstention.
pub fn rc_predict(m: &CalibratedModel, r: &Record) -> Result<ExtendedPrediction> {
    rc_from_evaluation(m, &m.evaluate(r)?)
}

/// `softmax(f/τ ‖ τ_u(u))`.
pub fn u2c_predict(m: &CalibratedModel, r: &Record) -> Result<ExtendedPrediction> {
    u2c_from_evaluation(m, &m.evaluate(r)?)
}

/// Something that produces RC and U2C predictions for a model.
///
/// [`CalibratedModel`] is the real implementation; the indirection lets the
/// verification code be run against a deliberately broken predictor.
pub trait ExtendedPredictor: Sync {
    fn model(&self) -> &CalibratedModel;

    fn rc_from(&self, ev: &Evaluation) -> Result<ExtendedPrediction> {
        rc_from_evaluation(self.model(), ev)
    }

    fn u2c_from(&self, ev: &Evaluation) -> Result<ExtendedPrediction> {
        u2c_from_evaluation(self.model(), ev)
    }

    fn predict_from(&self, method: Method, ev: &Evaluation) -> Result<ExtendedPrediction> {
        match method {
            Method::Rc => self.rc_from(ev),
            Method::U2c => self.u2c_from(ev),
        }
    }

    fn rc(&self, r: &Record) -> Result<ExtendedPrediction> {
        self.rc_from(&self.model().evaluate(r)?)
    }

    fn u2c(&self, r: &Record) -> Result<ExtendedPrediction> {
        self.u2c_from(&self.model().evaluate(r)?)
    }

    fn predict(&self, method: Method, r: &Record) -> Result<ExtendedPrediction> {
        self.predict_from(method, &self.model().evaluate(r)?)
    }
}

impl ExtendedPredictor for CalibratedModel {
    fn model(&self) -> &CalibratedModel {
        self
    }
}

/// Negative control: a U2C predictor that swaps the first class with the
/// abstention class. Verification must fail against it.
#[doc(hidden)]
pub struct SwappedU2c<'a>(pub &'a CalibratedModel);

impl ExtendedPredictor for SwappedU2c<'_> {
    fn model(&self) -> &CalibratedModel {
        self.0
    }

    fn u2c_from(&self, ev: &Evaluation) -> Result<ExtendedPrediction> {
        let p = u2c_from_evaluation(self.0, ev)?;
        let mut probs = p.probs;
        let last = probs.len() - 1;
        probs.swap(0, last);
        Ok(ExtendedPrediction::from_probs(probs, p.region))
    }
}

/// Evaluates every record in parallel; output order matches input order.
pub fn evaluate_all(m: &CalibratedModel, records: &[Record]) -> Result<Vec<Evaluation>> {
    records.par_iter().map(|r| m.evaluate(r)).collect()
}

/// Predictions from already evaluated records.
pub fn predict_evaluated<P: ExtendedPredictor + ?Sized>(
    p: &P,
    method: Method,
    evaluations: &[Evaluation],
) -> Result<Vec<ExtendedPrediction>> {
    evaluations.par_iter().map(|ev| p.predict_from(method, ev)).collect()
}

/// Predicts every record in parallel; output order matches input order.
pub fn predict_all<P: ExtendedPredictor + ?Sized>(
    p: &P,
    method: Method,
    records: &[Record],
) -> Result<Vec<ExtendedPrediction>> {
    records.par_iter().map(|r| p.predict(method, r)).collect()
}

/// CSV with columns `id,predicted,confidence,region,prob_1..prob_{c+1}`.
pub fn write_predictions<W: Write>(records: &[Record], preds: &[ExtendedPrediction], writer: W) -> Result<()> {
    if records.len() != preds.len() {
        return Err(Error::Input("one prediction per record is required".into()));
    }
    let width = preds.first().map_or(0, |p| p.probs.len());
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    let mut header = vec!["id".to_string(), "predicted".into(), "confidence".into(), "region".into()];
    header.extend((1..=width).map(|j| format!("prob_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (r, p) in records.iter().zip(preds) {
        let mut row = vec![
            r.id.clone(),
            p.predicted.to_string(),
            format!("{:?}", p.confidence),
            p.region.to_string(),
        ];
        row.extend(p.probs.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))
}
