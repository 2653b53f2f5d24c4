//! Records, datasets and their CSV / manifest representations.
//!
//! Labels are 1-based everywhere: `1..=c` are in-domain classes and `c + 1`
//! marks an out-domain example.
//!
//! A dataset file is a CSV with a mandatory header:
//!
//! ```text
//! id,label,logit_0,...,logit_{c-1}[,feat_0,...,feat_{d-1}][,u]
//! ```
//!
//! Out-domain files may omit `label`; every row then gets `c + 1`.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One example: a logit vector plus optional representation and precomputed score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// 1-based label; `c + 1` for out-domain.
    pub label: usize,
    pub logits: Vec<f64>,
    pub features: Option<Vec<f64>>,
    /// Precomputed epistemic score. When present it overrides any fitted estimator.
    pub u_score: Option<f64>,
}

impl Record {
    pub fn new(id: impl Into<String>, label: usize, logits: Vec<f64>) -> Self {
        Record {
            id: id.into(),
            label,
            logits,
            features: None,
            u_score: None,
        }
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = Some(features);
        self
    }

    pub fn with_u(mut self, u: f64) -> Self {
        self.u_score = Some(u);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainVal,
    TestIn,
    CovariateShift,
    OutDomain,
}

impl Split {
    pub fn is_in_domain(self) -> bool {
        !matches!(self, Split::OutDomain)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainVal => "train-val",
            Split::TestIn => "test-in",
            Split::CovariateShift => "covariate-shift",
            Split::OutDomain => "out-domain",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-val" => Ok(Split::TrainVal),
            "test-in" => Ok(Split::TestIn),
            "covariate-shift" => Ok(Split::CovariateShift),
            "out-domain" => Ok(Split::OutDomain),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

/// A validated, split-tagged collection of records sharing `c` and the feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    c: usize,
    d_feat: Option<usize>,
    split: Split,
    records: Vec<Record>,
}

impl Dataset {
    /// Validates every record against the dataset-wide invariants.
    pub fn new(c: usize, split: Split, records: Vec<Record>) -> Result<Self> {
        if c < 1 {
            return Err(Error::Schema("class count must be at least 1".into()));
        }
        let d_feat = records
            .iter()
            .find_map(|r| r.features.as_ref().map(Vec::len));
        for (row, r) in records.iter().enumerate() {
            validate_record(r, row + 1, c, d_feat, split)?;
        }
        Ok(Dataset {
            c,
            d_feat,
            split,
            records,
        })
    }

    /// Copy with a different record list, skipping the label checks that forbid
    /// `c + 1` in in-domain splits. Used for the relabeled validation set.
    pub(crate) fn with_records_unchecked(&self, records: Vec<Record>) -> Self {
        Dataset {
            c: self.c,
            d_feat: self.d_feat,
            split: self.split,
            records,
        }
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn d_feat(&self) -> Option<usize> {
        self.d_feat
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// True when every record carries a precomputed score.
    pub fn has_u_scores(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.u_score.is_some())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Records whose features all exist (mahalanobis/knn/ash need them).
    pub fn has_features(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.features.is_some())
    }
}

fn validate_record(r: &Record, row: usize, c: usize, d_feat: Option<usize>, split: Split) -> Result<()> {
    if r.logits.len() != c {
        return Err(Error::Schema(format!(
            "row {row} ({}): expected {c} logits, found {}",
            r.id,
            r.logits.len()
        )));
    }
    if let Some(j) = r.logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "row {row} ({}), column logit_{j}: non-finite value {}",
            r.id, r.logits[j]
        )));
    }
    match (&r.features, d_feat) {
        (Some(f), Some(d)) if f.len() != d => {
            return Err(Error::Schema(format!(
                "row {row} ({}): expected {d} features, found {}",
                r.id,
                f.len()
            )))
        }
        (Some(f), _) => {
            if let Some(j) = f.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "row {row} ({}), column feat_{j}: non-finite value {}",
                    r.id, f[j]
                )));
            }
        }
        _ => {}
    }
    if let Some(u) = r.u_score {
        if !u.is_finite() {
            return Err(Error::Data(format!(
                "row {row} ({}), column u: non-finite value {u}",
                r.id
            )));
        }
    }
    let valid = match split {
        Split::OutDomain => r.label == c + 1,
        _ => (1..=c).contains(&r.label),
    };
    if !valid {
        return Err(Error::Data(format!(
            "row {row} ({}): label {} out of range for split {split} with c = {c}",
            r.id, r.label
        )));
    }
    Ok(())
}

/// Fixed linear read-out `logits = W * features + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// `c` rows of `d` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let head = LinearHead { weights, bias };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.bias.len() {
            return Err(Error::Invariant(format!(
                "linear head has {} weight rows and {} biases",
                self.weights.len(),
                self.bias.len()
            )));
        }
        let d = self.weights[0].len();
        if self.weights.iter().any(|row| row.len() != d) {
            return Err(Error::Invariant("linear head weight rows differ in length".into()));
        }
        let finite = self.weights.iter().flatten().chain(&self.bias).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invariant("linear head has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// Column layout detected from a CSV header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub id: usize,
    pub label: Option<usize>,
    pub logits: Vec<usize>,
    pub features: Vec<usize>,
    pub u: Option<usize>,
    pub width: usize,
}

impl CsvSchema {
    pub fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let mut id = None;
        let mut label = None;
        let mut u = None;
        let mut logits = Vec::new();
        let mut features = Vec::new();
        for (col, name) in header.iter().enumerate() {
            let name = name.trim();
            if name == "id" {
                id = Some(col);
            } else if name == "label" {
                label = Some(col);
            } else if name == "u" {
                u = Some(col);
            } else if let Some(i) = name.strip_prefix("logit_") {
                logits.push((parse_index(i, name)?, col));
            } else if let Some(i) = name.strip_prefix("feat_") {
                features.push((parse_index(i, name)?, col));
            } else {
                return Err(Error::Schema(format!("unknown header column {name:?}")));
            }
        }
        let id = id.ok_or_else(|| Error::Schema("header lacks an `id` column".into()))?;
        let logits = ordered_columns(logits, "logit")?;
        if logits.is_empty() {
            return Err(Error::Schema("header declares no logit_ columns".into()));
        }
        let features = ordered_columns(features, "feat")?;
        Ok(CsvSchema {
            id,
            label,
            logits,
            features,
            u,
            width: header.len(),
        })
    }

    pub fn classes(&self) -> usize {
        self.logits.len()
    }
}

fn parse_index(s: &str, name: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Schema(format!("bad column index in header {name:?}")))
}

fn ordered_columns(mut cols: Vec<(usize, usize)>, prefix: &str) -> Result<Vec<usize>> {
    cols.sort_unstable();
    for (expected, (i, _)) in cols.iter().enumerate() {
        if *i != expected {
            return Err(Error::Schema(format!(
                "{prefix}_ columns must be numbered 0..{} without gaps",
                cols.len()
            )));
        }
    }
    Ok(cols.into_iter().map(|(_, col)| col).collect())
}

fn parse_cell(text: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| {
        Error::Data(format!("row {row}, column {column}: cannot parse {text:?} as a number"))
    })?;
    if !v.is_finite() {
        return Err(Error::Data(format!("row {row}, column {column}: non-finite value {text:?}")));
    }
    Ok(v)
}

/// Parses a dataset from any reader. `row` numbers in errors are 1-based data rows.
pub fn read_dataset<R: Read>(reader: R, split: Split) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .clone();
    let schema = CsvSchema::from_header(&header)?;
    let c = schema.classes();
    if schema.label.is_none() && split != Split::OutDomain {
        return Err(Error::Schema(format!(
            "only out-domain files may omit the label column (split {split})"
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Schema(format!("row {row_no}: {e}")))?;
        if row.len() != schema.width {
            return Err(Error::Schema(format!(
                "row {row_no}: expected {} fields, found {}",
                schema.width,
                row.len()
            )));
        }
        let label = match schema.label {
            Some(col) => {
                let text = row[col].trim();
                if text.is_empty() && split == Split::OutDomain {
                    c + 1
                } else {
                    text.parse::<usize>().map_err(|_| {
                        Error::Data(format!("row {row_no}, column label: bad label {text:?}"))
                    })?
                }
            }
            None => c + 1,
        };
        let logits = schema
            .logits
            .iter()
            .enumerate()
            .map(|(j, &col)| parse_cell(&row[col], row_no, &format!("logit_{j}")))
            .collect::<Result<Vec<_>>>()?;
        let features = if schema.features.is_empty() {
            None
        } else {
            Some(
                schema
                    .features
                    .iter()
                    .enumerate()
                    .map(|(j, &col)| parse_cell(&row[col], row_no, &format!("feat_{j}")))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let u_score = match schema.u {
            Some(col) if !row[col].trim().is_empty() => Some(parse_cell(&row[col], row_no, "u")?),
            _ => None,
        };
        records.push(Record {
            id: row[schema.id].to_string(),
            label,
            logits,
            features,
            u_score,
        });
    }
    Dataset::new(c, split, records)
}

pub fn load_dataset(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, split).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a file without a declared split: files whose labels are all `c + 1`
/// (or that omit the label column) are out-domain, everything else test-in.
pub fn load_dataset_infer_split(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match read_dataset(bytes.as_slice(), Split::OutDomain) {
        Ok(d) => Ok(d),
        Err(Error::Data(_)) => read_dataset(bytes.as_slice(), Split::TestIn),
        Err(e) => Err(e),
    }
}

/// Writes floats with the shortest representation that parses back to the same bits.
pub fn write_dataset<W: Write>(d: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..d.c).map(|j| format!("logit_{j}")));
    if let Some(df) = d.d_feat {
        header.extend((0..df).map(|j| format!("feat_{j}")));
    }
    let with_u = d.records.iter().any(|r| r.u_score.is_some());
    if with_u {
        header.push("u".into());
    }
    let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in &d.records {
        let mut row = vec![r.id.clone(), r.label.to_string()];
        row.extend(r.logits.iter().map(|v| format!("{v:?}")));
        if let Some(df) = d.d_feat {
            match &r.features {
                Some(f) => row.extend(f.iter().map(|v| format!("{v:?}"))),
                None => row.extend(std::iter::repeat(String::new()).take(df)),
            }
        }
        if with_u {
            row.push(r.u_score.map(|v| format!("{v:?}")).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    Ok(())
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(d, std::io::BufWriter::new(file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Validation,
    Evaluation,
}

/// One entry of a JSON manifest: `{"path": ..., "split": ..., "role": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    pub role: Role,
}

/// Reads a manifest (a JSON array of entries). Relative paths resolve against
/// the manifest's own directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}
