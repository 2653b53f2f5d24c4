//! Command line front end. Every subcommand writes deterministic files and a
//! short human-readable summary on standard output.
//!
//! Exit codes: 0 success, 2 usage, 3 data or compatibility, 4 verification
//! failure, 5 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::calibration::{fit_model, load_model, save_model, CalibratedModel, CalibratorForm, FitOptions};
use crate::data::{load_dataset, load_dataset_infer_split, load_manifest, save_dataset, Dataset, LinearHead, Role, Split};
use crate::epistemic::{EstimatorKind, EstimatorOptions};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BINS;
use crate::predict::{predict_all, ExtendedPredictor, Method, SwappedU2c};
use crate::regions::{self, DatasetEvaluation};
use crate::synth::{generate, Preset, SynthConfig};

pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "u2c", version, about = "Unified uncertainty calibration over precomputed logits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: three CSV splits, the config and a manifest.
    Synth(SynthArgs),
    /// Fit temperature, estimator, threshold and τ_u on a validation set.
    Fit(FitArgs),
    /// Write per-record RC or U2C predictions.
    Predict(PredictArgs),
    /// Metrics for RC and U2C on each evaluation dataset.
    Eval(EvalArgs),
    /// Check the error, likelihood and calibration identities.
    Verify(VerifyArgs),
    /// Region masses, the quadrant table and (u, confidence, correct) triples.
    Regions(RegionsArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "default")]
    preset: Preset,
    /// Full generator config as JSON; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Records per split.
    #[arg(long)]
    n: Option<usize>,
    /// Label-noise rate.
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Evaluation dataset; repeatable. The split is inferred from the labels.
    #[arg(long = "eval")]
    eval: Vec<PathBuf>,
    /// JSON manifest of {path, split, role} entries.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Validation dataset (in-domain).
    #[arg(long, required_unless_present = "manifest")]
    val: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Model file to write; the fit log goes next to it as `<stem>.fit.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "maxlogit")]
    estimator: EstimatorKind,
    /// Neighbours for the knn estimator.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Fraction of activations kept by ash.
    #[arg(long = "ash-p", default_value_t = 0.1)]
    ash_p: f64,
    /// Linear head JSON ({weights, bias}) used by ash.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long, default_value_t = crate::calibration::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long = "tau-u", default_value = "mlp")]
    tau_u: CalibratorForm,
    #[arg(long, default_value_t = crate::calibration::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset to predict.
    #[arg(long = "eval")]
    eval: PathBuf,
    #[arg(long, default_value = "u2c")]
    method: Method,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Directory for the report JSON files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Write the full report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run against a deliberately broken U2C predictor (negative control).
    #[arg(long, hide = true)]
    break_predictor: bool,
}

#[derive(Debug, Args)]
struct RegionsArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Directory for the region report JSON and triples CSV files.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, stdout),
        Command::Fit(a) => cmd_fit(a, stdout),
        Command::Predict(a) => cmd_predict(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout),
        Command::Verify(a) => cmd_verify(a, stdout),
        Command::Regions(a) => cmd_regions(a, stdout),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(format!("json encode: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn print(stdout: &mut dyn Write, text: &str) -> Result<()> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(a: SynthArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => read_json::<SynthConfig>(path)?,
        None => SynthConfig::preset(a.preset),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.n {
        cfg.n_train_val = n;
        cfg.n_test_in = n;
        cfg.n_out = n;
    }
    if let Some(eta) = a.eta {
        cfg.eta = eta;
    }
    let data = generate(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for d in [&data.train_val, &data.test_in, &data.out_domain] {
        save_dataset(d, a.out.join(format!("{}.csv", d.split())))?;
    }
    write_file(&a.out.join("synth-config.json"), to_json(&cfg)?.as_bytes())?;
    write_file(&a.out.join("head.json"), to_json(&cfg.head()?)?.as_bytes())?;
    let manifest = serde_json::json!([
        {"path": "train-val.csv", "split": "train-val", "role": "validation"},
        {"path": "test-in.csv", "split": "test-in", "role": "evaluation"},
        {"path": "out-domain.csv", "split": "out-domain", "role": "evaluation"},
    ]);
    write_file(&a.out.join("manifest.json"), to_json(&manifest)?.as_bytes())?;
    print(
        stdout,
        &format!(
            "wrote {} train-val, {} test-in, {} out-domain records (c = {}, seed {})\n",
            data.train_val.len(),
            data.test_in.len(),
            data.out_domain.len(),
            cfg.c,
            cfg.seed
        ),
    )
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

fn validation_path(val: Option<PathBuf>, manifest: Option<&Path>) -> Result<PathBuf> {
    if let Some(v) = val {
        return Ok(v);
    }
    let manifest = manifest.ok_or_else(|| Error::Input("either --val or --manifest is required".into()))?;
    let mut entries = load_manifest(manifest)?.into_iter().filter(|e| e.role == Role::Validation);
    match (entries.next(), entries.next()) {
        (Some(e), None) => Ok(e.path),
        (None, _) => Err(Error::Input("manifest has no validation entry".into())),
        (Some(_), Some(_)) => Err(Error::Input("manifest has more than one validation entry".into())),
    }
}

/// `model.json` → `model.fit.json`.
pub fn fit_log_path(model_path: &Path) -> PathBuf {
    let stem = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model_path.with_file_name(format!("{stem}.fit.json"))
}

fn cmd_fit(a: FitArgs, stdout: &mut dyn Write) -> Result<()> {
    let val_path = validation_path(a.val, a.manifest.as_deref())?;
    let validation = load_dataset(&val_path, Split::TrainVal)?;
    let head = match &a.head {
        Some(p) => {
            let h: LinearHead = read_json(p)?;
            h.validate()?;
            Some(h)
        }
        None => None,
    };
    let options = FitOptions {
        estimator: a.estimator,
        estimator_options: EstimatorOptions {
            k: a.k,
            ash_keep_fraction: a.ash_p,
            head,
            ..EstimatorOptions::default()
        },
        alpha: a.alpha,
        form: a.tau_u,
        hidden: a.hidden,
        seed: a.seed,
    };
    let (model, log) = fit_model(&validation, &options)?;
    save_model(&model, &a.out)?;
    write_file(&fit_log_path(&a.out), to_json(&log)?.as_bytes())?;
    let mut s = String::new();
    let _ = writeln!(s, "tau        {:.6}", log.tau);
    let _ = writeln!(s, "theta      {:.6}", log.theta);
    let _ = writeln!(
        s,
        "relabeled  {} of {} (expected {}){}",
        log.relabeled,
        log.m,
        log.expected_relabeled,
        if log.threshold_degenerate { "  [ties at the threshold]" } else { "" }
    );
    let _ = writeln!(s, "tau_u      {:?}, final loss {:.6}", log.form, log.final_loss);
    let _ = writeln!(s, "grad check max relative error {:.2e}", log.gradient_check_max_rel_error);
    print(stdout, &s)
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

fn cmd_predict(a: PredictArgs, stdout: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let d = load_dataset_infer_split(&a.eval)?;
    model.check_compatible(&d)?;
    let preds = predict_all(&model, a.method, d.records())?;
    match &a.out {
        Some(path) => {
            let mut buf = Vec::new();
            crate::predict::write_predictions(d.records(), &preds, &mut buf)?;
            write_file(path, &buf)
        }
        None => crate::predict::write_predictions(d.records(), &preds, stdout),
    }
}

// ---------------------------------------------------------------------------
// eval / verify / regions
// ---------------------------------------------------------------------------

/// A loaded evaluation dataset with the name used for its output files.
struct NamedDataset {
    name: String,
    data: Dataset,
}

fn load_eval_sets(args: &DataArgs) -> Result<Vec<NamedDataset>> {
    let mut sets = Vec::new();
    if let Some(m) = &args.manifest {
        for e in load_manifest(m)?.into_iter().filter(|e| e.role == Role::Evaluation) {
            sets.push((e.path.clone(), load_dataset(&e.path, e.split)?));
        }
    }
    for p in &args.eval {
        sets.push((p.clone(), load_dataset_infer_split(p)?));
    }
    if sets.is_empty() {
        return Err(Error::Input("no evaluation datasets: pass --eval or --manifest".into()));
    }
    let mut named: Vec<NamedDataset> = Vec::with_capacity(sets.len());
    for (path, data) in sets {
        let base = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let mut name = base.clone();
        let mut i = 2;
        while named.iter().any(|n| n.name == name) {
            name = format!("{base}-{i}");
            i += 1;
        }
        named.push(NamedDataset { name, data });
    }
    Ok(named)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn signed_pct(x: f64) -> String {
    format!("{:+.1}", 100.0 * x)
}

fn format_nll(report: &crate::metrics::MetricsReport) -> String {
    if report.nll_infinite {
        "inf".into()
    } else {
        format!("{:.3}", report.nll)
    }
}

/// Side-by-side table in percent with one decimal, U2C minus RC in the delta columns.
pub fn format_eval_table(rows: &[(String, DatasetEvaluation)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<20} {:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}",
        "dataset", "split", "err RC", "err U2C", "Δerr", "ece RC", "ece U2C", "Δece", "nll RC", "nll U2C"
    );
    for (name, e) in rows {
        let (rc, u2c) = (&e.rc.metrics, &e.u2c.metrics);
        let _ = writeln!(
            s,
            "{:<20} {:<16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8} {:>8}",
            name,
            e.split.to_string(),
            pct(rc.err),
            pct(u2c.err),
            signed_pct(e.err_delta),
            pct(rc.ece),
            pct(u2c.ece),
            signed_pct(e.ece_delta),
            format_nll(rc),
            format_nll(u2c)
        );
    }
    s
}

fn load_model_for(path: &Path, sets: &[NamedDataset]) -> Result<CalibratedModel> {
    let model = load_model(path)?;
    for s in sets {
        model
            .check_compatible(&s.data)
            .map_err(|e| Error::Compatibility(format!("{}: {e}", s.name)))?;
    }
    Ok(model)
}

#[derive(serde::Serialize)]
struct EvalSummaryEntry<'a> {
    dataset: &'a str,
    #[serde(flatten)]
    evaluation: &'a DatasetEvaluation,
}

fn cmd_eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    if a.bins == 0 {
        return Err(Error::Input("--bins must be at least 1".into()));
    }
    let sets = load_eval_sets(&a.data)?;
    let model = load_model_for(&a.model, &sets)?;
    let mut rows = Vec::with_capacity(sets.len());
    for s in &sets {
        rows.push((s.name.clone(), regions::evaluate_dataset(&model, &s.data, a.bins)?));
    }
    if let Some(dir) = &a.out {
        for (name, e) in &rows {
            write_file(&dir.join(format!("{name}.rc.json")), to_json(&e.rc)?.as_bytes())?;
            write_file(&dir.join(format!("{name}.u2c.json")), to_json(&e.u2c)?.as_bytes())?;
        }
        let summary: Vec<EvalSummaryEntry> = rows
            .iter()
            .map(|(name, e)| EvalSummaryEntry {
                dataset: name,
                evaluation: e,
            })
            .collect();
        write_file(&dir.join("eval-summary.json"), to_json(&summary)?.as_bytes())?;
    }
    print(stdout, &format_eval_table(&rows))
}

/// Every (in-domain, out-domain) pairing of the loaded datasets.
fn pairs(sets: &[NamedDataset]) -> Result<Vec<(&NamedDataset, &NamedDataset)>> {
    let ins: Vec<&NamedDataset> = sets.iter().filter(|s| s.data.split().is_in_domain()).collect();
    let outs: Vec<&NamedDataset> = sets.iter().filter(|s| !s.data.split().is_in_domain()).collect();
    if ins.is_empty() || outs.is_empty() {
        return Err(Error::Input(
            "need at least one in-domain and one out-domain dataset".into(),
        ));
    }
    Ok(ins
        .iter()
        .flat_map(|i| outs.iter().map(move |o| (*i, *o)))
        .collect())
}

#[derive(serde::Serialize)]
struct PairReport<'a> {
    in_domain: &'a str,
    out_domain: &'a str,
    #[serde(flatten)]
    report: regions::RegionReport,
}

fn verify_with<P: ExtendedPredictor + ?Sized>(
    p: &P,
    pairs: &[(&NamedDataset, &NamedDataset)],
    stdout: &mut dyn Write,
) -> Result<Vec<(String, String, regions::RegionReport)>> {
    let mut reports = Vec::new();
    let mut first_failure = None;
    let mut s = String::new();
    for (i, o) in pairs {
        let report = regions::region_report(p, &i.data, &o.data)?;
        let _ = writeln!(s, "{} / {}", i.name, o.name);
        let clauses = [
            ("error identity", report.lemma1.check()),
            ("likelihood identity", report.lemma2.check()),
            ("calibration identity", report.ece.check()),
        ];
        for (label, outcome) in clauses {
            match outcome {
                Ok(()) => {
                    let _ = writeln!(s, "  PASS  {label}");
                }
                Err(e) => {
                    let detail = match &e {
                        Error::Verification(msg) => msg.clone(),
                        other => other.to_string(),
                    };
                    let _ = writeln!(s, "  FAIL  {detail}");
                    first_failure.get_or_insert(e);
                }
            }
        }
        let _ = writeln!(
            s,
            "  residuals: in {:.3e}, out {:.3e}",
            report.lemma1_residual_in, report.lemma1_residual_out
        );
        reports.push((i.name.clone(), o.name.clone(), report));
    }
    print(stdout, &s)?;
    match first_failure {
        Some(e) => Err(e),
        None => Ok(reports),
    }
}

fn write_pair_reports(path: &Path, reports: &[(String, String, regions::RegionReport)]) -> Result<()> {
    let out: Vec<PairReport> = reports
        .iter()
        .map(|(i, o, r)| PairReport {
            in_domain: i,
            out_domain: o,
            report: r.clone(),
        })
        .collect();
    write_file(path, to_json(&out)?.as_bytes())
}

fn cmd_verify(a: VerifyArgs, stdout: &mut dyn Write) -> Result<()> {
    let sets = load_eval_sets(&a.data)?;
    let model = load_model_for(&a.model, &sets)?;
    let pairs = pairs(&sets)?;
    let reports = if a.break_predictor {
        verify_with(&SwappedU2c(&model), &pairs, stdout)?
    } else {
        verify_with(&model, &pairs, stdout)?
    };
    if let Some(path) = &a.out {
        write_pair_reports(path, &reports)?;
    }
    Ok(())
}

fn cmd_regions(a: RegionsArgs, stdout: &mut dyn Write) -> Result<()> {
    let sets = load_eval_sets(&a.data)?;
    let model = load_model_for(&a.model, &sets)?;
    let mut s = String::new();
    let mut reports = Vec::new();
    for (i, o) in pairs(&sets)? {
        let report = regions::region_report(&model, &i.data, &o.data)?;
        let _ = writeln!(s, "{} / {}", i.name, o.name);
        s.push_str(&regions::format_quadrants(&report));
        s.push('\n');
        reports.push((i.name.clone(), o.name.clone(), report));
    }
    if let Some(dir) = &a.out {
        write_pair_reports(&dir.join("region-report.json"), &reports)?;
        for set in &sets {
            let mut buf = Vec::new();
            regions::write_triples(&model, &set.data, &mut buf)?;
            write_file(&dir.join(format!("{}.triples.csv", set.name)), &buf)?;
        }
    }
    print(stdout, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("u2c").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_capture(&["fit", "--out", "m.json"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["eval", "--model", "m.json", "--nope"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["fit", "--val", "v.csv", "--out", "m.json", "--tau-u", "cubic"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_0() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("synth"));
        assert!(!out.contains("break-predictor"));
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let (code, _, err) = run_capture(&["fit", "--val", "/nonexistent/v.csv", "--out", "/tmp/never.json"]);
        assert_eq!(code, 3);
        assert!(err.contains("/nonexistent/v.csv"));
    }

    #[test]
    fn fit_log_sits_next_to_the_model() {
        assert_eq!(fit_log_path(Path::new("out/model.json")), PathBuf::from("out/model.fit.json"));
    }
}
