//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any fails. Criteria run sequentially so their
//! wall-clock budgets are measured without interference.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use u2c::calibration::{
    fit_model, fit_temperature, fit_threshold, mlp_from_linear, relabel_scored, CalibratedModel, CalibratorForm,
    EpistemicCalibrator, EpistemicObjective, FitOptions,
};
use u2c::epistemic::{fit_estimator, EstimatorKind, EstimatorOptions};
use u2c::metrics::{compute_metrics, BinStat};
use u2c::predict::{predict_all, ExtendedPrediction, Method, Region};
use u2c::regions::{region_masses, verify_ece_lemmas, verify_lemma1, verify_lemma2};
use u2c::synth::oracle::{oracle_best_constant_calibrator, oracle_metrics};
use u2c::synth::{generate, Preset, SynthConfig, SynthData};
use u2c::{Dataset, Record};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn lib<T>(r: u2c::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// Independent references
// ---------------------------------------------------------------------------

/// Extended-softmax probabilities written out from scratch.
fn direct_u2c_probs(scaled: &[f64], out_logit: f64) -> Vec<f64> {
    let mut all: Vec<f64> = scaled.to_vec();
    all.push(out_logit);
    let top = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = all.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Region from the two rejection rules, computed without the library's region helpers.
fn direct_region(m: &CalibratedModel, r: &Record) -> Result<(Region, Vec<f64>, f64), String> {
    let u = lib(m.estimator.score(r))?;
    let scaled: Vec<f64> = r.logits.iter().map(|z| z / m.tau).collect();
    let out_logit = m.tau_u.apply(u);
    let top = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rc_rejects = u >= m.theta;
    let u2c_rejects = top < out_logit;
    let region = match (rc_rejects, u2c_rejects) {
        (false, false) => Region::A,
        (false, true) => Region::B,
        (true, false) => Region::C,
        (true, true) => Region::D,
    };
    Ok((region, scaled, out_logit))
}

/// Error gap and region masses by enumeration for one split.
struct DirectSplit {
    err_rc: f64,
    err_u2c: f64,
    mass: [f64; 4],
    /// Records per region whose plain classifier prediction is wrong, over n.
    weighted_err: [f64; 4],
}

fn direct_split(m: &CalibratedModel, d: &Dataset) -> Result<DirectSplit, String> {
    let c = m.c;
    let n = d.len() as f64;
    let (mut wrong_rc, mut wrong_u2c) = (0usize, 0usize);
    let mut counts = [0usize; 4];
    let mut cls_wrong = [0usize; 4];
    for r in d.records() {
        let (region, scaled, out_logit) = direct_region(m, r)?;
        let probs = direct_u2c_probs(&scaled, out_logit);
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        let mut cls = 0;
        for (i, z) in scaled.iter().enumerate() {
            if *z > scaled[cls] {
                cls = i;
            }
        }
        let rc_pred = if region == Region::C || region == Region::D { c + 1 } else { cls + 1 };
        wrong_rc += usize::from(rc_pred != r.label);
        wrong_u2c += usize::from(best + 1 != r.label);
        counts[region.index()] += 1;
        cls_wrong[region.index()] += usize::from(cls + 1 != r.label);
    }
    Ok(DirectSplit {
        err_rc: wrong_rc as f64 / n,
        err_u2c: wrong_u2c as f64 / n,
        mass: counts.map(|k| k as f64 / n),
        weighted_err: cls_wrong.map(|k| k as f64 / n),
    })
}

fn lemma1_direct(m: &CalibratedModel, d_in: &Dataset, d_out: &Dataset) -> Result<(f64, f64), String> {
    let o = direct_split(m, d_out)?;
    let i = direct_split(m, d_in)?;
    let (b, cc) = (Region::B.index(), Region::C.index());
    let out = (o.err_rc - o.err_u2c) - (o.mass[b] - o.mass[cc]);
    // In-domain, RC's rejections in C are always wrong and U2C's in B are too;
    // classifier mistakes in B and C flip between the two.
    let inn = (i.err_rc - i.err_u2c) - (i.mass[cc] - i.mass[b] + i.weighted_err[b] - i.weighted_err[cc]);
    Ok((out, inn))
}

fn small_config(rng: &mut ChaCha8Rng) -> SynthConfig {
    let c = rng.gen_range(2..=5);
    let d = rng.gen_range(2..=4);
    let spread = rng.gen_range(1.5..4.0);
    let class_means: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| spread * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let out_mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-8.0..8.0)).collect();
    let ident = |s: f64| -> Vec<Vec<f64>> {
        (0..d).map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect()).collect()
    };
    let n = rng.gen_range(300..700);
    SynthConfig {
        c,
        d,
        class_means,
        class_weights: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
        covariance: ident(rng.gen_range(0.5..1.5)),
        out_mean,
        out_covariance: ident(rng.gen_range(1.0..5.0)),
        eta: rng.gen_range(0.0..0.4),
        head: None,
        logit_scale: rng.gen_range(0.5..3.0),
        misspecified_fraction: None,
        n_train_val: n,
        n_test_in: n,
        n_out: n,
        seed: rng.gen(),
    }
}

fn default_data() -> Result<(SynthData, CalibratedModel, u2c::calibration::FitLog), String> {
    let data = lib(generate(&SynthConfig::default()))?;
    let (model, log) = lib(fit_model(&data.train_val, &FitOptions::default()))?;
    Ok((data, model, log))
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn error_identity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let (data, model, _) = default_data()?;
    let report = lib(verify_lemma1(&model, &data.test_in, &data.out_domain))?;
    let (out, inn) = lemma1_direct(&model, &data.test_in, &data.out_domain)?;
    ensure!(out.abs() <= 1e-12 && inn.abs() <= 1e-12, "default: direct residuals {out:e} / {inn:e}");
    worst = worst.max(report.residual_out.abs()).max(report.residual_in.abs()).max(out.abs()).max(inn.abs());

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for i in 0..20 {
        let cfg = small_config(&mut rng);
        let data = lib(generate(&cfg))?;
        let options = FitOptions {
            form: if i % 2 == 0 { CalibratorForm::Linear } else { CalibratorForm::Mlp },
            seed: i,
            ..FitOptions::default()
        };
        let (model, _) = lib(fit_model(&data.train_val, &options))?;
        let report = lib(verify_lemma1(&model, &data.test_in, &data.out_domain)).map_err(|e| format!("config {i}: {e}"))?;
        let (out, inn) = lemma1_direct(&model, &data.test_in, &data.out_domain)?;
        ensure!(
            out.abs() <= 1e-12 && inn.abs() <= 1e-12,
            "config {i}: direct residuals {out:e} / {inn:e}"
        );
        worst = worst.max(report.residual_out.abs()).max(report.residual_in.abs()).max(out.abs()).max(inn.abs());
    }
    let elapsed = start.elapsed();
    ensure!(elapsed <= Duration::from_secs(10), "took {elapsed:.2?}, budget 10s");
    Ok(format!("21 configs, max residual {worst:.1e}, {elapsed:.2?}"))
}

fn likelihood_identity() -> Outcome {
    let data = lib(generate(&SynthConfig::default()))?;
    let mut details = Vec::new();
    for kind in [EstimatorKind::MaxLogit, EstimatorKind::Mahalanobis] {
        let options = FitOptions { estimator: kind, ..FitOptions::default() };
        let (model, _) = lib(fit_model(&data.train_val, &options))?;
        let report = lib(verify_lemma2(&model, &data.test_in, &data.out_domain))?;
        for (name, d, s) in [
            ("out-domain", &data.out_domain, &report.out_domain),
            ("in-domain", &data.test_in, &report.in_domain),
        ] {
            // Third route: mean of -log p_y from a hand-written extended softmax.
            let mut total = 0.0;
            for r in d.records() {
                let (_, scaled, t) = direct_region(&model, r)?;
                total += -direct_u2c_probs(&scaled, t)[r.label - 1].ln();
            }
            let direct = total / d.len() as f64;
            ensure!(!s.u2c_metrics.infinite, "{} {name}: U2C nll infinite", kind.as_str());
            ensure!(
                (s.u2c_formula - s.u2c_metrics.finite_mean).abs() <= 1e-9
                    && (direct - s.u2c_metrics.finite_mean).abs() <= 1e-9,
                "{} {name}: formula {} metrics {} direct {direct}",
                kind.as_str(),
                s.u2c_formula,
                s.u2c_metrics.finite_mean
            );
        }
        for rn in &report.out_domain.per_region {
            let Some(nll) = rn.rc else { continue };
            if rn.region.rc_rejects() {
                ensure!(!nll.infinite && nll.finite_mean == 0.0, "RC nll on out-domain {} is not 0", rn.region);
            } else {
                ensure!(nll.infinite && nll.zero_events == rn.count, "RC nll on out-domain {} is not infinite", rn.region);
            }
        }
        let shown: Vec<String> = report
            .out_domain
            .per_region
            .iter()
            .filter_map(|rn| rn.rc.map(|n| format!("{}={}", rn.region, n.value())))
            .collect();
        details.push(format!("{}: RC out {}", kind.as_str(), shown.join(" ")));
    }
    for preset in [Preset::Overconfident, Preset::Misspecified] {
        let data = lib(generate(&SynthConfig::preset(preset)))?;
        let (model, _) = lib(fit_model(&data.train_val, &FitOptions::default()))?;
        lib(verify_lemma2(&model, &data.test_in, &data.out_domain)).map_err(|e| format!("{preset:?}: {e}"))?;
    }
    Ok(details.join("; ") + "; U2C finite on all four fits")
}

fn calibration_identities() -> Outcome {
    let data = lib(generate(&SynthConfig::default()))?;
    let mut checked = 0;
    for kind in [EstimatorKind::MaxLogit, EstimatorKind::Mahalanobis] {
        let options = FitOptions { estimator: kind, ..FitOptions::default() };
        let (model, _) = lib(fit_model(&data.train_val, &options))?;
        let report = lib(verify_ece_lemmas(&model, &data.test_in, &data.out_domain))?;
        let out_entries = report.entries.iter().filter(|e| e.domain == "out-domain").count();
        ensure!(out_entries == 8, "expected 8 out-domain expressions, found {out_entries}");
        // Re-derive each nonempty entry once more from raw predictions.
        for (domain, d) in [("out-domain", &data.out_domain), ("in-domain", &data.test_in)] {
            for method in [Method::Rc, Method::U2c] {
                let preds = lib(predict_all(&model, method, d.records()))?;
                let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                for (p, r) in preds.iter().zip(d.records()) {
                    let (region, _, _) = direct_region(&model, r)?;
                    let gap = (f64::from(u8::from(p.predicted == r.label)) - p.confidence).abs();
                    let e = sums.entry(region.index()).or_insert((0.0, 0));
                    e.0 += gap;
                    e.1 += 1;
                }
                for region in Region::ALL {
                    let Some(entry) = report.get(domain, method, region) else { continue };
                    let mine = sums.get(&region.index()).map(|(s, k)| s / *k as f64);
                    match (entry.closed_form, mine) {
                        (Some(a), Some(b)) => ensure!(
                            (a - b).abs() <= 1e-9,
                            "{domain} {method} {region}: closed form {a} vs direct {b}"
                        ),
                        (None, None) => {}
                        (a, b) => return Err(format!("{domain} {method} {region}: {a:?} vs {b:?}")),
                    }
                    if entry.closed_form.is_some() {
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{checked} nonempty region expressions agree within 1e-9"))
}

fn threshold_contract() -> Outcome {
    let mut details = Vec::new();
    for (seed, n, kind) in [
        (0, 10_000, EstimatorKind::MaxLogit),
        (0, 10_000, EstimatorKind::Mahalanobis),
        (1, 3_000, EstimatorKind::MaxLogit),
        (2, 777, EstimatorKind::MaxLogit),
    ] {
        let cfg = SynthConfig { seed, n_train_val: n, n_test_in: 50, n_out: 50, ..SynthConfig::default() };
        let data = lib(generate(&cfg))?;
        let options = FitOptions { estimator: kind, ..FitOptions::default() };
        let (model, log) = lib(fit_model(&data.train_val, &options))?;
        let mut u: Vec<f64> = Vec::with_capacity(n);
        for r in data.train_val.records() {
            u.push(lib(model.estimator.score(r))?);
        }
        let mut sorted = u.clone();
        sorted.sort_by(f64::total_cmp);
        ensure!(sorted.windows(2).all(|w| w[0] < w[1]), "seed {seed}: u values are not distinct");
        let m = u.len();
        let expected = m - (95 * m).div_ceil(100);
        let rejected = u.iter().filter(|&&v| v >= model.theta).count();
        ensure!(
            log.relabeled == expected && rejected == expected,
            "seed {seed} {}: relabeled {} / counted {rejected}, expected {expected}",
            kind.as_str(),
            log.relabeled
        );
        let masses = lib(region_masses(&model, &data.train_val))?;
        let p_d = masses.mass(Region::D);
        ensure!(p_d <= 0.10, "seed {seed} {}: P_va(D) = {p_d}", kind.as_str());
        details.push(format!("m={m}: {expected} relabeled, P(D)={p_d:.4}"));
    }
    Ok(details.join("; "))
}

fn direct_temperature_nll(records: &[Record], tau: f64) -> f64 {
    let mut total = 0.0;
    for r in records {
        let top = r.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
        let lse = top + r.logits.iter().map(|z| (z / tau - top).exp()).sum::<f64>().ln();
        total += lse - r.logits[r.label - 1] / tau;
    }
    total / records.len() as f64
}

fn temperature_fit() -> Outcome {
    let mut details = Vec::new();
    for preset in [Preset::Default, Preset::Overconfident] {
        let data = lib(generate(&SynthConfig::preset(preset)))?;
        let tau = lib(fit_temperature(&data.train_val))?;
        let records = data.train_val.records();
        let (at_one, at_tau) = (direct_temperature_nll(records, 1.0), direct_temperature_nll(records, tau));
        ensure!(at_tau <= at_one, "{preset:?}: nll(tau) {at_tau} > nll(1) {at_one}");
        if preset == Preset::Overconfident {
            ensure!(at_one - at_tau > 1e-6, "improvement {} not above 1e-6", at_one - at_tau);
        }
        details.push(format!("{preset:?} tau={tau:.3} nll {at_one:.4}->{at_tau:.4}"));
    }
    Ok(details.join("; "))
}

fn relabeled_objective(n: usize) -> Result<(Dataset, f64, EpistemicObjective), String> {
    let cfg = SynthConfig { n_train_val: n, n_test_in: 50, n_out: 50, ..SynthConfig::default() };
    let data = lib(generate(&cfg))?;
    let val = &data.train_val;
    let tau = lib(fit_temperature(val))?;
    let est = lib(fit_estimator(EstimatorKind::MaxLogit, val, &EstimatorOptions::default()))?;
    let u = lib(est.score_all(val.records()))?;
    let th = lib(fit_threshold(&u, 0.95))?;
    let relabeled = lib(relabel_scored(val, &u, th.theta))?;
    let objective = lib(EpistemicObjective::from_scores(&relabeled, tau, &u))?;
    Ok((relabeled, tau, objective))
}

fn gradient_correctness() -> Outcome {
    let (_, _, objective) = relabeled_objective(2000)?;
    let linear = EpistemicCalibrator::linear(1.0, 0.0, objective.u_mean(), objective.u_std());
    let mlp = mlp_from_linear(&linear, 8, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, template) in [("linear", &linear), ("mlp", &mlp)] {
        for point in 0..10 {
            let params: Vec<f64> = template
                .params()
                .iter()
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let cal = template.with_params(&params);
            let (_, grad) = objective.loss_and_grad(&cal);
            for i in 0..params.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (objective.loss(&template.with_params(&plus)) - objective.loss(&template.with_params(&minus)))
                    / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
                ensure!(rel < 1e-4, "{name} point {point} param {i}: analytic {} vs fd {fd}", grad[i]);
                worst = worst.max(rel);
            }
        }
    }
    Ok(format!("20 points, max relative error {worst:.2e}"))
}

fn fit_quality() -> Outcome {
    let (relabeled, tau, objective) = relabeled_objective(10_000)?;
    let (b, oracle_loss) = oracle_best_constant_calibrator(&relabeled, tau);
    let data = lib(generate(&SynthConfig::default()))?;
    let mut losses = Vec::new();
    for form in [CalibratorForm::Linear, CalibratorForm::Mlp] {
        let (model, log) = lib(fit_model(&data.train_val, &FitOptions { form, ..FitOptions::default() }))?;
        let loss = objective.loss(&model.tau_u);
        ensure!(
            (loss - log.final_loss).abs() <= 1e-9,
            "{form:?}: reported loss {} differs from recomputed {loss}",
            log.final_loss
        );
        ensure!(loss <= oracle_loss + 1e-9, "{form:?}: loss {loss} above constant oracle {oracle_loss}");
        if form == CalibratorForm::Mlp {
            ensure!(loss <= log.linear_loss + 1e-9, "mlp loss {loss} above linear {}", log.linear_loss);
        }
        losses.push(loss);
    }
    Ok(format!(
        "constant oracle {oracle_loss:.4} (b={b:.3}), linear {:.4}, mlp {:.4}",
        losses[0], losses[1]
    ))
}

fn random_prediction(rng: &mut ChaCha8Rng, k: usize) -> ExtendedPrediction {
    let mut probs: Vec<f64> = (0..k)
        .map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen::<f64>().powi(3) })
        .collect();
    if probs.iter().all(|&p| p == 0.0) {
        probs[rng.gen_range(0..k)] = 1.0;
    }
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let mut top = 0;
    for i in 0..k {
        if probs[i] > probs[top] {
            top = i;
        }
    }
    ExtendedPrediction {
        predicted: top + 1,
        confidence: probs[top],
        probs,
        region: Region::ALL[rng.gen_range(0..4)],
    }
}

fn same_bins(a: &[BinStat], b: &[BinStat]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.count == y.count
                && match (x.mean_confidence, y.mean_confidence, x.accuracy, y.accuracy) {
                    (Some(c1), Some(c2), Some(a1), Some(a2)) => (c1 - c2).abs() <= 1e-12 && a1 == a2,
                    (None, None, None, None) => true,
                    _ => false,
                }
        })
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for set in 0..1000 {
        let k = rng.gen_range(2..=7);
        let n = rng.gen_range(1..=200);
        let n_bins = rng.gen_range(1..=20);
        let preds: Vec<ExtendedPrediction> = (0..n).map(|_| random_prediction(&mut rng, k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=k)).collect();
        let got = lib(compute_metrics(&preds, &labels, n_bins))?;
        let want = oracle_metrics(&preds, &labels, n_bins);
        ensure!((got.err - want.err).abs() <= 1e-12, "set {set}: err {} vs {}", got.err, want.err);
        ensure!((got.ece - want.ece).abs() <= 1e-12, "set {set}: ece {} vs {}", got.ece, want.ece);
        ensure!(
            got.nll_infinite == want.nll_infinite && got.nll_zero_events == want.nll_zero_events,
            "set {set}: infinite-nll bookkeeping differs"
        );
        if !want.nll_infinite {
            ensure!((got.nll - want.nll).abs() <= 1e-12, "set {set}: nll {} vs {}", got.nll, want.nll);
            worst = worst.max((got.nll - want.nll).abs());
        }
        ensure!(same_bins(&got.bins, &want.bins), "set {set}: bin statistics differ");
        worst = worst.max((got.err - want.err).abs()).max((got.ece - want.ece).abs());

        let single = lib(compute_metrics(&preds, &labels, 1))?;
        let confidences: Vec<f64> = preds.iter().map(|p| p.confidence).collect();
        let hits = preds.iter().zip(&labels).filter(|(p, &y)| p.predicted == y).count();
        let gap = (hits as f64 / n as f64 - u2c::numeric::pairwise_mean(&confidences)).abs();
        ensure!(single.ece == gap, "set {set}: one-bin ece {} vs |acc - conf| {gap}", single.ece);
    }
    Ok(format!("1000 sets, max deviation {worst:.1e}, one-bin ece exact"))
}

fn misspecified_behaviour() -> Outcome {
    let start = Instant::now();
    let data = lib(generate(&SynthConfig::preset(Preset::Misspecified)))?;
    let (model, _) = lib(fit_model(&data.train_val, &FitOptions::default()))?;
    let l1 = lib(verify_lemma1(&model, &data.test_in, &data.out_domain))?;
    let l2 = lib(verify_lemma2(&model, &data.test_in, &data.out_domain))?;
    let o = direct_split(&model, &data.out_domain)?;
    let gap = o.err_rc - o.err_u2c;
    let masses = o.mass[Region::B.index()] - o.mass[Region::C.index()];
    ensure!(
        gap.signum() == masses.signum() || (gap == 0.0 && masses == 0.0),
        "err_RC - err_U2C = {gap} but P(B) - P(C) = {masses}"
    );
    ensure!((gap - masses).abs() <= 1e-12, "gap {gap} vs masses {masses}");
    ensure!((l1.err_out_rc - o.err_rc).abs() <= 1e-12, "library and direct RC error disagree");
    ensure!(o.mass[Region::C.index()] > 0.0, "out-domain region C is empty; the preset does not misspecify");
    ensure!(l2.out_domain.rc_metrics.infinite, "RC out-domain nll not flagged infinite");
    for (name, s) in [("out-domain", &l2.out_domain), ("in-domain", &l2.in_domain)] {
        ensure!(s.u2c_metrics.value().is_finite(), "U2C {name} nll is not finite");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed <= Duration::from_secs(30), "took {elapsed:.2?}, budget 30s");
    Ok(format!(
        "out: err_RC - err_U2C = {gap:+.4} = P(B) - P(C); nll RC inf vs U2C {:.3}; {elapsed:.2?}",
        l2.out_domain.u2c_metrics.value()
    ))
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["u2c"];
    full.extend_from_slice(args);
    let code = u2c::cli::run(full, &mut out, &mut err);
    ensure!(code == 0, "`{}` exited {code}: {}", args.join(" "), String::from_utf8_lossy(&err));
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn pipeline(dir: &Path) -> Result<(BTreeMap<String, Vec<u8>>, String), String> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| e.to_string())?;
    }
    let s = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let mut stdout = String::new();
    stdout += &run_cli(&["synth", "--out", &s("data"), "--seed", "7", "--n", "3000"])?;
    stdout += &run_cli(&["fit", "--val", &s("data/train-val.csv"), "--out", &s("model.json")])?;
    let (model, test_in, out_domain) = (s("model.json"), s("data/test-in.csv"), s("data/out-domain.csv"));
    let evals = ["--eval", test_in.as_str(), "--eval", out_domain.as_str()];
    for (cmd, out) in [("eval", s("eval")), ("verify", s("verify.json"))] {
        let mut args = vec![cmd, "--model", model.as_str(), "--out", out.as_str()];
        args.extend_from_slice(&evals);
        stdout += &run_cli(&args)?;
    }

    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok((files, stdout))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("run");
    let (first, out1) = pipeline(&dir)?;
    let (second, out2) = pipeline(&dir)?;
    ensure!(first.len() >= 10, "only {} artifacts written", first.len());
    ensure!(
        first.keys().eq(second.keys()),
        "artifact sets differ: {:?} vs {:?}",
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &first {
        ensure!(second[name] == *bytes, "{name} differs between runs");
    }
    ensure!(out1 == out2, "standard output differs between runs");
    Ok(format!("{} artifacts byte-identical", first.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("error identity exact on 21 configs", error_identity),
        ("likelihood identity and RC 0/inf pattern", likelihood_identity),
        ("region-conditional calibration expressions", calibration_identities),
        ("threshold and relabel contract", threshold_contract),
        ("temperature fit improves nll", temperature_fit),
        ("analytic gradients match finite differences", gradient_correctness),
        ("tau_u fit beats constant oracle, mlp beats linear", fit_quality),
        ("metrics match brute-force oracle", metrics_oracle),
        ("misspecified score: sign consistency and finite U2C nll", misspecified_behaviour),
        ("pipeline determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{took:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{took:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
