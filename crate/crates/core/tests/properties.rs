use proptest::prelude::*;

use u2c::calibration::{CalibratedModel, EpistemicCalibrator};
use u2c::data::{read_dataset, write_dataset};
use u2c::epistemic::{ash_reshape, EpistemicEstimator, Knn, Mahalanobis};
use u2c::metrics::compute_metrics;
use u2c::numeric::softmax;
use u2c::predict::{assign_region, ExtendedPredictor, Method, Region};
use u2c::{Dataset, Record, Split};

fn model(c: usize, tau: f64, theta: f64, slope: f64, intercept: f64) -> CalibratedModel {
    CalibratedModel {
        c,
        tau,
        theta,
        alpha: 0.95,
        tau_u: EpistemicCalibrator::linear(slope, intercept, 0.0, 1.0),
        estimator: EpistemicEstimator::Passthrough,
    }
}

fn logits(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, c)
}

fn point_cloud() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (1usize..5).prop_flat_map(|d| (Just(d), prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), 3..30)))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-700.0..700.0f64, 1..12)) {
        let p = softmax(&z).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn predictions_agree_with_regions(
        (c, z) in (2usize..6).prop_flat_map(|c| (Just(c), logits(c))),
        u in -5.0..5.0f64,
        tau in 0.05..20.0f64,
        theta in -3.0..3.0f64,
        slope in -3.0..3.0f64,
        intercept in -5.0..5.0f64,
    ) {
        let m = model(c, tau, theta, slope, intercept);
        let r = Record::new("r", 1, z).with_u(u);
        let region = assign_region(&m, &r).unwrap();
        let rc = m.rc(&r).unwrap();
        let u2c = m.u2c(&r).unwrap();
        prop_assert_eq!(rc.abstains(), region.rc_rejects());
        prop_assert_eq!(u2c.abstains(), region.u2c_rejects());
        prop_assert_eq!(rc.region, region);
        for p in [&rc, &u2c] {
            prop_assert_eq!(p.probs.len(), c + 1);
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        if region.rc_rejects() {
            prop_assert_eq!(rc.probs[c], 1.0);
        } else {
            prop_assert_eq!(rc.probs[c], 0.0);
        }
        // Accepting predictors agree on the class.
        if region == Region::A {
            prop_assert_eq!(rc.predicted, u2c.predicted);
        }
    }

    #[test]
    fn shifting_logits_and_out_logit_together_changes_nothing(
        (c, z) in (2usize..6).prop_flat_map(|c| (Just(c), logits(c))),
        u in -5.0..5.0f64,
        tau in 0.5..5.0f64,
        shift in -20.0..20.0f64,
    ) {
        let base = model(c, tau, 0.0, 1.3, -0.4);
        let moved = model(c, tau, 0.0, 1.3, -0.4 + shift / tau);
        let r = Record::new("r", 1, z.clone()).with_u(u);
        let s = Record::new("s", 1, z.iter().map(|v| v + shift).collect()).with_u(u);
        for method in [Method::Rc, Method::U2c] {
            let a = base.predict(method, &r).unwrap();
            let b = if method == Method::Rc { base.predict(method, &s) } else { moved.predict(method, &s) }.unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() <= 1e-9, "{method}: {:?} vs {:?}", a.probs, b.probs);
            }
        }
    }

    #[test]
    fn knn_distances_are_nonnegative_and_zero_on_stored_points(
        (d, pts) in point_cloud(),
        q in prop::collection::vec(-10.0..10.0f64, 4),
    ) {
        let k1 = Knn::new(1, pts.clone()).unwrap();
        prop_assert_eq!(k1.distance(&pts[0]).unwrap(), 0.0);
        let k = Knn::new(3.min(pts.len()), pts.clone()).unwrap();
        let q = &q[..d];
        let got = k.distance(q).unwrap();
        prop_assert!(got >= 0.0);
        // brute force: sort every distance and average the smallest k
        let mut all: Vec<f64> = pts
            .iter()
            .map(|p| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        all.sort_by(f64::total_cmp);
        let want = all[..k.k()].iter().sum::<f64>() / k.k() as f64;
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want));
    }

    #[test]
    fn ash_matches_brute_force(x in prop::collection::vec(-5.0..5.0f64, 1..40), p in 0.01..0.99f64, fill in -2.0..2.0f64) {
        let got = ash_reshape(&x, p, fill);
        let keep = ((p * x.len() as f64).ceil() as usize).clamp(1, x.len());
        // an entry survives when fewer than `keep` entries rank strictly ahead of it
        for i in 0..x.len() {
            let ahead = (0..x.len())
                .filter(|&j| x[j].abs() > x[i].abs() || (x[j].abs() == x[i].abs() && j < i))
                .count();
            prop_assert_eq!(got[i], if ahead < keep { fill } else { 0.0 });
        }
    }

    #[test]
    fn mahalanobis_ignores_record_order(seed in 0u64..1000, q in prop::collection::vec(-6.0..6.0f64, 2)) {
        use rand::{Rng, SeedableRng, seq::SliceRandom};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut records: Vec<Record> = (0..60)
            .map(|i| {
                let label = i % 3 + 1;
                let f = vec![label as f64 * 2.0 + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                Record::new(format!("{i}"), label, vec![0.0; 3]).with_features(f)
            })
            .collect();
        let a = Mahalanobis::fit(&Dataset::new(3, Split::TrainVal, records.clone()).unwrap()).unwrap();
        records.shuffle(&mut rng);
        let b = Mahalanobis::fit(&Dataset::new(3, Split::TrainVal, records).unwrap()).unwrap();
        let (da, db) = (a.distance(&q).unwrap(), b.distance(&q).unwrap());
        prop_assert!(da >= 0.0);
        prop_assert!((da - db).abs() <= 1e-9 * (1.0 + da));
    }

    #[test]
    fn metrics_stay_in_range(
        rows in prop::collection::vec((prop::collection::vec(0.0..1.0f64, 4), 1usize..=4), 1..60),
        n_bins in 1usize..30,
    ) {
        let preds: Vec<_> = rows
            .iter()
            .map(|(w, _)| {
                let total: f64 = w.iter().sum::<f64>() + 1e-9;
                let probs: Vec<f64> = w.iter().map(|v| (v + 1e-9 / 4.0) / total).collect();
                let top = u2c::numeric::argmax(&probs);
                u2c::predict::ExtendedPrediction { predicted: top + 1, confidence: probs[top], probs, region: Region::A }
            })
            .collect();
        let labels: Vec<usize> = rows.iter().map(|(_, y)| *y).collect();
        let m = compute_metrics(&preds, &labels, n_bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.err));
        prop_assert!((0.0..=1.0).contains(&m.ece));
        prop_assert!(m.nll >= 0.0);
        prop_assert_eq!(m.bins.iter().map(|b| b.count).sum::<usize>(), preds.len());
    }

    #[test]
    fn csv_roundtrip_is_exact(
        rows in prop::collection::vec((prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3), 1usize..=3, -1e6..1e6f64), 1..20),
    ) {
        let records: Vec<Record> = rows
            .iter()
            .enumerate()
            .map(|(i, (z, y, u))| Record::new(format!("r{i}"), *y, z.clone()).with_u(*u))
            .collect();
        let d = Dataset::new(3, Split::TestIn, records).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Split::TestIn).unwrap();
        prop_assert_eq!(back.records(), d.records());
    }
}
