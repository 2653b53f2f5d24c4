use u2c::synth::{Sampler, SynthConfig};
use u2c::Split;

fn config(eta: f64, n: usize) -> SynthConfig {
    SynthConfig {
        eta,
        n_train_val: n,
        n_test_in: n,
        n_out: n,
        ..SynthConfig::default()
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[test]
fn bayes_head_is_nearly_perfect_without_noise() {
    let n = 20_000;
    let s = Sampler::new(&config(0.0, n)).unwrap();
    let draws = s.sample_split(Split::TestIn, n).unwrap();
    let wrong = draws.iter().filter(|d| argmax(&d.record.logits) + 1 != d.record.label).count();
    let rate = wrong as f64 / n as f64;
    // Three unit Gaussians at pairwise distance 6: pairwise error Φ(-3) ≈ 0.13%.
    assert!(rate < 0.02, "bayes error {rate}");
    assert!(draws.iter().all(|d| d.true_class == Some(d.record.label)));
}

#[test]
fn label_noise_rate_is_within_three_sigma() {
    let n = 20_000;
    let eta = 0.49;
    let s = Sampler::new(&config(eta, n)).unwrap();
    let draws = s.sample_split(Split::TrainVal, n).unwrap();
    let flipped = draws.iter().filter(|d| d.true_class != Some(d.record.label)).count() as f64;
    let sigma = (n as f64 * eta * (1.0 - eta)).sqrt();
    assert!((flipped - n as f64 * eta).abs() <= 3.0 * sigma, "{flipped} flips");
}

#[test]
fn class_frequencies_and_feature_means_match_the_config() {
    let n = 30_000;
    let cfg = SynthConfig {
        class_weights: vec![1.0, 2.0, 3.0],
        ..config(0.2, n)
    };
    let s = Sampler::new(&cfg).unwrap();
    let draws = s.sample_split(Split::TestIn, n).unwrap();
    let mut counts = [0usize; 3];
    let mut sums = [[0.0; 2]; 3];
    for d in &draws {
        let k = d.true_class.unwrap() - 1;
        counts[k] += 1;
        let f = d.record.features.as_ref().unwrap();
        sums[k][0] += f[0];
        sums[k][1] += f[1];
    }
    for k in 0..3 {
        let p = (k + 1) as f64 / 6.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[k] as f64 - n as f64 * p).abs() <= 4.0 * sigma, "class {k}: {}", counts[k]);
        for j in 0..2 {
            let mean = sums[k][j] / counts[k] as f64;
            let tol = 4.0 / (counts[k] as f64).sqrt();
            assert!((mean - cfg.class_means[k][j]).abs() <= tol, "class {k} dim {j}: {mean}");
        }
    }
    let out = s.sample_split(Split::OutDomain, 5000).unwrap();
    for j in 0..2 {
        let mean = out.iter().map(|d| d.record.features.as_ref().unwrap()[j]).sum::<f64>() / 5000.0;
        // out-domain spread is 2 per axis
        assert!((mean - cfg.out_mean[j]).abs() <= 4.0 * 2.0 / 5000f64.sqrt(), "out dim {j}: {mean}");
    }
}

#[test]
fn records_do_not_depend_on_split_size() {
    let a = Sampler::new(&config(0.2, 100)).unwrap();
    let b = Sampler::new(&config(0.2, 5000)).unwrap();
    for i in [0, 17, 99] {
        assert_eq!(a.sample(Split::TestIn, i).unwrap().record, b.sample(Split::TestIn, i).unwrap().record);
    }
}
