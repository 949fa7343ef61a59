use anchorflow::rng::SeededRng;
use anchorflow::schedule::{candidate_steps, NoiseSchedule, StepSampler};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn sigma_strictly_increasing_over_full_grid() {
    for shift in [1.0, 2.0, 3.0, 7.5] {
        let s = NoiseSchedule::new(1000, shift).unwrap();
        assert_eq!(s.sigma(0).unwrap(), 0.0);
        assert_eq!(s.sigma(1000).unwrap(), 1.0);
        let sig: Vec<f64> = (0..=1000).map(|t| s.sigma(t).unwrap()).collect();
        assert!(sig.windows(2).all(|w| w[0] < w[1]), "shift {shift}");
    }
}

#[test]
fn unit_shift_is_identity() {
    let s = NoiseSchedule::new(1000, 1.0).unwrap();
    for t in 0..=1000 {
        assert_eq!(s.sigma(t).unwrap(), t as f64 / 1000.0);
    }
}

#[test]
fn noise_span_examples() {
    let s = NoiseSchedule::default();
    assert_eq!(s.noise_span(800, 0).unwrap(), 0.0);
    assert!((s.noise_span(800, 800).unwrap() - 0.923077).abs() < 5e-7);
    assert!((s.noise_span(800, 400).unwrap() - 0.256410).abs() < 5e-7);
    assert!((s.calibration_weight(800, 400, 0.5).unwrap() - 0.50637).abs() < 5e-6);
    assert!(s.noise_span(10, 11).is_err());
}

#[test]
fn candidate_step_examples() {
    assert_eq!(candidate_steps(700, 6, 1).unwrap(), vec![700, 350, 175, 87, 43, 21]);
    assert_eq!(candidate_steps(8, 4, 1).unwrap(), vec![8, 4, 2, 1]);
    assert_eq!(candidate_steps(1, 3, 1).unwrap(), vec![1, 1, 1]);
    assert!(candidate_steps(3, 2, 4).is_err());
}

#[test]
fn calibration_monotone_over_anchor_grid() {
    let s = NoiseSchedule::default();
    let sampler = StepSampler::default();
    for &t in &sampler.anchors {
        let mut steps = candidate_steps(t, 10, 1).unwrap();
        steps.reverse();
        steps.dedup();
        let w: Vec<f64> = steps.iter().map(|&d| s.calibration_weight(t, d, 0.5).unwrap()).collect();
        assert!(w.windows(2).all(|p| p[0] < p[1]), "T={t}: {w:?}");
    }
}

proptest! {
    #[test]
    fn candidate_steps_non_increasing_and_clamped(t in 1usize..=1000, k in 1usize..=10, min_step in 1usize..=8) {
        prop_assume!(t >= min_step);
        let c = candidate_steps(t, k, min_step).unwrap();
        prop_assert_eq!(c.len(), k);
        prop_assert_eq!(c[0], t);
        prop_assert!(c.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(c.iter().all(|&d| d >= min_step));
    }

    #[test]
    fn calibration_monotone_in_step(t in 2usize..=1000, a in 1usize..1000, b in 1usize..1000, p in 0.05f64..3.0) {
        let s = NoiseSchedule::default();
        let (lo, hi) = (a.min(b).min(t), a.max(b).min(t));
        prop_assume!(lo < hi);
        prop_assert!(s.calibration_weight(t, lo, p).unwrap() < s.calibration_weight(t, hi, p).unwrap());
    }

    #[test]
    fn probabilities_sum_to_one(beta in 0.0f64..5.0, k in 1usize..=12) {
        let sampler = StepSampler { beta, k, ..StepSampler::default() };
        let p = sampler.probabilities();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn equal_spans_partition_the_grid(n_steps in 1usize..=1000) {
        let s = NoiseSchedule::default();
        let spans = s.equal_spans(n_steps).unwrap();
        prop_assert_eq!(spans.len(), n_steps);
        prop_assert_eq!(spans[0].0, 1000);
        let mut t = 1000;
        for &(ti, dt) in &spans {
            prop_assert_eq!(ti, t);
            prop_assert!(dt >= 1);
            t -= dt;
        }
        prop_assert_eq!(t, 0);
    }
}

/// Pearson chi-square p-value of observed counts against expected probabilities.
fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn draw_counts(sampler: &StepSampler, n: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = SeededRng::new(seed);
    let mut ks = vec![0u64; sampler.k];
    let mut ts = vec![0u64; sampler.anchors.len()];
    for _ in 0..n {
        let d = sampler.sample(&mut rng).unwrap();
        ks[d.k] += 1;
        ts[sampler.anchors.iter().position(|&a| a == d.t).unwrap()] += 1;
        assert_eq!(d.dt, candidate_steps(d.t, sampler.k, sampler.min_step).unwrap()[d.k]);
    }
    (ks, ts)
}

#[test]
fn exponential_sampler_passes_chi_square() {
    let sampler = StepSampler::default();
    let z: f64 = (0..6).map(|j| (-0.7 * j as f64).exp()).sum();
    let expected: Vec<f64> = (0..6).map(|k| (-0.7 * k as f64).exp() / z).collect();
    for (a, b) in sampler.probabilities().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
    let (ks, ts) = draw_counts(&sampler, 100_000, 17);
    let p = chi_square_p(&ks, &expected);
    assert!(p > 0.01, "k counts {ks:?}, p = {p}");
    let n = 100_000.0;
    for (c, q) in ks.iter().zip(&expected) {
        let sd = (n * q * (1.0 - q)).sqrt();
        assert!((*c as f64 - n * q).abs() < 3.0 * sd);
    }
    let uniform = vec![0.25; 4];
    assert!(chi_square_p(&ts, &uniform) > 0.01, "anchor counts {ts:?}");
}

#[test]
fn zero_beta_is_uniform() {
    let sampler = StepSampler { beta: 0.0, ..StepSampler::default() };
    assert!(sampler.probabilities().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    let (ks, _) = draw_counts(&sampler, 100_000, 18);
    let p = chi_square_p(&ks, &[1.0 / 6.0; 6]);
    assert!(p > 0.01, "k counts {ks:?}, p = {p}");
}

#[test]
fn sampler_is_deterministic() {
    let sampler = StepSampler::default();
    let a = draw_counts(&sampler, 1000, 5);
    let b = draw_counts(&sampler, 1000, 5);
    assert_eq!(a, b);
}
