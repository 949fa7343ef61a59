//! Discrete noise schedule and shortcut step selection.
//!
//! Index convention: `T` counts remaining noise. `T = N` is pure noise,
//! `T = 0` is data, and a denoising step of size `dT` moves `T -> T - dT`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Shifted map from step index to noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    #[serde(default = "NoiseSchedule::default_n")]
    pub n: usize,
    #[serde(default = "NoiseSchedule::default_shift")]
    pub shift: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { n: 1000, shift: 3.0 }
    }
}

impl NoiseSchedule {
    fn default_n() -> usize {
        1000
    }

    fn default_shift() -> f64 {
        3.0
    }

    pub fn new(n: usize, shift: f64) -> Result<Self> {
        let s = NoiseSchedule { n, shift };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("schedule.n must be positive".into()));
        }
        if !(self.shift >= 1.0 && self.shift.is_finite()) {
            return Err(Error::Config(format!("schedule.shift must be >= 1, got {}", self.shift)));
        }
        Ok(())
    }

    /// `sigma(T) = s*u / (1 + (s-1)*u)` with `u = T/N`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        if t > self.n {
            return Err(Error::OutOfRange(format!("T={t} outside [0, {}]", self.n)));
        }
        if t == self.n {
            return Ok(1.0);
        }
        let u = t as f64 / self.n as f64;
        Ok(self.shift * u / (1.0 + (self.shift - 1.0) * u))
    }

    /// `|sigma(T) - sigma(T - dT)|`, the noise removed by a step of size `dT`.
    pub fn noise_span(&self, t: usize, dt: usize) -> Result<f64> {
        if dt > t {
            return Err(Error::OutOfRange(format!("step {dt} exceeds index {t}")));
        }
        Ok((self.sigma(t)? - self.sigma(t - dt)?).abs())
    }

    /// Calibration weight `(noise_span)^p`.
    pub fn calibration_weight(&self, t: usize, dt: usize, p: f64) -> Result<f64> {
        if p.is_nan() || p <= 0.0 {
            return Err(Error::Invalid(format!("sensitivity p must be positive, got {p}")));
        }
        Ok(self.noise_span(t, dt)?.powf(p))
    }

    /// Split `[N, 0]` into `n_steps` contiguous index spans of near-equal
    /// length, as `(T, dT)` pairs from noise to data.
    pub fn equal_spans(&self, n_steps: usize) -> Result<Vec<(usize, usize)>> {
        if n_steps == 0 || n_steps > self.n {
            return Err(Error::Invalid(format!(
                "step count {n_steps} outside [1, {}]",
                self.n
            )));
        }
        let base = self.n / n_steps;
        let extra = self.n % n_steps;
        let mut t = self.n;
        let mut spans = Vec::with_capacity(n_steps);
        for i in 0..n_steps {
            let dt = base + usize::from(i < extra);
            spans.push((t, dt));
            t -= dt;
        }
        debug_assert_eq!(t, 0);
        Ok(spans)
    }
}

/// `dT_k = max(floor(T / 2^k), min_step)` for `k = 0..K`.
pub fn candidate_steps(t: usize, k: usize, min_step: usize) -> Result<Vec<usize>> {
    if min_step == 0 || t < min_step {
        return Err(Error::Invalid(format!("T={t} below min_step {min_step}")));
    }
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    Ok((0..k)
        .map(|i| {
            let d = if i >= usize::BITS as usize { 0 } else { t >> i };
            d.max(min_step)
        })
        .collect())
}

/// Exponential index-biased sampler over candidate step sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSampler {
    #[serde(default = "StepSampler::default_beta")]
    pub beta: f64,
    #[serde(default = "StepSampler::default_k")]
    pub k: usize,
    #[serde(default = "StepSampler::default_anchors")]
    pub anchors: Vec<usize>,
    #[serde(default = "StepSampler::default_min_step")]
    pub min_step: usize,
}

impl Default for StepSampler {
    fn default() -> Self {
        StepSampler {
            beta: 0.7,
            k: 6,
            anchors: vec![500, 600, 700, 800],
            min_step: 1,
        }
    }
}

/// One draw from [`StepSampler::sample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepDraw {
    pub t: usize,
    pub dt: usize,
    pub k: usize,
}

impl StepSampler {
    fn default_beta() -> f64 {
        0.7
    }
    fn default_k() -> usize {
        6
    }
    fn default_anchors() -> Vec<usize> {
        vec![500, 600, 700, 800]
    }
    fn default_min_step() -> usize {
        1
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("sampler.beta must be >= 0, got {}", self.beta)));
        }
        if self.k == 0 {
            return Err(Error::Config("sampler.k must be positive".into()));
        }
        if self.min_step == 0 {
            return Err(Error::Config("sampler.min_step must be positive".into()));
        }
        if self.anchors.is_empty() {
            return Err(Error::Config("sampler.anchors must be non-empty".into()));
        }
        for &a in &self.anchors {
            if a < self.min_step || a > sched.n {
                return Err(Error::Config(format!(
                    "anchor index {a} outside [{}, {}]",
                    self.min_step, sched.n
                )));
            }
        }
        Ok(())
    }

    /// `p(k) = exp(-beta k) / sum_j exp(-beta j)`.
    pub fn probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.k).map(|i| (-self.beta * i as f64).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Draw an anchor index uniformly, then a step-size index from `p(k)`.
    pub fn sample(&self, rng: &mut SeededRng) -> Result<StepDraw> {
        if self.anchors.is_empty() {
            return Err(Error::Invalid("no anchor indices".into()));
        }
        let t = self.anchors[rng.below(self.anchors.len())];
        let k = self.sample_k(rng);
        let dt = candidate_steps(t, self.k, self.min_step)?[k];
        Ok(StepDraw { t, dt, k })
    }

    fn sample_k(&self, rng: &mut SeededRng) -> usize {
        let u = rng.uniform();
        let mut acc = 0.0;
        let probs = self.probabilities();
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.k - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigma_endpoints_and_known_value() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sigma(0).unwrap(), 0.0);
        assert_eq!(s.sigma(1000).unwrap(), 1.0);
        // 3 * 0.8 / (1 + 2 * 0.8) = 2.4 / 2.6
        assert!(close(s.sigma(800).unwrap(), 2.4 / 2.6, 1e-15));
        assert!(close(s.sigma(800).unwrap(), 0.923077, 5e-7));
        assert!(s.sigma(1001).is_err());
    }

    #[test]
    fn unit_shift_is_identity() {
        let s = NoiseSchedule::new(1000, 1.0).unwrap();
        for t in 0..=1000 {
            assert_eq!(s.sigma(t).unwrap(), t as f64 / 1000.0);
        }
    }

    #[test]
    fn candidate_steps_examples() {
        assert_eq!(candidate_steps(700, 6, 1).unwrap(), vec![700, 350, 175, 87, 43, 21]);
        assert_eq!(candidate_steps(8, 4, 1).unwrap(), vec![8, 4, 2, 1]);
        assert_eq!(candidate_steps(1, 3, 1).unwrap(), vec![1, 1, 1]);
        assert!(candidate_steps(0, 3, 1).is_err());
    }

    #[test]
    fn noise_span_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(s.noise_span(800, 0).unwrap(), 0.0);
        assert!(close(s.noise_span(800, 800).unwrap(), 0.923077, 5e-7));
        assert!(close(s.noise_span(800, 400).unwrap(), 0.256410, 5e-7));
        assert!(s.noise_span(400, 401).is_err());
    }

    #[test]
    fn calibration_weight_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(s.calibration_weight(1000, 1000, 0.3).unwrap(), 1.0);
        let lin = NoiseSchedule::new(1000, 1.0).unwrap();
        assert!(close(lin.calibration_weight(500, 250, 0.5).unwrap(), 0.5, 1e-15));
        assert!(close(s.calibration_weight(800, 400, 0.5).unwrap(), 0.50637, 5e-6));
        assert!(s.calibration_weight(800, 400, 0.0).is_err());
    }

    #[test]
    fn probabilities_match_normalized_series() {
        let sampler = StepSampler::default();
        let p = sampler.probabilities();
        let z: f64 = (0..6).map(|j| (-0.7 * j as f64).exp()).sum();
        // 1.956646 exactly; the rounded reference 1.95667 is off in the fifth digit
        assert!(close(z, 1.95667, 3e-5));
        assert!(close(p[0], 0.51107, 1e-5));
        assert!(close(p.iter().sum::<f64>(), 1.0, 1e-15));
        assert!(p.windows(2).all(|w| w[0] >= w[1]));
        let flat = StepSampler { beta: 0.0, ..StepSampler::default() }.probabilities();
        assert!(flat.iter().all(|&v| close(v, 1.0 / 6.0, 1e-15)));
    }

    #[test]
    fn equal_spans_cover_the_grid() {
        let s = NoiseSchedule::default();
        assert_eq!(s.equal_spans(1).unwrap(), vec![(1000, 1000)]);
        assert_eq!(
            s.equal_spans(4).unwrap(),
            vec![(1000, 250), (750, 250), (500, 250), (250, 250)]
        );
        let spans = s.equal_spans(3).unwrap();
        assert_eq!(spans.iter().map(|s| s.1).sum::<usize>(), 1000);
        assert!(s.equal_spans(0).is_err());
    }
}
