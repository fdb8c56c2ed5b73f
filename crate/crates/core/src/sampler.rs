//! Relaxed (binary Concrete) and hard Bernoulli kernel masks.
//!
//! Both samplers read one uniform `r` per slice from the same stream, so for a
//! given seed the relaxed sample `sigmoid((logit p + logit r) / tau)` rounds to
//! the hard sample `[logit p + logit r > 0]` as `tau -> 0`. `logit r` is the
//! logistic noise, i.e. the difference of two independent Gumbel variates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Relaxed,
    Hard,
}

/// Sigmoid steepness; strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// One mask value per slice, in [`crate::space::SliceLayout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub values: Vec<f64>,
    pub mode: MaskMode,
    pub seed: u64,
    /// `logit(r)` per slice, kept so the relaxed sample can be rebuilt
    /// differentiably from the keep logits.
    pub noise: Vec<f64>,
    /// Set for relaxed samples.
    pub tau: Option<Temperature>,
}

impl MaskSample {
    /// Hard mask from explicit bits; carries no noise.
    pub fn from_bits(bits: &[bool]) -> Self {
        Self {
            values: bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            mode: MaskMode::Hard,
            seed: 0,
            noise: vec![0.0; bits.len()],
            tau: None,
        }
    }

    pub fn ones(len: usize) -> Self {
        Self::from_bits(&vec![true; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_bits(&vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bits(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.5).collect()
    }
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest double below 1.
pub(crate) const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `logit(r)` for `r ~ Uniform(0, 1)`, one per slice.
pub fn logistic_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut s = rng::stream(seed, "mask/uniform", 0);
    (0..len).map(|_| logit(rng::open_uniform(&mut s))).collect()
}

fn check_probs(p: &[f64]) -> Result<()> {
    match p.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(v) => Err(Error::InvalidArgument(format!(
            "keep probabilities must lie in (0, 1), got {v}"
        ))),
        None => Ok(()),
    }
}

/// Relaxed sample from keep logits `rho = logit(p)`.
pub fn sample_relaxed_logits(keep_logits: &[f64], tau: Temperature, seed: u64) -> MaskSample {
    let noise = logistic_noise(keep_logits.len(), seed);
    // Same rounding as the differentiable rebuild in the super-network graph.
    let inv_tau = 1.0 / tau.get();
    let values = keep_logits
        .iter()
        .zip(&noise)
        .map(|(rho, n)| sigmoid((rho + n) * inv_tau).clamp(f64::MIN_POSITIVE, BELOW_ONE))
        .collect();
    MaskSample {
        values,
        mode: MaskMode::Relaxed,
        seed,
        noise,
        tau: Some(tau),
    }
}

pub fn sample_relaxed(keep_probs: &[f64], tau: Temperature, seed: u64) -> Result<MaskSample> {
    check_probs(keep_probs)?;
    let logits: Vec<f64> = keep_probs.iter().map(|&p| logit(p)).collect();
    Ok(sample_relaxed_logits(&logits, tau, seed))
}

/// Hard sample from keep logits; usable where `sigmoid(rho)` rounds to 1.
pub fn sample_hard_logits(keep_logits: &[f64], seed: u64) -> MaskSample {
    let noise = logistic_noise(keep_logits.len(), seed);
    let values = keep_logits
        .iter()
        .zip(&noise)
        .map(|(rho, n)| if rho + n > 0.0 { 1.0 } else { 0.0 })
        .collect();
    MaskSample {
        values,
        mode: MaskMode::Hard,
        seed,
        noise,
        tau: None,
    }
}

/// Hard Bernoulli(p) sample; 1 means the slice is active.
pub fn sample_hard(keep_probs: &[f64], seed: u64) -> Result<MaskSample> {
    check_probs(keep_probs)?;
    let logits: Vec<f64> = keep_probs.iter().map(|&p| logit(p)).collect();
    Ok(sample_hard_logits(&logits, seed))
}

/// `d eps / d logit(p) = eps (1 - eps) / tau` per slice.
pub fn pathwise_grad(sample: &MaskSample) -> Result<Vec<f64>> {
    let tau = match (sample.mode, sample.tau) {
        (MaskMode::Relaxed, Some(t)) => t.get(),
        _ => {
            return Err(Error::InvalidArgument(
                "pathwise gradient needs a relaxed sample".into(),
            ))
        }
    };
    Ok(sample.values.iter().map(|e| e * (1.0 - e) / tau).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn rejects_bad_temperature_and_probs() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(sample_hard(&[0.5, 1.0], 0).is_err());
        assert!(sample_relaxed(&[0.0], tau(1.0), 0).is_err());
    }

    #[test]
    fn symmetric_point_gives_half() {
        // p = 0.5 and r = 0.5 make the sigmoid argument zero for any tau.
        let zero_noise = [0.0];
        for t in [0.01, 0.2, 5.0] {
            let v = sigmoid((logit(0.5) + zero_noise[0]) / t);
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn hard_limit_with_positive_noise() {
        // logit(r) = 1 pushes the relaxed value to 1 as tau shrinks.
        let values: Vec<f64> = [1.0, 0.1, 0.01, 0.001]
            .iter()
            .map(|t| sigmoid((logit(0.5) + 1.0) / t))
            .collect();
        assert!(values.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(values[3], 1.0);
    }

    #[test]
    fn replay_is_identical() {
        let p = vec![0.3, 0.6, 0.9];
        assert_eq!(sample_hard(&p, 11).unwrap(), sample_hard(&p, 11).unwrap());
        assert_ne!(sample_hard(&p, 11).unwrap().noise, sample_hard(&p, 12).unwrap().noise);
    }

    #[test]
    fn relaxed_values_stay_open() {
        let p = vec![1e-9, 1.0 - 1e-9, 0.5];
        for seed in 0..200 {
            let s = sample_relaxed(&p, tau(0.01), seed).unwrap();
            assert!(s.values.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn relaxed_rounds_to_hard_at_low_temperature() {
        let p = vec![0.2, 0.5, 0.8, 0.95];
        for seed in 0..500 {
            let h = sample_hard(&p, seed).unwrap();
            let r = sample_relaxed(&p, tau(0.01), seed).unwrap();
            for i in 0..p.len() {
                if (logit(p[i]) + r.noise[i]).abs() > 0.1 {
                    assert_eq!(r.values[i].round(), h.values[i]);
                }
            }
        }
    }

    #[test]
    fn near_certain_keep_is_all_ones() {
        let p = vec![1.0 - 1e-12; 64];
        for seed in 0..50 {
            assert!(sample_hard(&p, seed).unwrap().values.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn pathwise_grad_values() {
        let s = MaskSample {
            values: vec![0.5, 1e-12, 1.0 - 1e-12],
            mode: MaskMode::Relaxed,
            seed: 0,
            noise: vec![0.0; 3],
            tau: Some(tau(1.0)),
        };
        let g = pathwise_grad(&s).unwrap();
        assert_eq!(g[0], 0.25);
        assert!(g[1] < 1e-11 && g[2] < 1e-11);
        assert!(pathwise_grad(&MaskSample::ones(2)).is_err());
    }

    #[test]
    fn pathwise_grad_matches_finite_difference() {
        let t = tau(0.2);
        let rho = [0.3, -1.1, 2.0, 0.0];
        let sample = sample_relaxed_logits(&rho, t, 5);
        let analytic = pathwise_grad(&sample).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for i in 0..rho.len() {
            // Saturated slices have derivatives below central-difference roundoff.
            if analytic[i] < 1e-3 {
                continue;
            }
            checked += 1;
            let f = |x: f64| sigmoid((x + sample.noise[i]) / t.get());
            let numeric = (f(rho[i] + h) - f(rho[i] - h)) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1e-12);
            assert!(rel < 1e-6, "slice {i}: {} vs {numeric}", analytic[i]);
        }
        assert!(checked > 0);
    }
}
