//! Gradual modality dropout.
//!
//! During training each droppable modality is kept with probability
//! `keep_prob`. A dropped modality is not zeroed outright: it is scaled by a
//! retention coefficient that steps down from 0.75 to 0 over the epoch budget,
//! plus a little Gaussian noise.

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal};

use crate::error::{Error, Result};

/// Anything holding one intensity channel per modality.
pub trait Multimodal {
    fn modality_count(&self) -> usize;
    fn modality_mut(&mut self, j: usize) -> &mut [f32];
    fn set_present(&mut self, _j: usize, _present: bool) {}
}

/// Retention coefficient for dropped modalities at epoch `t` of `total`.
pub fn schedule_value(t: usize, total: usize) -> Result<f64> {
    if t >= total {
        return Err(Error::invalid(format!("epoch {t} outside schedule of {total} epochs")));
    }
    // compare 4t against T to keep the quarter boundaries exact
    let (t4, total) = (4 * t as u128, total as u128);
    Ok(if t4 < total {
        0.75
    } else if t4 < 2 * total {
        0.5
    } else if t4 < 3 * total {
        0.25
    } else {
        0.0
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropoutSchedule {
    /// Probability that a droppable modality is kept intact.
    pub keep_prob: f64,
    pub total_epochs: usize,
    pub noise_sigma: f64,
    pub droppable: Vec<usize>,
}

impl DropoutSchedule {
    pub fn validate(&self, modality_count: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return Err(Error::invalid(format!("keep_prob {} outside [0, 1]", self.keep_prob)));
        }
        if self.total_epochs == 0 {
            return Err(Error::invalid("total_epochs must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if let Some(j) = self.droppable.iter().find(|&&j| j >= modality_count) {
            return Err(Error::invalid(format!(
                "droppable modality {j} outside 0..{modality_count}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionSample {
    pub keep: Vec<bool>,
    pub retention: Vec<f64>,
}

impl RetentionSample {
    pub fn ones(modality_count: usize) -> Self {
        RetentionSample {
            keep: vec![true; modality_count],
            retention: vec![1.0; modality_count],
        }
    }
}

pub fn sample_retention(
    sched: &DropoutSchedule,
    t: usize,
    modality_count: usize,
    rng: &mut impl Rng,
) -> Result<RetentionSample> {
    sched.validate(modality_count)?;
    let g = schedule_value(t, sched.total_epochs)?;
    let coin = Bernoulli::new(sched.keep_prob).map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, sched.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = RetentionSample::ones(modality_count);
    for j in 0..modality_count {
        if !sched.droppable.contains(&j) {
            continue;
        }
        if !coin.sample(rng) {
            out.keep[j] = false;
            let eps = if sched.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            out.retention[j] = (g + eps).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Scale every modality by its retention coefficient.
pub fn apply<V: Multimodal + Clone>(x: &V, sample: &RetentionSample) -> Result<V> {
    let n = x.modality_count();
    if sample.retention.len() != n {
        return Err(Error::shape("moddrop apply", &[n], &[sample.retention.len()]));
    }
    let mut out = x.clone();
    for (j, &r) in sample.retention.iter().enumerate() {
        if r != 1.0 {
            let r = r as f32;
            out.modality_mut(j).iter_mut().for_each(|v| *v *= r);
        }
    }
    Ok(out)
}

/// Replace the listed modalities by black images and mark them absent.
pub fn mask_missing<V: Multimodal + Clone>(x: &V, missing: &[usize]) -> Result<V> {
    let n = x.modality_count();
    if let Some(j) = missing.iter().find(|&&j| j >= n) {
        return Err(Error::invalid(format!("modality {j} outside 0..{n}")));
    }
    let mut out = x.clone();
    for &j in missing {
        out.modality_mut(j).iter_mut().for_each(|v| *v = 0.0);
        out.set_present(j, false);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_value(0, 100).unwrap(), 0.75);
        assert_eq!(schedule_value(50, 100).unwrap(), 0.25);
        assert_eq!(schedule_value(99, 100).unwrap(), 0.0);
        assert!(schedule_value(100, 100).is_err());
    }

    #[test]
    fn validation() {
        let mut s = DropoutSchedule {
            keep_prob: 1.5,
            total_epochs: 10,
            noise_sigma: 0.01,
            droppable: vec![2],
        };
        assert!(s.validate(3).is_err());
        s.keep_prob = 0.5;
        assert!(s.validate(3).is_ok());
        assert!(s.validate(2).is_err());
    }
}
