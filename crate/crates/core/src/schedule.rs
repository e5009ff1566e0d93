//! Noise schedules and the closed-form forward process.

use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
        })
    }
}

/// β, α and cumulative ᾱ over timesteps `1..=T`. Index 0 of the public
/// accessors is the clean state (`ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedules span `1e-4 → 0.02` at `T = 1000`; for other lengths the
    /// final β is rescaled by `1000 / T` (capped at 0.999); ᾱ_1 stays `1 − 1e-4`.
    /// Cosine uses the squared-cosine ᾱ with offset 0.008, β capped at 0.999.
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidInput(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let (start, end) = (1e-4, (0.02 * 1000.0 / steps as f64).min(0.999));
                (0..steps)
                    .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let v = ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos();
                    v * v
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999))
                    .collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        let schedule = Self {
            kind,
            betas,
            alpha_bars,
        };
        schedule.check_invariants()?;
        Ok(schedule)
    }

    /// Same kind, first `levels` steps; used for conditioning-noise augmentation.
    pub fn truncated(&self, levels: usize) -> Result<Self> {
        if levels == 0 || levels > self.len() {
            return Err(Error::InvalidInput(format!(
                "cannot truncate a {}-step schedule to {levels}",
                self.len()
            )));
        }
        Ok(Self {
            kind: self.kind,
            betas: self.betas[..levels].to_vec(),
            alpha_bars: self.alpha_bars[..=levels].to_vec(),
        })
    }

    fn check_invariants(&self) -> Result<()> {
        if let Some(b) = self.betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidInput(format!("beta {b} outside (0, 1)")));
        }
        if self.alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("alpha_bar is not strictly decreasing".into()));
        }
        if self.kind == ScheduleKind::Linear {
            let (first, last) = (self.alpha_bar(1), self.alpha_bar(self.len()));
            if first <= 0.99 || last >= 0.05 {
                return Err(Error::InvalidInput(format!(
                    "linear schedule endpoints out of range: alpha_bar_1={first}, alpha_bar_T={last}"
                )));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// β_t for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// ᾱ_t for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_timestep(t)?;
    q_sample_with(z0, schedule.alpha_bar(t), eps)
}

/// Forward process for an explicit ᾱ, including the `ᾱ ∈ {0, 1}` endpoints.
pub fn q_sample_with(z0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::shape(z0.dims(), eps.dims()));
    }
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidInput(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    Ok(((z0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn linear_thousand_starts_at_one_minus_beta() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!(s.alpha_bar(1000) < 0.05);
    }

    #[test]
    fn cosine_is_strictly_decreasing() {
        let s = NoiseSchedule::new(200, ScheduleKind::Cosine).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn too_short_schedule_is_rejected() {
        assert!(NoiseSchedule::new(1, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn q_sample_endpoints_and_substitution() {
        let dev = Device::Cpu;
        let z0 = Tensor::new(&[1f32, -2.0], &dev).unwrap();
        let eps = Tensor::new(&[0.5f32, 3.0], &dev).unwrap();
        let at = |ab: f64| q_sample_with(&z0, ab, &eps).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(at(1.0), vec![1.0, -2.0]);
        assert_eq!(at(0.0), vec![0.5, 3.0]);
        let one = Tensor::new(&[1f32], &dev).unwrap();
        let zero = Tensor::new(&[0f32], &dev).unwrap();
        let v = q_sample_with(&one, 0.25, &zero).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![0.5]);
    }

    #[test]
    fn q_sample_rejects_mismatch_and_bad_timestep() {
        let dev = Device::Cpu;
        let s = NoiseSchedule::new(10, ScheduleKind::Linear).unwrap();
        let a = Tensor::zeros(3, candle_core::DType::F32, &dev).unwrap();
        let b = Tensor::zeros(4, candle_core::DType::F32, &dev).unwrap();
        assert!(q_sample(&a, 1, &b, &s).is_err());
        assert!(q_sample(&a, 0, &a, &s).is_err());
        assert!(q_sample(&a, 11, &a, &s).is_err());
    }
}
