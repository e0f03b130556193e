use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step noise coefficients plus the local/global split fraction.
///
/// `alpha[t]` scales the clean latent and `delta[t]` the noise at step `t`;
/// step 0 is the clean image and step `steps` the noisiest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    steps: usize,
    lambda_split: f64,
    alpha: Vec<f64>,
    delta: Vec<f64>,
}

impl SamplerSchedule {
    pub fn new(steps: usize, lambda_split: f64, alpha: Vec<f64>, delta: Vec<f64>) -> Result<Self> {
        let s = Self {
            steps,
            lambda_split,
            alpha,
            delta,
        };
        s.validate()?;
        Ok(s)
    }

    /// Alpha decreasing linearly from 1 to `alpha_end`, delta = sqrt(1 - alpha²).
    pub fn linear(steps: usize, lambda_split: f64, alpha_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be positive".into()));
        }
        let alpha: Vec<f64> = (0..=steps)
            .map(|t| 1.0 - (1.0 - alpha_end) * t as f64 / steps as f64)
            .collect();
        let delta = alpha.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect();
        Self::new(steps, lambda_split, alpha, delta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchedule(m));
        if self.steps == 0 {
            return bad("step count must be positive".into());
        }
        if self.alpha.len() != self.steps + 1 || self.delta.len() != self.steps + 1 {
            return bad(format!(
                "alpha/delta need {} entries, got {}/{}",
                self.steps + 1,
                self.alpha.len(),
                self.delta.len()
            ));
        }
        if self.alpha[0] != 1.0 || self.delta[0] != 0.0 {
            return bad("step 0 must be clean (alpha=1, delta=0)".into());
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.alpha.iter().all(in_unit) || !self.delta.iter().all(in_unit) {
            return bad("coefficients must lie in [0, 1]".into());
        }
        if self.alpha.windows(2).any(|w| w[1] > w[0]) {
            return bad("alpha must be non-increasing".into());
        }
        if self.delta.windows(2).any(|w| w[1] < w[0]) {
            return bad("delta must be non-decreasing".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_split) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda_split));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda_split: f64) -> Result<Self> {
        Self::new(self.steps, lambda_split, self.alpha.clone(), self.delta.clone())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_split
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                steps: self.steps,
            });
        }
        Ok(())
    }

    /// `ceil(λT)`; a 1e-9 slack absorbs products such as `0.3 * 50`
    /// landing just above an integer.
    pub fn lcg_steps(&self) -> usize {
        let raw = self.lambda_split * self.steps as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.steps)
    }

    pub fn gch_steps(&self) -> usize {
        self.steps - self.lcg_steps()
    }
}
