use serde::{Deserialize, Serialize};

use super::{FitResult, FitVariant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustConfig {
    /// β and C∞ are untrusted when the half-time exceeds this fraction of the cut length.
    pub slow_fraction: f64,
    /// β is untrusted when the half-time is shorter than this many frames.
    pub fast_frames: f64,
    pub max_abs_correlation: f64,
    pub max_relative_error: f64,
    pub min_r_squared: f64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            slow_fraction: 0.5,
            fast_frames: 2.0,
            max_abs_correlation: 0.95,
            max_relative_error: 0.5,
            min_r_squared: 0.85,
        }
    }
}

impl TrustConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.slow_fraction > 0.0
            && self.slow_fraction <= 1.0
            && self.fast_frames >= 1.0
            && self.max_abs_correlation > 0.0
            && self.max_abs_correlation <= 1.0
            && self.max_relative_error > 0.0
            && self.min_r_squared <= 1.0;
        if !ok || !self.fast_frames.is_finite() || !self.max_relative_error.is_finite() {
            return Err(Error::invalid(format!("trust thresholds out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Per-age masks of reliable parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub gamma: Vec<bool>,
    pub beta: Vec<bool>,
    pub alpha: Vec<bool>,
    pub baseline: Vec<bool>,
}

impl TrustRegion {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// Mask of parameter `k` in `[gamma, beta, alpha, baseline]` order.
    pub fn mask(&self, k: usize) -> &[bool] {
        match k {
            0 => &self.gamma,
            1 => &self.beta,
            2 => &self.alpha,
            3 => &self.baseline,
            _ => panic!("parameter index {k} out of range"),
        }
    }

    pub fn at(&self, i: usize) -> [bool; 4] {
        [self.gamma[i], self.beta[i], self.alpha[i], self.baseline[i]]
    }
}

/// Trust mask of one fit, in `[gamma, beta, alpha, baseline]` order.
pub fn trust_mask(fit: &FitVariant, cut_length: usize, cfg: &TrustConfig) -> [bool; 4] {
    if !fit.is_valid() || !(fit.r_squared >= cfg.min_r_squared) {
        return [false; 4];
    }
    let mut t = [true; 4];
    let ht = fit.half_time;
    if !(ht <= cfg.slow_fraction * cut_length as f64) {
        t[1] = false;
        t[3] = false;
    }
    if ht < cfg.fast_frames {
        t[1] = false;
    }
    for i in 0..4 {
        for j in i + 1..4 {
            let c = fit.correlations[i][j];
            if !(c.abs() <= cfg.max_abs_correlation) {
                t[i] = false;
                t[j] = false;
            }
        }
    }
    let p = fit.params.to_array();
    let e = fit.errors.to_array();
    for k in 0..4 {
        let rel = e[k] / p[k].abs();
        if !(rel <= cfg.max_relative_error) {
            t[k] = false;
        }
    }
    t
}

pub fn trust_region(fits: &[FitResult], cut_lengths: &[usize], cfg: &TrustConfig) -> TrustRegion {
    assert_eq!(fits.len(), cut_lengths.len(), "fits and cut lengths must align");
    let mut out = TrustRegion::default();
    for (f, &n) in fits.iter().zip(cut_lengths) {
        let m = trust_mask(f.effective(), n, cfg);
        out.gamma.push(m[0]);
        out.beta.push(m[1]);
        out.alpha.push(m[2]);
        out.baseline.push(m[3]);
    }
    out
}
