use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftFit {
    pub velocity: f64,
    pub stderr: f64,
}

/// Weighted least-squares fit of `Γ = v·q` through the origin.
///
/// `sigmas` are optional standard errors of Γ (weights `1/σ²`). Points with
/// non-finite Γ or σ are ignored.
pub fn drift_velocity(points: &[(f64, f64)], sigmas: Option<&[f64]>) -> Result<DriftFit> {
    if let Some(s) = sigmas {
        if s.len() != points.len() {
            return Err(Error::invalid("sigmas must align with points"));
        }
    }
    let used: Vec<(f64, f64, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, &(q, g))| {
            let w = sigmas.map_or(1.0, |s| 1.0 / (s[i] * s[i]));
            (q, g, w)
        })
        .filter(|(q, g, w)| q.is_finite() && g.is_finite() && w.is_finite() && *w > 0.0)
        .collect();
    let mut qs: Vec<f64> = used.iter().map(|p| p.0).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    if qs.len() < 2 {
        return Err(Error::invalid("drift velocity needs at least two distinct q values"));
    }
    let sqq: f64 = used.iter().map(|(q, _, w)| w * q * q).sum();
    let sqg: f64 = used.iter().map(|(q, g, w)| w * q * g).sum();
    let velocity = sqg / sqq;
    let ssr: f64 = used.iter().map(|(q, g, w)| w * (g - velocity * q).powi(2)).sum();
    let s2 = ssr / (used.len() - 1) as f64;
    Ok(DriftFit {
        velocity,
        stderr: (s2 / sqq).sqrt(),
    })
}
