//! Synthetic speckle and two-time correlation data with known dynamics.
//!
//! Everything downstream (preprocessing, training, fitting) is exercised
//! against matrices produced here, so the generators are seeded and
//! bit-reproducible.

use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues of a field correlation matrix above this are clipped to zero.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Pixel intensities over time, `[n_pixels × n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensitySeries {
    values: Array2<f64>,
    pub frame_rate: f64,
}

impl IntensitySeries {
    pub fn new(values: Array2<f64>, frame_rate: f64) -> Result<Self> {
        let (n_pixels, n_frames) = values.dim();
        if n_pixels < 1 || n_frames < 2 {
            return Err(Error::invalid(format!(
                "intensity series needs >= 1 pixel and >= 2 frames, got {n_pixels}x{n_frames}"
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("intensities must be finite and non-negative"));
        }
        Ok(Self { values, frame_rate })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn n_pixels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    /// Replaces the coherent signal in `frames` by an uncorrelated
    /// exponential background of mean `background`, emulating a lost beam.
    pub fn drop_beam(&mut self, frames: Range<usize>, background: f64, seed: u64) -> Result<()> {
        if frames.end > self.n_frames() || !(background > 0.0) {
            return Err(Error::invalid("beam drop range or background out of bounds"));
        }
        let dist = Exp::new(1.0 / background).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mut row in self.values.axis_iter_mut(Axis(0)) {
            for t in frames.clone() {
                row[t] = dist.sample(&mut rng);
            }
        }
        Ok(())
    }
}

/// Square symmetric two-time correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoTimeCorrelation {
    values: Array2<f64>,
    pub frame_rate: f64,
    pub roi_label: String,
}

impl TwoTimeCorrelation {
    /// Wraps `values`, which must be square, at least 2×2 and exactly symmetric.
    pub fn new(values: Array2<f64>, frame_rate: f64, roi_label: impl Into<String>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r < 2 {
            return Err(Error::invalid(format!(
                "two-time correlation must be square with T >= 2, got {r}x{c}"
            )));
        }
        for i in 0..r {
            for j in 0..i {
                if values[[i, j]].to_bits() != values[[j, i]].to_bits() {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            values,
            frame_rate,
            roi_label: roi_label.into(),
        })
    }

    /// Like [`TwoTimeCorrelation::new`] but forces symmetry with `(M + Mᵀ)/2`.
    pub fn symmetrized(values: Array2<f64>, frame_rate: f64, roi_label: impl Into<String>) -> Result<Self> {
        let sym = symmetrize(&values)?;
        Self::new(sym, frame_rate, roi_label)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    /// Same metadata, new values.
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        Self::new(values, self.frame_rate, self.roi_label.clone())
    }
}

/// `(M + Mᵀ)/2`, bitwise symmetric.
pub fn symmetrize(m: &Array2<f64>) -> Result<Array2<f64>> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::invalid(format!("cannot symmetrize a {r}x{c} matrix")));
    }
    let mut out = Array2::zeros((r, r));
    for i in 0..r {
        out[[i, i]] = m[[i, i]];
        for j in 0..i {
            let v = (m[[i, j]] + m[[j, i]]) / 2.0;
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(out)
}

/// Single-point KWW form `C∞ + β·exp(−2(Γ·t_d)^α)`.
#[inline]
pub fn kww_value(gamma: f64, beta: f64, alpha: f64, baseline: f64, td: f64) -> f64 {
    baseline + beta * (-2.0 * (gamma * td).powf(alpha)).exp()
}

pub fn kww_curve(gamma: f64, beta: f64, alpha: f64, baseline: f64, td_grid: &[f64]) -> Result<Vec<f64>> {
    if ![gamma, beta, alpha, baseline].iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("KWW parameters must be finite"));
    }
    if gamma < 0.0 || alpha <= 0.0 {
        return Err(Error::invalid(format!(
            "KWW requires gamma >= 0 and alpha > 0, got gamma={gamma}, alpha={alpha}"
        )));
    }
    if td_grid.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::invalid("delays must be non-negative"));
    }
    Ok(td_grid
        .iter()
        .map(|&t| kww_value(gamma, beta, alpha, baseline, t))
        .collect())
}

/// Age dependence of one KWW parameter over `[0, n_frames − 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Constant(f64),
    /// Straight line from `start` at age 0 to `end` at the last frame.
    Linear { start: f64, end: f64 },
    /// Geometric interpolation between `start` and `end`; both must be positive.
    Exponential { start: f64, end: f64 },
}

impl Trajectory {
    pub fn at(&self, age: f64, n_frames: usize) -> f64 {
        let u = if n_frames > 1 {
            age / (n_frames - 1) as f64
        } else {
            0.0
        };
        match *self {
            Trajectory::Constant(v) => v,
            Trajectory::Linear { start, end } => start + (end - start) * u,
            Trajectory::Exponential { start, end } => start * (end / start).powf(u),
        }
    }

    fn extremes(&self) -> (f64, f64) {
        match *self {
            Trajectory::Constant(v) => (v, v),
            Trajectory::Linear { start, end } | Trajectory::Exponential { start, end } => {
                (start.min(end), start.max(end))
            }
        }
    }

    fn is_finite(&self) -> bool {
        let (lo, hi) = self.extremes();
        lo.is_finite() && hi.is_finite()
    }
}

fn default_frame_rate() -> f64 {
    1.0
}

/// Ground truth for a synthetic ageing 2TCF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_frames: usize,
    pub gamma: Trajectory,
    pub beta: Trajectory,
    pub alpha: Trajectory,
    pub baseline: f64,
    pub noise_sigma: f64,
    pub stripe_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
}

/// KWW parameters of a scenario at one age.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthPoint {
    pub age: f64,
    pub gamma: f64,
    pub beta: f64,
    pub alpha: f64,
    pub baseline: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::invalid(format!(
                "scenario needs n_frames >= 2, got {}",
                self.n_frames
            )));
        }
        for (name, t) in [("gamma", &self.gamma), ("beta", &self.beta), ("alpha", &self.alpha)] {
            if !t.is_finite() {
                return Err(Error::invalid(format!("{name} trajectory is not finite")));
            }
            if let Trajectory::Exponential { start, end } = t {
                if !(*start > 0.0 && *end > 0.0) {
                    return Err(Error::invalid(format!(
                        "{name}: exponential trajectory needs positive endpoints"
                    )));
                }
            }
        }
        let (g_lo, _) = self.gamma.extremes();
        let (b_lo, _) = self.beta.extremes();
        let (a_lo, _) = self.alpha.extremes();
        if g_lo < 0.0 || b_lo <= 0.0 || a_lo <= 0.0 {
            return Err(Error::invalid("scenario requires gamma >= 0, beta > 0, alpha > 0"));
        }
        if !self.baseline.is_finite() {
            return Err(Error::invalid("baseline must be finite"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.stripe_sigma >= 0.0) {
            return Err(Error::invalid("noise scales must be non-negative"));
        }
        Ok(())
    }

    pub fn truth_at(&self, age: f64) -> TruthPoint {
        TruthPoint {
            age,
            gamma: self.gamma.at(age, self.n_frames),
            beta: self.beta.at(age, self.n_frames),
            alpha: self.alpha.at(age, self.n_frames),
            baseline: self.baseline,
        }
    }

    /// Ground truth at every integer frame age.
    pub fn truth_table(&self) -> Vec<TruthPoint> {
        (0..self.n_frames).map(|a| self.truth_at(a as f64)).collect()
    }
}

/// Builds the clean and noisy 2TCFs of a scenario.
///
/// The clean value at `(i, j)` is the KWW form at age `(i + j)/2` and delay
/// `|i − j|`. Noise is iid Gaussian plus a symmetric stripe term `r[i] + r[j]`.
pub fn synth_two_time(spec: &ScenarioSpec) -> Result<(TwoTimeCorrelation, TwoTimeCorrelation)> {
    spec.validate()?;
    let t = spec.n_frames;
    let mut clean = Array2::zeros((t, t));
    for i in 0..t {
        for j in 0..=i {
            let p = spec.truth_at((i + j) as f64 / 2.0);
            let v = kww_value(p.gamma, p.beta, p.alpha, p.baseline, (i - j) as f64);
            clean[[i, j]] = v;
            clean[[j, i]] = v;
        }
    }

    let mut noisy = clean.clone();
    if spec.noise_sigma > 0.0 || spec.stripe_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let stripes: Vec<f64> = (0..t)
            .map(|_| spec.stripe_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for i in 0..t {
            for j in i..t {
                let e = spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                let v = clean[[i, j]] + e + stripes[i] + stripes[j];
                noisy[[i, j]] = v;
                noisy[[j, i]] = v;
            }
        }
    }

    let label = format!("synthetic-{}", spec.seed);
    Ok((
        TwoTimeCorrelation::new(clean, spec.frame_rate, label.clone())?,
        TwoTimeCorrelation::new(noisy, spec.frame_rate, label)?,
    ))
}

/// Draws ageing scenarios for building training and validation corpora.
#[derive(Debug, Clone)]
pub struct ScenarioSampler {
    /// Log-uniform range of the initial rate (1/frames).
    pub gamma_range: (f64, f64),
    /// Log-uniform range of `Γ(end)/Γ(start)`.
    pub gamma_change: (f64, f64),
    pub beta_range: (f64, f64),
    pub alpha_range: (f64, f64),
    pub baseline_range: (f64, f64),
    /// Stripe amplitude as a fraction of the iid noise.
    pub stripe_fraction: f64,
}

impl Default for ScenarioSampler {
    fn default() -> Self {
        Self {
            gamma_range: (0.005, 0.1),
            gamma_change: (1.0 / 3.0, 3.0),
            beta_range: (0.15, 0.4),
            alpha_range: (0.8, 1.8),
            baseline_range: (0.98, 1.03),
            stripe_fraction: 0.25,
        }
    }
}

impl ScenarioSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R, n_frames: usize, noise_sigma: f64) -> ScenarioSpec {
        let log_uniform = |rng: &mut R, (lo, hi): (f64, f64)| -> f64 {
            (rng.random_range(lo.ln()..=hi.ln())).exp()
        };
        let g0 = log_uniform(rng, self.gamma_range);
        let g1 = g0 * log_uniform(rng, self.gamma_change);
        let b0 = rng.random_range(self.beta_range.0..=self.beta_range.1);
        let b1 = (b0 * rng.random_range(0.85..=1.15)).clamp(self.beta_range.0, self.beta_range.1);
        let a0 = rng.random_range(self.alpha_range.0..=self.alpha_range.1);
        let a1 = rng.random_range(self.alpha_range.0..=self.alpha_range.1);
        ScenarioSpec {
            n_frames,
            gamma: Trajectory::Exponential { start: g0, end: g1 },
            beta: Trajectory::Linear { start: b0, end: b1 },
            alpha: Trajectory::Linear { start: a0, end: a1 },
            baseline: rng.random_range(self.baseline_range.0..=self.baseline_range.1),
            noise_sigma,
            stripe_sigma: self.stripe_fraction * noise_sigma,
            seed: rng.random(),
            frame_rate: 1.0,
        }
    }
}

/// Draws `n_pixels` complex Gaussian fields whose two-time correlation is
/// `g1_two_time` and returns their intensities `|E|²`.
///
/// Each pixel uses its own ChaCha stream derived from `seed`, so results do
/// not depend on the rayon thread count.
pub fn simulate_speckle(g1_two_time: &Array2<f64>, n_pixels: usize, seed: u64) -> Result<IntensitySeries> {
    let (t, c) = g1_two_time.dim();
    if t != c || t < 2 {
        return Err(Error::invalid(format!(
            "field correlation must be square with T >= 2, got {t}x{c}"
        )));
    }
    if n_pixels == 0 {
        return Err(Error::invalid("n_pixels must be >= 1"));
    }
    for i in 0..t {
        if (g1_two_time[[i, i]] - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("field correlation diagonal at {i} is not 1")));
        }
        for j in 0..i {
            if (g1_two_time[[i, j]] - g1_two_time[[j, i]]).abs() > 1e-12 {
                return Err(Error::invalid(format!("field correlation not symmetric at ({i}, {j})")));
            }
        }
    }
    let factor = psd_square_root(g1_two_time)?;

    let rows: Vec<Vec<f64>> = (0..n_pixels)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let re: Vec<f64> = (0..t).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let im: Vec<f64> = (0..t).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            (0..t)
                .map(|row| {
                    let (mut er, mut ei) = (0.0, 0.0);
                    for k in 0..t {
                        let f = factor[(row, k)];
                        er += f * re[k];
                        ei += f * im[k];
                    }
                    // ξ = (n1 + i n2)/√2 keeps ⟨|E|²⟩ = 1.
                    0.5 * (er * er + ei * ei)
                })
                .collect()
        })
        .collect();

    let mut values = Array2::zeros((n_pixels, t));
    for (p, row) in rows.into_iter().enumerate() {
        values.row_mut(p).assign(&Array1::from(row));
    }
    IntensitySeries::new(values, 1.0)
}

/// `V·diag(√λ)` for a symmetric PSD matrix (eigenvalues clipped at zero).
fn psd_square_root(m: &Array2<f64>) -> Result<DMatrix<f64>> {
    let t = m.nrows();
    let dm = DMatrix::from_fn(t, t, |i, j| m[[i, j]]);
    let eig = SymmetricEigen::new(dm);
    let mut vectors = eig.eigenvectors;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < PSD_TOLERANCE {
            return Err(Error::invalid(format!(
                "field correlation is not positive semi-definite (eigenvalue {lambda:e})"
            )));
        }
        let s = lambda.max(0.0).sqrt();
        vectors.column_mut(k).scale_mut(s);
    }
    Ok(vectors)
}

/// Pixel-averaged intensity correlation normalized by the frame means.
pub fn compute_2tcf(series: &IntensitySeries) -> Result<TwoTimeCorrelation> {
    let values = series.values();
    let n_pixels = series.n_pixels() as f64;
    let means = values.mean_axis(Axis(0)).expect("series has at least one pixel");
    if let Some(frame) = means.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::DegenerateFrame { frame });
    }
    let products = values.t().dot(values);
    let t = series.n_frames();
    let mut c2 = Array2::zeros((t, t));
    for i in 0..t {
        for j in 0..=i {
            let v = products[[i, j]] / n_pixels / (means[i] * means[j]);
            c2[[i, j]] = v;
            c2[[j, i]] = v;
        }
    }
    TwoTimeCorrelation::new(c2, series.frame_rate, "speckle")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn constant_spec(n: usize) -> ScenarioSpec {
        ScenarioSpec {
            n_frames: n,
            gamma: Trajectory::Constant(0.05),
            beta: Trajectory::Constant(0.2),
            alpha: Trajectory::Constant(1.3),
            baseline: 1.0,
            noise_sigma: 0.0,
            stripe_sigma: 0.0,
            seed: 7,
            frame_rate: 10.0,
        }
    }

    #[test]
    fn kww_examples() {
        let v = kww_curve(0.0, 0.2, 0.7, 1.0, &[0.0, 1.0, 50.0]).unwrap();
        assert!(v.iter().all(|x| (*x - 1.2).abs() < 1e-15));
        let v = kww_curve(0.3, 0.25, 1.7, 1.01, &[0.0]).unwrap();
        assert_eq!(v[0], 1.01 + 0.25);
        // independent scalar evaluation: 1 + 0.3·e^(−2·0.5)
        let v = kww_curve(0.5, 0.3, 1.0, 1.0, &[1.0]).unwrap();
        assert_relative_eq!(v[0], 1.0 + 0.3 * (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(v[0], 1.11036, epsilon = 1e-5);
    }

    #[test]
    fn kww_rejects_bad_parameters() {
        assert!(matches!(kww_curve(f64::NAN, 0.2, 1.0, 1.0, &[1.0]), Err(Error::InvalidArgument(_))));
        assert!(kww_curve(0.1, f64::INFINITY, 1.0, 1.0, &[1.0]).is_err());
        assert!(kww_curve(-0.1, 0.2, 1.0, 1.0, &[1.0]).is_err());
        assert!(kww_curve(0.1, 0.2, 0.0, 1.0, &[1.0]).is_err());
        assert!(kww_curve(0.1, 0.2, 1.0, 1.0, &[-1.0]).is_err());
    }

    #[test]
    fn equilibrium_lines_are_constant() {
        let (clean, noisy) = synth_two_time(&constant_spec(60)).unwrap();
        assert_eq!(clean, noisy);
        let c = clean.values();
        for td in 0..60 {
            let first = c[[td, 0]];
            for j in 0..60 - td {
                assert_eq!(c[[j + td, j]], first);
            }
        }
    }

    #[test]
    fn noisy_output_is_symmetric_and_seeded() {
        let mut spec = constant_spec(40);
        spec.noise_sigma = 0.1;
        spec.stripe_sigma = 0.05;
        let (_, a) = synth_two_time(&spec).unwrap();
        let (_, b) = synth_two_time(&spec).unwrap();
        assert_eq!(a, b);
        spec.seed += 1;
        let (_, c) = synth_two_time(&spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_rejects_short_scenarios() {
        assert!(synth_two_time(&constant_spec(1)).is_err());
        let mut spec = constant_spec(10);
        spec.beta = Trajectory::Constant(0.0);
        assert!(synth_two_time(&spec).is_err());
    }

    #[test]
    fn trajectories_hit_endpoints() {
        let t = Trajectory::Exponential { start: 0.01, end: 0.1 };
        assert_relative_eq!(t.at(0.0, 11), 0.01);
        assert_relative_eq!(t.at(10.0, 11), 0.1, epsilon = 1e-15);
        assert_relative_eq!(t.at(5.0, 11), 0.1f64.sqrt() * 0.1, epsilon = 1e-15);
        let l = Trajectory::Linear { start: 1.0, end: 2.0 };
        assert_relative_eq!(l.at(2.5, 11), 1.25);
    }

    #[test]
    fn compute_2tcf_hand_example() {
        // pixels × frames
        let series = IntensitySeries::new(array![[1.0, 2.0], [3.0, 2.0]], 1.0).unwrap();
        let c2 = compute_2tcf(&series).unwrap();
        assert_relative_eq!(c2.values()[[0, 1]], 1.0, epsilon = 1e-15);
        assert_eq!(c2.values()[[0, 1]], c2.values()[[1, 0]]);
        // diagonal: frame 0 ⟨I²⟩ = 5, mean 2 → 1.25
        assert_relative_eq!(c2.values()[[0, 0]], 1.25, epsilon = 1e-15);
    }

    #[test]
    fn compute_2tcf_constant_is_ones() {
        let series = IntensitySeries::new(Array2::from_elem((5, 7), 3.5), 1.0).unwrap();
        let c2 = compute_2tcf(&series).unwrap();
        assert!(c2.values().iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_frame_is_reported() {
        let series = IntensitySeries::new(array![[1.0, 0.0, 2.0], [3.0, 0.0, 2.0]], 1.0).unwrap();
        match compute_2tcf(&series) {
            Err(Error::DegenerateFrame { frame }) => assert_eq!(frame, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fully_correlated_field_is_static() {
        let g1 = Array2::from_elem((6, 6), 1.0);
        let s = simulate_speckle(&g1, 50, 3).unwrap();
        // clipped zero eigenvalues leave square-root noise near 1e-8
        for row in s.values().rows() {
            for t in 1..6 {
                assert_relative_eq!(row[t], row[0], max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn non_psd_field_is_rejected() {
        let g1 = array![[1.0, 0.99, -0.99], [0.99, 1.0, 0.99], [-0.99, 0.99, 1.0]];
        assert!(matches!(simulate_speckle(&g1, 10, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn speckle_is_seed_deterministic() {
        let g1 = Array2::from_shape_fn((8, 8), |(i, j)| (-0.3 * (i as f64 - j as f64).abs()).exp());
        let a = simulate_speckle(&g1, 200, 11).unwrap();
        let b = simulate_speckle(&g1, 200, 11).unwrap();
        assert_eq!(a, b);
        let c = simulate_speckle(&g1, 200, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_field_decorrelates() {
        let n = 100_000;
        let g1 = Array2::eye(5);
        let c2 = compute_2tcf(&simulate_speckle(&g1, n, 5).unwrap()).unwrap();
        let tol = 5.0 / (n as f64).sqrt();
        for i in 0..5 {
            for j in 0..i {
                assert!((c2.values()[[i, j]] - 1.0).abs() < tol, "{}", c2.values()[[i, j]]);
            }
        }
    }
}
