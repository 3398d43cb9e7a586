//! One-time cuts of a 2TCF and their fits to the KWW form
//! `C∞ + β·exp(−2(Γ t_d)^α)`.

mod lm;
mod trust;

pub use trust::{trust_mask, trust_region, TrustConfig, TrustRegion};

use nalgebra::{DMatrix, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrsim::TwoTimeCorrelation;
use crate::error::{Error, Result};
use lm::{minimize, LmOptions, Problem};

/// Cuts with fewer points are not fitted.
pub const MIN_CUT_POINTS: usize = 5;

/// Starting values of Γ (1/frames) tried by [`fit_1tcf`].
pub const GAMMA_GRID: [f64; 5] = [0.01, 0.0316, 0.1, 0.316, 1.0];

/// Row of the trust mask / index of a parameter in vector form.
pub const PARAM_NAMES: [&str; 4] = ["gamma", "beta", "alpha", "baseline"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneTimeCut {
    pub td_values: Vec<f64>,
    pub c1_values: Vec<f64>,
    pub weights: Vec<f64>,
    /// Standard error of each point; only for bins wider than one frame.
    pub stderr: Option<Vec<f64>>,
    pub age_center: f64,
    pub bin_width: usize,
}

impl OneTimeCut {
    pub fn len(&self) -> usize {
        self.td_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.td_values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KWWParams {
    #[serde(with = "crate::jsonf")]
    pub gamma: f64,
    #[serde(with = "crate::jsonf")]
    pub beta: f64,
    #[serde(with = "crate::jsonf")]
    pub alpha: f64,
    #[serde(with = "crate::jsonf")]
    pub baseline: f64,
}

impl KWWParams {
    pub const NAN: KWWParams = KWWParams {
        gamma: f64::NAN,
        beta: f64::NAN,
        alpha: f64::NAN,
        baseline: f64::NAN,
    };

    pub fn to_array(&self) -> [f64; 4] {
        [self.gamma, self.beta, self.alpha, self.baseline]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            gamma: a[0],
            beta: a[1],
            alpha: a[2],
            baseline: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn eval(&self, td: f64) -> f64 {
        crate::corrsim::kww_value(self.gamma, self.beta, self.alpha, self.baseline, td)
    }
}

/// Per-parameter `(lo, hi)` boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    #[serde(with = "crate::jsonf::pair")]
    pub gamma: (f64, f64),
    #[serde(with = "crate::jsonf::pair")]
    pub beta: (f64, f64),
    #[serde(with = "crate::jsonf::pair")]
    pub alpha: (f64, f64),
    #[serde(with = "crate::jsonf::pair")]
    pub baseline: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            gamma: (1e-5, 10.0),
            beta: (1e-6, 2.0),
            alpha: (0.2, 3.0),
            baseline: (0.5, 1.5),
        }
    }
}

impl Bounds {
    pub fn to_array(&self) -> [(f64, f64); 4] {
        [self.gamma, self.beta, self.alpha, self.baseline]
    }

    pub fn from_array(a: [(f64, f64); 4]) -> Self {
        Self {
            gamma: a[0],
            beta: a[1],
            alpha: a[2],
            baseline: a[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in PARAM_NAMES.iter().zip(self.to_array()) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("bounds for {name} must satisfy lo < hi, got ({lo}, {hi})")));
            }
        }
        if self.gamma.0 <= 0.0 || self.alpha.0 <= 0.0 || self.beta.0 <= 0.0 {
            return Err(Error::invalid("lower bounds of gamma, beta and alpha must be positive"));
        }
        Ok(())
    }
}

/// One fitted parameter set with its uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitVariant {
    pub params: KWWParams,
    pub errors: KWWParams,
    #[serde(with = "crate::jsonf::mat4")]
    pub correlations: [[f64; 4]; 4],
    #[serde(with = "crate::jsonf")]
    pub r_squared: f64,
    #[serde(with = "crate::jsonf")]
    pub half_time: f64,
}

impl FitVariant {
    fn sentinel(r_squared: f64) -> Self {
        Self {
            params: KWWParams::NAN,
            errors: KWWParams::NAN,
            correlations: [[f64::NAN; 4]; 4],
            r_squared,
            half_time: f64::NAN,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.params.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(flatten)]
    pub fit: FitVariant,
    /// Second pass with tail weights and the baseline frozen.
    pub weighted_variant: Option<FitVariant>,
    pub n_points: usize,
}

impl FitResult {
    pub fn params(&self) -> &KWWParams {
        &self.fit.params
    }

    /// The weighted variant when it is valid, else the first pass.
    pub fn effective(&self) -> &FitVariant {
        match &self.weighted_variant {
            Some(v) if v.is_valid() => v,
            _ => &self.fit,
        }
    }
}

/// `(ln 2 / 2)^(1/α) / Γ`; infinite for `Γ = 0`, NaN for invalid inputs.
pub fn half_time(gamma: f64, alpha: f64) -> f64 {
    if !(alpha > 0.0) || !(gamma >= 0.0) {
        return f64::NAN;
    }
    if gamma == 0.0 {
        return f64::INFINITY;
    }
    (std::f64::consts::LN_2 / 2.0).powf(1.0 / alpha) / gamma
}

/// Rows of the bin `[age − ⌊w/2⌋, age + ⌈w/2⌉)`.
fn bin_rows(n: usize, age: usize, width: usize) -> Result<std::ops::Range<usize>> {
    if width == 0 {
        return Err(Error::invalid("bin width must be at least 1"));
    }
    let half = width / 2;
    if age >= n || age < half || age + (width - half) > n {
        return Err(Error::invalid(format!(
            "bin of width {width} around age {age} leaves the {n}-frame matrix"
        )));
    }
    Ok(age - half..age + (width - half))
}

/// Averages `c2[t, t + t_d]` over the rows `t` of the age bin, for `t_d ≥ 1`.
pub fn extract_1tcf(c2: &TwoTimeCorrelation, age: usize, bin_width: usize) -> Result<OneTimeCut> {
    let n = c2.n_frames();
    let rows = bin_rows(n, age, bin_width)?;
    let m = c2.values();
    let min_count = if bin_width > 1 { 2 } else { 1 };
    let (mut td_values, mut c1_values, mut stderr) = (Vec::new(), Vec::new(), Vec::new());
    for td in 1..n {
        let vals: Vec<f64> = rows.clone().filter(|t| t + td < n).map(|t| m[[t, t + td]]).collect();
        if vals.len() < min_count {
            break;
        }
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        td_values.push(td as f64);
        c1_values.push(mean);
        if bin_width > 1 {
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
            stderr.push((var / k).sqrt());
        }
    }
    let weights = if bin_width > 1 { stderr_weights(&stderr) } else { vec![1.0; td_values.len()] };
    Ok(OneTimeCut {
        td_values,
        c1_values,
        weights,
        stderr: (bin_width > 1).then_some(stderr),
        age_center: (rows.start + rows.end - 1) as f64 / 2.0,
        bin_width,
    })
}

/// Weights proportional to 1/stderr, with standard errors floored at the
/// smallest positive one, normalized to mean 1.
fn stderr_weights(stderr: &[f64]) -> Vec<f64> {
    let floor = stderr.iter().copied().filter(|s| *s > 0.0).fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return vec![1.0; stderr.len()];
    }
    let raw: Vec<f64> = stderr.iter().map(|s| 1.0 / s.max(floor)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Weighted residuals `w (f(t_d) − y)` of the KWW model.
struct KwwProblem<'a> {
    td: &'a [f64],
    y: &'a [f64],
    w: &'a [f64],
}

impl Problem for KwwProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.td.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let k = KWWParams::from_array([p[0], p[1], p[2], p[3]]);
        for i in 0..self.td.len() {
            out[i] = self.w[i] * (k.eval(self.td[i]) - self.y[i]);
        }
    }

    fn jacobian(&self, p: &[f64], out: &mut DMatrix<f64>) {
        let (gamma, beta, alpha) = (p[0], p[1], p[2]);
        for i in 0..self.td.len() {
            let x = gamma * self.td[i];
            let u = x.powf(alpha);
            let e = (-2.0 * u).exp();
            let w = self.w[i];
            out[(i, 0)] = w * (-2.0 * beta * e * alpha * u / gamma);
            out[(i, 1)] = w * e;
            out[(i, 2)] = w * (-2.0 * beta * e * u * x.ln());
            out[(i, 3)] = w;
        }
    }
}

/// Weighted coefficient of determination.
fn r_squared(y: &[f64], fitted: &[f64], w: &[f64]) -> f64 {
    let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
    let sw: f64 = w2.iter().sum();
    let mean = y.iter().zip(&w2).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ss_tot: f64 = y.iter().zip(&w2).map(|(a, b)| b * (a - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted).zip(&w2).map(|((a, f), b)| b * (a - f).powi(2)).sum();
    if ss_tot == 0.0 {
        return f64::NAN;
    }
    1.0 - ss_res / ss_tot
}

/// Standard errors and correlations from `s² (JᵀJ)⁻¹` over the free parameters.
fn covariance(problem: &KwwProblem, p: &[f64], free: &[bool; 4], cost: f64) -> ([f64; 4], [[f64; 4]; 4]) {
    let n = problem.n_residuals();
    let idx: Vec<usize> = (0..4).filter(|&k| free[k]).collect();
    let dof = n as f64 - idx.len() as f64;
    let mut errors = [f64::NAN; 4];
    let mut corr = [[f64::NAN; 4]; 4];
    if dof <= 0.0 {
        return (errors, corr);
    }
    let mut jac = DMatrix::zeros(n, 4);
    problem.jacobian(p, &mut jac);
    let mut jtj = Matrix4::<f64>::zeros();
    for a in 0..4 {
        for b in 0..4 {
            jtj[(a, b)] = (0..n).map(|i| jac[(i, a)] * jac[(i, b)]).sum();
        }
    }
    let na = idx.len();
    let sub = DMatrix::from_fn(na, na, |a, b| jtj[(idx[a], idx[b])]);
    let Some(inv) = sub.try_inverse() else {
        return (errors, corr);
    };
    let s2 = cost / dof;
    for a in 0..na {
        let var = inv[(a, a)] * s2;
        if var.is_finite() && var > 0.0 {
            errors[idx[a]] = var.sqrt();
        } else if var == 0.0 {
            errors[idx[a]] = 0.0;
        }
    }
    for a in 0..na {
        for b in 0..na {
            let d = (inv[(a, a)] * inv[(b, b)]).sqrt();
            corr[idx[a]][idx[b]] = if a == b {
                if inv[(a, a)] > 0.0 { 1.0 } else { f64::NAN }
            } else if d > 0.0 && d.is_finite() {
                (inv[(a, b)] / d).clamp(-1.0, 1.0)
            } else {
                f64::NAN
            };
        }
    }
    (errors, corr)
}

fn finish_variant(problem: &KwwProblem, p: [f64; 4], free: &[bool; 4], cost: f64) -> FitVariant {
    let fitted: Vec<f64> = problem.td.iter().map(|&t| KWWParams::from_array(p).eval(t)).collect();
    let r2 = r_squared(problem.y, &fitted, problem.w);
    let (errors, correlations) = covariance(problem, &p, free, cost);
    FitVariant {
        params: KWWParams::from_array(p),
        errors: KWWParams::from_array(errors),
        correlations,
        r_squared: r2,
        half_time: half_time(p[0], p[2]),
    }
}

fn check_cut(cut: &OneTimeCut) -> Result<()> {
    let n = cut.len();
    if cut.c1_values.len() != n || cut.weights.len() != n {
        return Err(Error::invalid("cut arrays have different lengths"));
    }
    if n < MIN_CUT_POINTS {
        return Err(Error::TooFewPoints { needed: MIN_CUT_POINTS, got: n });
    }
    if cut.td_values.windows(2).any(|w| !(w[1] > w[0])) || !(cut.td_values[0] > 0.0) {
        return Err(Error::invalid("delays must be positive and strictly increasing"));
    }
    if cut.c1_values.iter().chain(&cut.weights).any(|v| !v.is_finite()) {
        return Err(Error::invalid("cut contains non-finite values"));
    }
    Ok(())
}

/// Fits the KWW form to a cut with a scan over starting values of Γ.
///
/// Returns the attempt with the highest R². If that R² does not beat a
/// constant line (R² ≤ 0), all parameters are NaN.
pub fn fit_1tcf(cut: &OneTimeCut, bounds: &Bounds, init: Option<&KWWParams>) -> Result<FitResult> {
    check_cut(cut)?;
    bounds.validate()?;
    let (lo, hi): (Vec<f64>, Vec<f64>) = bounds.to_array().iter().copied().unzip();
    let problem = KwwProblem {
        td: &cut.td_values,
        y: &cut.c1_values,
        w: &cut.weights,
    };
    let n = cut.len();
    let tail = (n / 10).max(1);
    let c0 = cut.c1_values[n - tail..].iter().sum::<f64>() / tail as f64;
    let b0 = (cut.c1_values[0] - c0).abs().max(1e-3);

    let mut starts: Vec<[f64; 4]> = Vec::new();
    if let Some(p) = init {
        starts.push(p.to_array());
    }
    for g in GAMMA_GRID {
        starts.push([g, b0, 1.0, c0]);
    }
    let inside = |v: f64, k: usize| -> f64 {
        if v.is_finite() {
            v.clamp(lo[k], hi[k])
        } else {
            (lo[k] + hi[k]) / 2.0
        }
    };
    let free = [true; 4];
    let opts = LmOptions::default();
    let mut best: Option<(f64, bool, [f64; 4], f64)> = None;
    for s in &starts {
        let s: Vec<f64> = s.iter().enumerate().map(|(k, &v)| inside(v, k)).collect();
        let out = minimize(&problem, &s, &lo, &hi, &free, &opts);
        if !out.cost.is_finite() {
            continue;
        }
        let p = [out.params[0], out.params[1], out.params[2], out.params[3]];
        let fitted: Vec<f64> = cut.td_values.iter().map(|&t| KWWParams::from_array(p).eval(t)).collect();
        let r2 = r_squared(&cut.c1_values, &fitted, &cut.weights);
        let better = match &best {
            None => true,
            Some((br2, bconv, _, _)) => {
                (out.converged && !bconv) || (out.converged == *bconv && r2.total_cmp(br2).is_gt())
            }
        };
        if better {
            best = Some((r2, out.converged, p, out.cost));
        }
    }
    let fit = match best {
        Some((r2, _, p, cost)) if r2 > 0.0 => finish_variant(&problem, p, &free, cost),
        Some((r2, ..)) => FitVariant::sentinel(r2),
        None => FitVariant::sentinel(f64::NAN),
    };
    Ok(FitResult {
        fit,
        weighted_variant: None,
        n_points: n,
    })
}

/// Second-pass weight of a point: 1 where the first fit exceeds `1 + β/e`,
/// `1/ln(t_d)` elsewhere (1 at `t_d = 1`).
pub fn tail_weight(first: &KWWParams, td: f64) -> f64 {
    if first.eval(td) > 1.0 + first.beta / std::f64::consts::E || td <= 1.0 {
        1.0
    } else {
        1.0 / td.ln()
    }
}

/// Refits with tail weights and the baseline frozen at the first-pass value.
///
/// The baseline error and its correlations are carried over from the first pass.
pub fn two_pass_fit(cut: &OneTimeCut, first: &FitResult, bounds: &Bounds) -> Result<FitResult> {
    check_cut(cut)?;
    if !first.fit.is_valid() {
        return Err(Error::invalid("two-pass fit needs a valid first pass"));
    }
    let (mut lo, mut hi): (Vec<f64>, Vec<f64>) = bounds.to_array().iter().copied().unzip();
    let p0 = first.fit.params;
    lo[3] = lo[3].min(p0.baseline);
    hi[3] = hi[3].max(p0.baseline);
    let weights: Vec<f64> = cut
        .td_values
        .iter()
        .zip(&cut.weights)
        .map(|(&t, &w)| w * tail_weight(&p0, t))
        .collect();
    let problem = KwwProblem {
        td: &cut.td_values,
        y: &cut.c1_values,
        w: &weights,
    };
    let free = [true, true, true, false];
    let out = minimize(&problem, &p0.to_array(), &lo, &hi, &free, &LmOptions::default());
    let p = [out.params[0], out.params[1], out.params[2], p0.baseline];
    let mut v = finish_variant(&problem, p, &free, out.cost);
    v.errors.baseline = first.fit.errors.baseline;
    for k in 0..4 {
        v.correlations[3][k] = first.fit.correlations[3][k];
        v.correlations[k][3] = first.fit.correlations[k][3];
    }
    let variant = if v.r_squared > 0.0 { v } else { FitVariant::sentinel(v.r_squared) };
    Ok(FitResult {
        fit: first.fit.clone(),
        weighted_variant: Some(variant),
        n_points: first.n_points,
    })
}

/// First pass plus, when valid, the tail-weighted second pass.
pub fn fit_cut(cut: &OneTimeCut, bounds: &Bounds, init: Option<&KWWParams>) -> Result<FitResult> {
    let first = fit_1tcf(cut, bounds, init)?;
    if first.fit.is_valid() {
        two_pass_fit(cut, &first, bounds)
    } else {
        Ok(first)
    }
}

/// Fits at every age of a bin grid.
///
/// Serialized as a list of per-age entries, each carrying its trust flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "AgeFitsFile", try_from = "AgeFitsFile")]
pub struct AgeFits {
    pub bin_width: usize,
    /// Bin centers in frames.
    pub ages: Vec<f64>,
    pub ages_seconds: Vec<f64>,
    pub cut_lengths: Vec<usize>,
    pub fits: Vec<FitResult>,
    pub trust: TrustRegion,
}

impl AgeFits {
    pub fn len(&self) -> usize {
        self.fits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fits.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct TrustFlags {
    gamma: bool,
    beta: bool,
    alpha: bool,
    baseline: bool,
}

#[derive(Serialize, Deserialize)]
struct AgeEntry {
    #[serde(with = "crate::jsonf")]
    age: f64,
    #[serde(with = "crate::jsonf")]
    age_seconds: f64,
    cut_length: usize,
    #[serde(flatten)]
    fit: FitResult,
    trust: TrustFlags,
}

#[derive(Serialize, Deserialize)]
struct AgeFitsFile {
    bin_width: usize,
    entries: Vec<AgeEntry>,
}

impl From<AgeFits> for AgeFitsFile {
    fn from(a: AgeFits) -> Self {
        let entries = a
            .fits
            .into_iter()
            .enumerate()
            .map(|(i, fit)| {
                let [gamma, beta, alpha, baseline] = a.trust.at(i);
                AgeEntry {
                    age: a.ages[i],
                    age_seconds: a.ages_seconds[i],
                    cut_length: a.cut_lengths[i],
                    fit,
                    trust: TrustFlags { gamma, beta, alpha, baseline },
                }
            })
            .collect();
        Self {
            bin_width: a.bin_width,
            entries,
        }
    }
}

impl TryFrom<AgeFitsFile> for AgeFits {
    type Error = String;

    fn try_from(f: AgeFitsFile) -> std::result::Result<Self, String> {
        if f.bin_width == 0 {
            return Err("bin_width must be at least 1".into());
        }
        let mut out = AgeFits {
            bin_width: f.bin_width,
            ages: Vec::new(),
            ages_seconds: Vec::new(),
            cut_lengths: Vec::new(),
            fits: Vec::new(),
            trust: TrustRegion::default(),
        };
        for e in f.entries {
            out.ages.push(e.age);
            out.ages_seconds.push(e.age_seconds);
            out.cut_lengths.push(e.cut_length);
            out.fits.push(e.fit);
            out.trust.gamma.push(e.trust.gamma);
            out.trust.beta.push(e.trust.beta);
            out.trust.alpha.push(e.trust.alpha);
            out.trust.baseline.push(e.trust.baseline);
        }
        Ok(out)
    }
}

/// Age indices of the bin grid `k·w + ⌊w/2⌋`.
pub fn age_grid(n_frames: usize, bin_width: usize) -> Vec<usize> {
    if bin_width == 0 || bin_width > n_frames {
        return Vec::new();
    }
    (0..n_frames / bin_width).map(|k| k * bin_width + bin_width / 2).collect()
}

/// Extracts and fits the cut at every age of the bin grid. Cuts with fewer
/// than [`MIN_CUT_POINTS`] points are skipped; failed fits become NaN entries.
pub fn fit_2tcf(
    c2: &TwoTimeCorrelation,
    bin_width: usize,
    bounds: &Bounds,
    cfg: &TrustConfig,
    init: Option<&KWWParams>,
) -> Result<AgeFits> {
    if bin_width == 0 {
        return Err(Error::invalid("bin width must be at least 1"));
    }
    bounds.validate()?;
    cfg.validate()?;
    let grid = age_grid(c2.n_frames(), bin_width);
    let cuts: Vec<OneTimeCut> = grid
        .iter()
        .map(|&a| extract_1tcf(c2, a, bin_width))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|c| c.len() >= MIN_CUT_POINTS)
        .collect();
    let fits: Vec<FitResult> = cuts
        .par_iter()
        .map(|cut| {
            fit_cut(cut, bounds, init).unwrap_or_else(|_| FitResult {
                fit: FitVariant::sentinel(f64::NAN),
                weighted_variant: None,
                n_points: cut.len(),
            })
        })
        .collect();
    let cut_lengths: Vec<usize> = cuts.iter().map(|c| c.len()).collect();
    let trust = trust_region(&fits, &cut_lengths, cfg);
    let ages: Vec<f64> = cuts.iter().map(|c| c.age_center).collect();
    Ok(AgeFits {
        bin_width,
        ages_seconds: ages.iter().map(|a| a / c2.frame_rate).collect(),
        ages,
        cut_lengths,
        fits,
        trust,
    })
}

#[cfg(test)]
mod tests;
