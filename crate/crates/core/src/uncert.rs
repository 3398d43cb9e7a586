//! Uncertainty scores for denoised outputs.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autoenc::{encode, ModelWeights};
use crate::corrsim::TwoTimeCorrelation;
use crate::denoiser::apply_100;
use crate::error::{Error, Result};
use crate::prep::{down_map_sized, standardize};

/// Latent-space center of the training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub median_distance: f64,
    /// Fingerprint of the weights the statistics were computed with.
    pub weights_fingerprint: String,
}

fn latent_of(x: &Array2<f64>, w: &ModelWeights) -> Result<Array1<f64>> {
    let (scaled, _) = standardize(x)?;
    encode(&scaled, w)
}

fn normalized_distance(z: &Array1<f64>, mean: &[f64], std: &[f64]) -> f64 {
    z.iter()
        .zip(mean.iter().zip(std))
        .map(|(v, (m, s))| ((v - m) / s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Lower median, so that the score of the median example is exactly 1.
fn lower_median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// Computes latent statistics over (unstandardized) training inputs.
pub fn latent_stats(inputs: &[Array2<f64>], w: &ModelWeights) -> Result<LatentStats> {
    if inputs.len() < 2 {
        return Err(Error::invalid("latent statistics need at least two inputs"));
    }
    let latents = inputs.iter().map(|x| latent_of(x, w)).collect::<Result<Vec<_>>>()?;
    let dim = w.config.latent_dim;
    let n = latents.len() as f64;
    let mut mean = vec![0.0; dim];
    for z in &latents {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; dim];
    for z in &latents {
        for ((s, v), m) in std.iter_mut().zip(z).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for (k, s) in std.iter_mut().enumerate() {
        *s = s.sqrt();
        if !(*s > 0.0) {
            return Err(Error::DegenerateInput(format!("latent coordinate {k} has zero spread")));
        }
    }
    let mut dists: Vec<f64> = latents.iter().map(|z| normalized_distance(z, &mean, &std)).collect();
    let median_distance = lower_median(&mut dists);
    if !(median_distance > 0.0) {
        return Err(Error::DegenerateInput("median latent distance is zero".into()));
    }
    Ok(LatentStats {
        mean,
        std,
        median_distance,
        weights_fingerprint: w.fingerprint(),
    })
}

pub fn check_version(stats: &LatentStats, w: &ModelWeights) -> Result<()> {
    let found = w.fingerprint();
    if stats.weights_fingerprint != found {
        return Err(Error::VersionMismatch {
            expected: stats.weights_fingerprint.clone(),
            found,
        });
    }
    Ok(())
}

/// Normalized distance of the input's latent vector from the training center.
pub fn latent_score(x: &Array2<f64>, w: &ModelWeights, stats: &LatentStats) -> Result<f64> {
    check_version(stats, w)?;
    let z = latent_of(x, w)?;
    Ok(normalized_distance(&z, &stats.mean, &stats.std) / stats.median_distance)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Pearson correlation of consecutive values of a series; 0 for constant series.
pub fn lag1_autocorrelation(p: &[f64]) -> f64 {
    if p.len() < 3 {
        return 0.0;
    }
    pearson(&p[..p.len() - 1], &p[1..])
}

/// Lag-1 autocorrelation of the row-averaged residual `raw − denoised`.
pub fn residual_acc(raw: &Array2<f64>, denoised: &Array2<f64>) -> Result<f64> {
    if raw.dim() != denoised.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            raw.dim(),
            denoised.dim()
        )));
    }
    if raw.nrows() < 3 || raw.ncols() < 3 {
        return Err(Error::invalid("residual needs at least 3 rows and columns"));
    }
    let residual = raw - denoised;
    let p = residual.mean_axis(Axis(0)).expect("non-empty");
    Ok(lag1_autocorrelation(p.as_slice().expect("contiguous")))
}

/// Gaussian kernel density estimate with Scott's bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccKde {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

pub fn fit_kde(samples: &[f64]) -> Result<AccKde> {
    if samples.len() < 2 {
        return Err(Error::invalid("density estimate needs at least two samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("density samples must be finite"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::invalid("density samples have zero variance"));
    }
    Ok(AccKde {
        samples: samples.to_vec(),
        bandwidth: var.sqrt() * n.powf(-0.2),
    })
}

impl AccKde {
    pub fn with_bandwidth(samples: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if samples.is_empty() || !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::invalid("density needs samples and a positive bandwidth"));
        }
        Ok(Self { samples, bandwidth })
    }

    pub fn density(&self, v: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self
            .samples
            .iter()
            .map(|s| (-0.5 * ((v - s) / h).powi(2)).exp())
            .sum::<f64>()
    }

    /// Quantile `q` of the density evaluated at the training samples.
    pub fn density_quantile(&self, q: f64) -> f64 {
        let mut d: Vec<f64> = self.samples.iter().map(|&s| self.density(s)).collect();
        d.sort_by(f64::total_cmp);
        let idx = ((d.len() - 1) as f64 * q.clamp(0.0, 1.0)).floor() as usize;
        d[idx]
    }
}

pub fn acc_density(kde: &AccKde, value: f64) -> f64 {
    kde.density(value)
}

/// ACC density estimate over the residuals of the training inputs.
pub fn training_acc_kde(inputs: &[Array2<f64>], w: &ModelWeights) -> Result<AccKde> {
    let accs = inputs
        .iter()
        .map(|x| residual_acc(x, &apply_100(x, w)?))
        .collect::<Result<Vec<_>>>()?;
    fit_kde(&accs)
}

/// Thresholds turning scores into anomaly flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyThresholds {
    pub max_latent_score: f64,
    /// Inputs whose ACC density falls below this quantile of the training
    /// densities are flagged.
    pub min_density_quantile: f64,
}

impl Default for AnomalyThresholds {
    fn default() -> Self {
        Self {
            max_latent_score: 3.0,
            min_density_quantile: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub latent_score: f64,
    pub residual_acc: f64,
    pub acc_density: f64,
    pub latent_flag: bool,
    pub acc_flag: bool,
}

impl UncertaintyReport {
    pub fn from_scores(
        latent_score: f64,
        residual_acc: f64,
        kde: &AccKde,
        thresholds: &AnomalyThresholds,
    ) -> Self {
        let acc_density = kde.density(residual_acc);
        Self {
            latent_score,
            residual_acc,
            acc_density,
            latent_flag: !(latent_score <= thresholds.max_latent_score),
            acc_flag: acc_density < kde.density_quantile(thresholds.min_density_quantile),
        }
    }

    pub fn anomalous(&self) -> bool {
        self.latent_flag || self.acc_flag
    }
}

/// Scores a single model input.
pub fn score_input(
    x: &Array2<f64>,
    w: &ModelWeights,
    stats: &LatentStats,
    kde: &AccKde,
    thresholds: &AnomalyThresholds,
) -> Result<UncertaintyReport> {
    let latent = latent_score(x, w, stats)?;
    let acc = residual_acc(x, &apply_100(x, w)?)?;
    Ok(UncertaintyReport::from_scores(latent, acc, kde, thresholds))
}

fn pixel_variance(outputs: &[Array2<f64>]) -> Array2<f64> {
    let n = outputs.len() as f64;
    // shifted by the first output so identical outputs give exactly zero
    let first = &outputs[0];
    let shift = outputs.iter().fold(Array2::<f64>::zeros(first.dim()), |acc, o| acc + (o - first)) / n;
    outputs
        .iter()
        .fold(Array2::<f64>::zeros(first.dim()), |acc, o| {
            acc + (o - first - &shift).mapv(|v| v * v)
        })
        / n
}

/// Variance over the stride-3 inputs starting at (0,0), (1,1) and (2,2).
pub fn variance_input_space(c2: &TwoTimeCorrelation, w: &ModelWeights) -> Result<Array2<f64>> {
    let side = w.config.input_side;
    if c2.n_frames() < 3 * side {
        return Err(Error::InputTooSmall {
            needed: 3 * side,
            got: c2.n_frames(),
        });
    }
    let outputs = (0..3)
        .map(|k| apply_100(&down_map_sized(c2, 3, (k, k), side)?, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(pixel_variance(&outputs))
}

/// Variance of the outputs of an ensemble of models on one input.
pub fn variance_model_space(x: &Array2<f64>, ensemble: &[ModelWeights]) -> Result<Array2<f64>> {
    if ensemble.len() < 2 {
        return Err(Error::invalid("ensemble needs at least two members"));
    }
    let outputs = ensemble
        .iter()
        .map(|w| apply_100(x, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(pixel_variance(&outputs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::ModelConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_weights(seed: u64) -> ModelWeights {
        ModelWeights::init(&ModelConfig {
            kernel_size: 3,
            input_side: 12,
            seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn random_inputs(n: usize, side: usize, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let m = Array2::from_shape_fn((side, side), |_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    1.0 + 0.1 * v
                });
                (&m + &m.t()) / 2.0
            })
            .collect()
    }

    /// Trapezoidal integral of the density over a wide range.
    fn integral(kde: &AccKde) -> f64 {
        let lo = kde.samples.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * kde.bandwidth;
        let hi = kde.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * kde.bandwidth;
        let n = 200_000;
        let dx = (hi - lo) / n as f64;
        let mut s = 0.5 * (kde.density(lo) + kde.density(hi));
        for i in 1..n {
            s += kde.density(lo + i as f64 * dx);
        }
        s * dx
    }

    #[test]
    fn median_example_scores_one_and_center_scores_zero() {
        let w = small_weights(1);
        let inputs = random_inputs(9, 12, 2);
        let stats = latent_stats(&inputs, &w).unwrap();
        let mut scores: Vec<f64> = inputs.iter().map(|x| latent_score(x, &w, &stats).unwrap()).collect();
        scores.sort_by(f64::total_cmp);
        assert_relative_eq!(scores[4], 1.0, epsilon = 1e-12);

        let z = latent_of(&inputs[0], &w).unwrap();
        let centered = LatentStats {
            mean: z.to_vec(),
            ..stats.clone()
        };
        assert_eq!(latent_score(&inputs[0], &w, &centered).unwrap(), 0.0);
    }

    #[test]
    fn latent_score_rejects_foreign_weights() {
        let w = small_weights(1);
        let stats = latent_stats(&random_inputs(4, 12, 3), &w).unwrap();
        let other = small_weights(2);
        let x = &random_inputs(1, 12, 4)[0];
        assert!(matches!(latent_score(x, &other, &stats), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn latent_score_invariant_under_restandardization() {
        let w = small_weights(5);
        let inputs = random_inputs(5, 12, 6);
        let stats = latent_stats(&inputs, &w).unwrap();
        let (once, _) = standardize(&inputs[0]).unwrap();
        let a = latent_score(&inputs[0], &w, &stats).unwrap();
        let b = latent_score(&once, &w, &stats).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn alternating_projection_is_perfectly_anticorrelated() {
        let raw = Array2::from_shape_fn((6, 10), |(_, j)| if j % 2 == 0 { 1.0 } else { -1.0 });
        let acc = residual_acc(&raw, &Array2::zeros((6, 10))).unwrap();
        assert_relative_eq!(acc, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn ramp_projection_is_strongly_correlated() {
        let raw = Array2::from_shape_fn((100, 100), |(_, j)| j as f64);
        assert!(residual_acc(&raw, &Array2::zeros((100, 100))).unwrap() >= 0.9);
    }

    #[test]
    fn constant_residual_has_zero_acc() {
        let raw = Array2::from_elem((5, 5), 2.0);
        assert_eq!(residual_acc(&raw, &Array2::ones((5, 5))).unwrap(), 0.0);
        assert!(residual_acc(&raw, &Array2::ones((5, 4))).is_err());
        assert!(residual_acc(&Array2::zeros((2, 2)), &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn symmetric_residual_projection_direction_is_immaterial() {
        let raw = random_inputs(1, 30, 7).remove(0);
        let zero = Array2::zeros((30, 30));
        let vertical = residual_acc(&raw, &zero).unwrap();
        let horizontal = residual_acc(&raw.t().to_owned(), &zero).unwrap();
        assert_relative_eq!(vertical, horizontal, epsilon = 1e-12);
    }

    #[test]
    fn iid_residual_acc_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 10_000;
        let mut large = 0;
        for _ in 0..draws {
            let p: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
            if lag1_autocorrelation(&p).abs() >= 0.3 {
                large += 1;
            }
        }
        assert!((large as f64) < 0.01 * draws as f64, "{large} draws had |ACC| >= 0.3");
    }

    #[test]
    fn two_point_mixture_matches_hand_value() {
        let kde = AccKde::with_bandwidth(vec![-1.0, 1.0], 0.5).unwrap();
        // each kernel contributes phi(2) / 0.5, averaged over the two samples
        let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(kde.density(0.0), phi2 / 0.5, max_relative = 1e-14);
        assert_relative_eq!(acc_density(&kde, 0.0), 0.10798193302637613, max_relative = 1e-12);
    }

    #[test]
    fn clustered_samples_integrate_to_one() {
        let kde = fit_kde(&[0.0, 0.0, 0.0, 1e-3]).unwrap();
        assert!((integral(&kde) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn density_peaks_near_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..300).map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            0.1 * v
        }).collect();
        let kde = fit_kde(&s).unwrap();
        let mean = s.iter().sum::<f64>() / 300.0;
        let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 299.0).sqrt();
        assert!(kde.density(mean) >= kde.density(mean + 4.0 * sd));
        assert!(kde.density_quantile(0.01) <= kde.density_quantile(0.5));
    }

    #[test]
    fn degenerate_samples_are_rejected() {
        assert!(fit_kde(&[0.3]).is_err());
        assert!(fit_kde(&[0.3, 0.3, 0.3]).is_err());
        assert!(fit_kde(&[0.3, f64::NAN]).is_err());
    }

    #[test]
    fn flags_follow_thresholds() {
        let kde = fit_kde(&[-0.1, 0.0, 0.05, 0.1]).unwrap();
        let t = AnomalyThresholds::default();
        let calm = UncertaintyReport::from_scores(1.0, 0.0, &kde, &t);
        assert!(!calm.anomalous());
        let far = UncertaintyReport::from_scores(3.5, 0.0, &kde, &t);
        assert!(far.latent_flag && !far.acc_flag && far.anomalous());
        let trend = UncertaintyReport::from_scores(1.0, 0.95, &kde, &t);
        assert!(!trend.latent_flag && trend.acc_flag);
        assert!(UncertaintyReport::from_scores(f64::NAN, 0.0, &kde, &t).latent_flag);
    }

    #[test]
    fn identical_ensemble_has_zero_variance() {
        let w = small_weights(10);
        let x = random_inputs(1, 12, 11).remove(0);
        let v = variance_model_space(&x, &[w.clone(), w.clone()]).unwrap();
        assert!(v.iter().all(|&e| e == 0.0));
        assert!(variance_model_space(&x, &[w]).is_err());
        let v2 = variance_model_space(&x, &[small_weights(10), small_weights(12)]).unwrap();
        assert!(v2.iter().all(|&e| e >= 0.0) && v2.iter().any(|&e| e > 0.0));
    }

    #[test]
    fn identical_offset_inputs_have_zero_input_space_variance() {
        let w = small_weights(15);
        // constant on 3x3 blocks, so the three diagonal offsets see the same input
        let coarse = random_inputs(1, 13, 13).remove(0);
        let m = Array2::from_shape_fn((39, 39), |(i, j)| coarse[[i / 3, j / 3]]);
        let c2 = TwoTimeCorrelation::new(m, 1.0, "t").unwrap();
        let v = variance_input_space(&c2, &w).unwrap();
        assert_eq!(v.dim(), (12, 12));
        assert!(v.iter().all(|&e| e == 0.0));

        let c2 = TwoTimeCorrelation::new(random_inputs(1, 40, 16).remove(0), 1.0, "t").unwrap();
        let v = variance_input_space(&c2, &w).unwrap();
        assert!(v.iter().all(|&e| e >= 0.0) && v.iter().any(|&e| e > 0.0));
        assert_eq!(v, variance_input_space(&c2, &w).unwrap());

        let short = TwoTimeCorrelation::new(random_inputs(1, 35, 14).remove(0), 1.0, "t").unwrap();
        assert!(matches!(variance_input_space(&short, &w), Err(Error::InputTooSmall { .. })));
    }

    proptest! {
        #[test]
        fn acc_is_bounded(values in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let raw = Array2::from_shape_vec((3, 4), values).unwrap();
            let acc = residual_acc(&raw, &Array2::zeros((3, 4))).unwrap();
            prop_assert!((-1.0..=1.0).contains(&acc));
        }

        #[test]
        fn density_is_nonnegative(
            samples in proptest::collection::vec(-1.0f64..1.0, 2..20),
            v in -3.0f64..3.0,
        ) {
            if let Ok(kde) = fit_kde(&samples) {
                prop_assert!(kde.density(v) >= 0.0);
            }
        }
    }
}
