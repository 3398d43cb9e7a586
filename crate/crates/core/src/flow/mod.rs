//! End-to-end workflows: denoise, score, fit, narrow bounds and refit.

mod anomaly;
mod drift;
pub mod io;

pub use anomaly::{detect_anomalies, pca_2d, AnomalyConfig, AnomalyReport, SeriesCluster};
pub use drift::{drift_velocity, DriftFit};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoenc::ModelWeights;
use crate::corrsim::TwoTimeCorrelation;
use crate::denoiser::{denoise, DEFAULT_SLIDING_STEP};
use crate::error::{Error, Result, StageExt};
use crate::kww::{fit_2tcf, AgeFits, Bounds, KWWParams, TrustConfig, TrustRegion};
use crate::prep::{down_map_sized, stride_for};
use crate::uncert::{check_version, score_input, AccKde, AnomalyThresholds, LatentStats, UncertaintyReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Bin width of the first-pass fit of the denoised matrix.
    pub bin_width: usize,
    /// Bin width of the final fits, after bound narrowing.
    pub refit_bin_width: usize,
    pub trust: TrustConfig,
    pub thresholds: AnomalyThresholds,
    /// Relative margin added around the range of trusted values.
    pub margin: f64,
    pub bounds: Bounds,
    pub initial_guess: Option<KWWParams>,
    pub narrowing_passes: usize,
    pub sliding_step: usize,
    /// Bin width of the raw-only fallback fit; `max(10, T/10)` when unset.
    pub fallback_bin_width: Option<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bin_width: 1,
            refit_bin_width: 1,
            trust: TrustConfig::default(),
            thresholds: AnomalyThresholds::default(),
            margin: 0.2,
            bounds: Bounds::default(),
            initial_guess: None,
            narrowing_passes: 1,
            sliding_step: DEFAULT_SLIDING_STEP,
            fallback_bin_width: None,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bin_width == 0 || self.refit_bin_width == 0 || self.fallback_bin_width == Some(0) {
            return Err(Error::invalid("bin widths must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::invalid(format!("margin must be in [0, 1), got {}", self.margin)));
        }
        self.trust.validate()?;
        self.bounds.validate()
    }

    /// First 16 hex digits of the SHA-256 of the config JSON.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn fallback_width(&self, n_frames: usize) -> usize {
        self.fallback_bin_width.unwrap_or((n_frames / 10).max(10)).min(n_frames)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub weights_fingerprint: String,
    pub config_hash: String,
    pub model_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub mode: Mode,
    pub roi_label: String,
    pub n_frames: usize,
    pub frame_rate: f64,
    /// The model output could not be trusted; only the raw matrix was fitted.
    pub anomalous: bool,
    pub uncertainty: UncertaintyReport,
    pub fits_denoised: Option<AgeFits>,
    pub fits_raw: Option<AgeFits>,
    pub initial_bounds: Bounds,
    pub narrowed_bounds: Option<Bounds>,
    pub initial_guess: Option<KWWParams>,
    pub provenance: Provenance,
    /// Written next to the report as a matrix file.
    #[serde(skip)]
    pub denoised: Option<TwoTimeCorrelation>,
}

/// New bounds from the range of trusted values of each parameter.
///
/// Parameters with fewer than two trusted values keep their prior bounds.
/// A zero-width range is widened by ±5% of the value (at least 1e-6). The
/// result is clipped to `prior`; if that empties the box the prior is kept.
pub fn narrow_bounds(fits: &AgeFits, trust: &TrustRegion, margin: f64, prior: &Bounds) -> Bounds {
    let prior_arr = prior.to_array();
    let mut out = prior_arr;
    for (k, slot) in out.iter_mut().enumerate() {
        let values: Vec<f64> = fits
            .fits
            .iter()
            .zip(trust.mask(k))
            .filter(|(_, &t)| t)
            .map(|(f, _)| f.effective().params.to_array()[k])
            .filter(|v| v.is_finite())
            .collect();
        if values.len() < 2 {
            continue;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let (mut lo, mut hi) = if range > 0.0 {
            (min - margin * range, max + margin * range)
        } else {
            let pad = (0.05 * min.abs()).max(1e-6);
            (min - pad, max + pad)
        };
        lo = lo.max(prior_arr[k].0);
        hi = hi.min(prior_arr[k].1);
        if lo < hi {
            *slot = (lo, hi);
        }
    }
    Bounds::from_array(out)
}

/// Scores the stride-N, offset-(0,0) model input of the raw matrix.
fn score(
    raw: &TwoTimeCorrelation,
    w: &ModelWeights,
    stats: &LatentStats,
    kde: &AccKde,
    cfg: &AnalysisConfig,
) -> Result<UncertaintyReport> {
    let side = w.config.input_side;
    let x = down_map_sized(raw, stride_for(raw.n_frames(), side), (0, 0), side)?;
    score_input(&x, w, stats, kde, &cfg.thresholds)
}

fn analyze(
    raw: &TwoTimeCorrelation,
    w: &ModelWeights,
    stats: &LatentStats,
    kde: &AccKde,
    cfg: &AnalysisConfig,
    mode: Mode,
) -> Result<AnalysisReport> {
    cfg.validate().stage("config")?;
    check_version(stats, w).stage("model")?;
    let t = raw.n_frames();
    let side = w.config.input_side;
    if t < side {
        return Err(Error::InputTooSmall { needed: side, got: t }).stage("denoise");
    }
    let denoised = denoise(raw, w, cfg.sliding_step).stage("denoise")?;
    let uncertainty = score(raw, w, stats, kde, cfg).stage("uncertainty")?;
    let init = cfg.initial_guess.as_ref();
    let mut report = AnalysisReport {
        mode,
        roi_label: raw.roi_label.clone(),
        n_frames: t,
        frame_rate: raw.frame_rate,
        anomalous: uncertainty.anomalous(),
        uncertainty,
        fits_denoised: None,
        fits_raw: None,
        initial_bounds: cfg.bounds,
        narrowed_bounds: None,
        initial_guess: cfg.initial_guess,
        provenance: Provenance {
            weights_fingerprint: w.fingerprint(),
            config_hash: cfg.hash(),
            model_seed: w.config.seed,
        },
        denoised: None,
    };

    if report.anomalous {
        warn!(
            "input {} looks anomalous (latent score {:.3}, ACC {:.3}); fitting the raw matrix only",
            raw.roi_label, report.uncertainty.latent_score, report.uncertainty.residual_acc
        );
        let width = cfg.fallback_width(t);
        report.fits_raw = Some(fit_2tcf(raw, width, &cfg.bounds, &cfg.trust, init).stage("raw fit")?);
        return Ok(report);
    }

    let mut bounds = cfg.bounds;
    let mut fits = fit_2tcf(&denoised, cfg.bin_width, &bounds, &cfg.trust, init).stage("first fit")?;
    for pass in 0..cfg.narrowing_passes {
        bounds = narrow_bounds(&fits, &fits.trust, cfg.margin, &bounds);
        info!("narrowing pass {}: {:?}", pass + 1, bounds);
        fits = fit_2tcf(&denoised, cfg.refit_bin_width, &bounds, &cfg.trust, init).stage("refit")?;
    }
    if cfg.narrowing_passes == 0 && cfg.refit_bin_width != cfg.bin_width {
        fits = fit_2tcf(&denoised, cfg.refit_bin_width, &bounds, &cfg.trust, init).stage("refit")?;
    }
    if mode == Mode::Offline {
        report.fits_raw =
            Some(fit_2tcf(raw, cfg.refit_bin_width, &bounds, &cfg.trust, init).stage("raw fit")?);
    }
    report.fits_denoised = Some(fits);
    report.narrowed_bounds = (cfg.narrowing_passes > 0).then_some(bounds);
    report.denoised = Some(denoised);
    Ok(report)
}

/// Denoise, score, fit, narrow the bounds, then refit both the denoised and
/// the raw matrix. Anomalous inputs get a wide-bin fit of the raw matrix only.
pub fn analyze_offline(
    raw: &TwoTimeCorrelation,
    w: &ModelWeights,
    stats: &LatentStats,
    kde: &AccKde,
    cfg: &AnalysisConfig,
) -> Result<AnalysisReport> {
    analyze(raw, w, stats, kde, cfg, Mode::Offline)
}

/// As [`analyze_offline`] without the raw refit.
pub fn analyze_online(
    raw: &TwoTimeCorrelation,
    w: &ModelWeights,
    stats: &LatentStats,
    kde: &AccKde,
    cfg: &AnalysisConfig,
) -> Result<AnalysisReport> {
    analyze(raw, w, stats, kde, cfg, Mode::Online)
}
