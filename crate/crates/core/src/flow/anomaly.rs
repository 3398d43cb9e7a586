use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autoenc::{encode, ModelWeights};
use crate::corrsim::TwoTimeCorrelation;
use crate::error::{Error, Result};
use crate::prep::{clip_values, down_map_sized, stride_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    /// Down-sampling stride; `floor(T/100)` per series when unset.
    pub stride: Option<usize>,
    /// Index of the reference series in the input list.
    pub reference: usize,
    /// Series farther from the reference than this multiple of its spread are flagged.
    pub flag_multiple: f64,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            stride: None,
            reference: 0,
            flag_multiple: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesCluster {
    pub index: usize,
    pub roi_label: String,
    pub latents: Vec<Vec<f64>>,
    pub centroid: Vec<f64>,
    /// Mean distance of the latent points to their centroid.
    pub spread: f64,
    /// Centroid distance to the reference cluster over the reference spread.
    pub normalized_distance: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub clusters: Vec<SeriesCluster>,
    /// Indices of series too short to give two model inputs.
    pub skipped: Vec<usize>,
    pub reference_spread: f64,
    /// Pairwise centroid distances over the reference spread, in cluster order.
    pub distances: Vec<Vec<f64>>,
    /// 2D projection of every latent point as (cluster position, x, y).
    pub projection: Vec<(usize, f64, f64)>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Latents of every offset of the stride-N inputs, clipped to `[1, 2]` and
/// not standardized.
fn series_latents(c2: &TwoTimeCorrelation, w: &ModelWeights, stride: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let side = w.config.input_side;
    let n = stride.unwrap_or_else(|| stride_for(c2.n_frames(), side));
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let x = clip_values(&down_map_sized(c2, n, (a, b), side)?);
            out.push(encode(&x, w)?.to_vec());
        }
    }
    Ok(out)
}

/// Compares latent clusters of several series against a reference series.
pub fn detect_anomalies(series: &[TwoTimeCorrelation], w: &ModelWeights, cfg: &AnomalyConfig) -> Result<AnomalyReport> {
    if cfg.reference >= series.len() {
        return Err(Error::invalid(format!(
            "reference index {} out of range for {} series",
            cfg.reference,
            series.len()
        )));
    }
    if !(cfg.flag_multiple > 0.0) {
        return Err(Error::invalid("flag multiple must be positive"));
    }
    let mut clusters = Vec::new();
    let mut skipped = Vec::new();
    for (index, c2) in series.iter().enumerate() {
        let latents = match series_latents(c2, w, cfg.stride) {
            Ok(l) if l.len() >= 2 => l,
            Ok(_) | Err(Error::InputTooSmall { .. }) => {
                warn!("series {index} ({}) is too short for two model inputs; skipped", c2.roi_label);
                skipped.push(index);
                continue;
            }
            Err(e) => return Err(e),
        };
        let dim = latents[0].len();
        let k = latents.len() as f64;
        let centroid: Vec<f64> = (0..dim).map(|d| latents.iter().map(|z| z[d]).sum::<f64>() / k).collect();
        let spread = latents.iter().map(|z| dist(z, &centroid)).sum::<f64>() / k;
        clusters.push(SeriesCluster {
            index,
            roi_label: c2.roi_label.clone(),
            latents,
            centroid,
            spread,
            normalized_distance: f64::NAN,
            flagged: false,
        });
    }
    let Some(ref_pos) = clusters.iter().position(|c| c.index == cfg.reference) else {
        return Err(Error::invalid("reference series is too short for two model inputs"));
    };
    let reference_spread = clusters[ref_pos].spread;
    if !(reference_spread > 0.0) {
        return Err(Error::DegenerateInput("reference series has zero latent spread".into()));
    }
    let reference_centroid = clusters[ref_pos].centroid.clone();
    for c in clusters.iter_mut() {
        c.normalized_distance = dist(&c.centroid, &reference_centroid) / reference_spread;
        c.flagged = c.normalized_distance > cfg.flag_multiple;
    }
    let distances = clusters
        .iter()
        .map(|a| {
            clusters
                .iter()
                .map(|b| dist(&a.centroid, &b.centroid) / reference_spread)
                .collect()
        })
        .collect();

    let points: Vec<Vec<f64>> = clusters.iter().flat_map(|c| c.latents.iter().cloned()).collect();
    let owners: Vec<usize> = clusters
        .iter()
        .enumerate()
        .flat_map(|(i, c)| std::iter::repeat_n(i, c.latents.len()))
        .collect();
    let projection = if points.len() >= 3 {
        pca_2d(&points)?
            .into_iter()
            .zip(owners)
            .map(|([x, y], i)| (i, x, y))
            .collect()
    } else {
        Vec::new()
    };
    Ok(AnomalyReport {
        clusters,
        skipped,
        reference_spread,
        distances,
        projection,
    })
}

/// Projects points onto the top two principal components of their covariance.
///
/// Each component is signed so that its largest-magnitude entry is positive.
/// Components with zero variance project to 0.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points must share a positive dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points must be finite"));
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / n).collect();
    let centered = DMatrix::from_fn(points.len(), dim, |i, d| points[i][d] - mean[d]);
    let cov = centered.transpose() * &centered / n;
    let scale = cov.diagonal().iter().copied().fold(0.0, f64::max);
    let mut axes: Vec<Vec<f64>> = Vec::new();
    if scale > 0.0 {
        let eig = SymmetricEigen::try_new(cov, 1e-10, 0)
            .ok_or_else(|| Error::invalid("covariance eigen-decomposition did not converge"))?;
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &k in order.iter().take(2) {
            if eig.eigenvalues[k] <= 1e-12 * scale {
                break;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            axes.push(v);
        }
    }
    Ok((0..points.len())
        .map(|i| {
            let mut out = [0.0; 2];
            for (slot, axis) in out.iter_mut().zip(&axes) {
                *slot = (0..dim).map(|d| centered[(i, d)] * axis[d]).sum();
            }
            out
        })
        .collect())
}
