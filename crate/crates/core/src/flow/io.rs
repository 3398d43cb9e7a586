//! File formats.
//!
//! Matrices and weights share one container: the 8-byte magic `XTCF0001`,
//! a little-endian `u32` header length, a UTF-8 JSON header, then the
//! little-endian `f64` payload in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AnalysisReport, AnomalyReport};
use crate::autoenc::{EpochRecord, ModelConfig, ModelWeights, Tensor, TENSOR_NAMES};
use crate::corrsim::{TruthPoint, TwoTimeCorrelation};
use crate::error::{Error, Result};
use crate::kww::{AgeFits, PARAM_NAMES};
use crate::uncert::{AccKde, LatentStats};

pub const MAGIC: &[u8; 8] = b"XTCF0001";
const PREFIX: usize = 12;

pub const REPORT_FILE: &str = "report.json";
pub const DENOISED_FILE: &str = "denoised.xtcf";

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        message: message.into(),
    }
}

fn encode_container(header: &impl Serialize, payload: impl Iterator<Item = f64>) -> Vec<u8> {
    let h = serde_json::to_vec(header).expect("headers serialize");
    let mut out = Vec::with_capacity(PREFIX + h.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Byte offset of a serde_json error inside `text`.
fn json_offset(text: &[u8], e: &serde_json::Error) -> usize {
    let (line, col) = (e.line(), e.column());
    if line == 0 {
        return 0;
    }
    let mut start = 0;
    for (i, _) in text.iter().enumerate().filter(|(_, b)| **b == b'\n').take(line - 1) {
        start = i + 1;
    }
    (start + col.saturating_sub(1)).min(text.len())
}

fn parse_json<T: DeserializeOwned>(text: &[u8], base: usize) -> Result<T> {
    serde_json::from_slice(text).map_err(|e| parse_err(base + json_offset(text, &e), e.to_string()))
}

/// Splits a container into its parsed header and payload values.
fn decode_container<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, Vec<f64>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(parse_err(0, "missing XTCF0001 magic"));
    }
    if bytes.len() < PREFIX {
        return Err(parse_err(MAGIC.len(), "truncated header length"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = PREFIX
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(PREFIX, format!("header length {hlen} exceeds the file")))?;
    let header = parse_json(&bytes[PREFIX..end], PREFIX)?;
    let payload = &bytes[end..];
    if payload.len() % 8 != 0 {
        return Err(parse_err(end, "payload is not a whole number of f64 values"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

fn check_layout(dtype: &str, order: &str, offset: usize) -> Result<()> {
    if dtype != "f64" {
        return Err(parse_err(offset, format!("unsupported dtype {dtype:?}")));
    }
    if order != "row-major" {
        return Err(parse_err(offset, format!("unsupported order {order:?}")));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
    frame_rate: f64,
    roi_label: String,
}

pub fn matrix_to_bytes(c2: &TwoTimeCorrelation) -> Vec<u8> {
    let n = c2.n_frames();
    let header = MatrixHeader {
        shape: vec![n, n],
        dtype: "f64".into(),
        order: "row-major".into(),
        frame_rate: c2.frame_rate,
        roi_label: c2.roi_label.clone(),
    };
    encode_container(&header, c2.values().iter().copied())
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<TwoTimeCorrelation> {
    let (h, values): (MatrixHeader, _) = decode_container(bytes)?;
    check_layout(&h.dtype, &h.order, PREFIX)?;
    let [rows, cols] = h.shape[..] else {
        return Err(parse_err(PREFIX, format!("expected a 2D shape, got {:?}", h.shape)));
    };
    if rows.checked_mul(cols) != Some(values.len()) {
        return Err(parse_err(
            bytes.len() - values.len() * 8,
            format!("payload has {} values, shape {rows}x{cols} needs {}", values.len(), rows * cols),
        ));
    }
    let m = Array2::from_shape_vec((rows, cols), values).expect("length checked");
    TwoTimeCorrelation::new(m, h.frame_rate, h.roi_label)
}

pub fn write_matrix(path: impl AsRef<Path>, c2: &TwoTimeCorrelation) -> Result<()> {
    fs::write(path, matrix_to_bytes(c2))?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<TwoTimeCorrelation> {
    matrix_from_bytes(&fs::read(path)?)
}

/// Trained weights with the statistics needed for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifacts {
    pub weights: ModelWeights,
    pub latent_stats: Option<LatentStats>,
    pub acc_kde: Option<AccKde>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    kind: String,
    shape: Vec<usize>,
    dtype: String,
    order: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    latent_stats: Option<LatentStats>,
    acc_kde: Option<AccKde>,
}

pub fn weights_to_bytes(a: &ModelArtifacts) -> Vec<u8> {
    let w = &a.weights;
    let header = WeightsHeader {
        kind: "weights".into(),
        shape: vec![w.n_params()],
        dtype: "f64".into(),
        order: "row-major".into(),
        config: w.config.clone(),
        tensors: w
            .named()
            .map(|(name, t)| TensorEntry {
                name: name.into(),
                shape: t.shape.clone(),
            })
            .collect(),
        latent_stats: a.latent_stats.clone(),
        acc_kde: a.acc_kde.clone(),
    };
    encode_container(&header, w.tensors().iter().flat_map(|t| t.data.iter().copied()))
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<ModelArtifacts> {
    let (h, values): (WeightsHeader, Vec<f64>) = decode_container(bytes)?;
    if h.kind != "weights" {
        return Err(parse_err(PREFIX, format!("expected a weights file, got kind {:?}", h.kind)));
    }
    check_layout(&h.dtype, &h.order, PREFIX)?;
    if h.tensors.len() != TENSOR_NAMES.len()
        || h.tensors.iter().zip(TENSOR_NAMES).any(|(t, n)| t.name != n)
    {
        return Err(parse_err(PREFIX, "tensor table does not match the model layout"));
    }
    let total: usize = h.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if total != values.len() || h.shape != [total] {
        return Err(parse_err(
            bytes.len() - values.len() * 8,
            format!("payload has {} values, tensor table needs {total}", values.len()),
        ));
    }
    let mut rest = values.as_slice();
    let mut tensors = Vec::with_capacity(h.tensors.len());
    for t in &h.tensors {
        let n: usize = t.shape.iter().product();
        let (head, tail) = rest.split_at(n);
        tensors.push(Tensor {
            shape: t.shape.clone(),
            data: head.to_vec(),
        });
        rest = tail;
    }
    let weights = ModelWeights::from_tensors(h.config, tensors)?;
    Ok(ModelArtifacts {
        weights,
        latent_stats: h.latent_stats,
        acc_kde: h.acc_kde,
    })
}

pub fn write_weights(path: impl AsRef<Path>, a: &ModelArtifacts) -> Result<()> {
    fs::write(path, weights_to_bytes(a))?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<ModelArtifacts> {
    weights_from_bytes(&fs::read(path)?)
}

pub fn report_to_json(report: &AnalysisReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize")
}

pub fn report_from_json(text: &str) -> Result<AnalysisReport> {
    parse_json(text.as_bytes(), 0)
}

/// Writes `report.json`, the denoised matrix and per-age parameter CSVs.
pub fn write_report(dir: impl AsRef<Path>, report: &AnalysisReport) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), report_to_json(report))?;
    if let Some(d) = &report.denoised {
        write_matrix(dir.join(DENOISED_FILE), d)?;
    }
    if let Some(f) = &report.fits_denoised {
        write_params_csv(dir.join("params_denoised.csv"), f)?;
    }
    if let Some(f) = &report.fits_raw {
        write_params_csv(dir.join("params_raw.csv"), f)?;
    }
    Ok(())
}

pub fn read_report(dir: impl AsRef<Path>) -> Result<AnalysisReport> {
    let dir = dir.as_ref();
    let mut report = report_from_json(&fs::read_to_string(dir.join(REPORT_FILE))?)?;
    let denoised = dir.join(DENOISED_FILE);
    if denoised.exists() {
        report.denoised = Some(read_matrix(denoised)?);
    }
    Ok(report)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

fn write_rows<P: AsRef<Path>>(path: P, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns: ages, each parameter with its error and trust flag, R², half-time.
pub fn write_params_csv(path: impl AsRef<Path>, fits: &AgeFits) -> Result<()> {
    let mut header = vec!["age_frames".to_string(), "age_seconds".to_string()];
    for p in PARAM_NAMES {
        header.extend([p.to_string(), format!("{p}_err"), format!("{p}_trusted")]);
    }
    header.extend(["r_squared".to_string(), "half_time".to_string(), "cut_length".to_string()]);
    let rows = (0..fits.len()).map(|i| {
        let f = fits.fits[i].effective();
        let p = f.params.to_array();
        let e = f.errors.to_array();
        let t = fits.trust.at(i);
        let mut r = vec![fits.ages[i].to_string(), fits.ages_seconds[i].to_string()];
        for k in 0..4 {
            r.extend([p[k].to_string(), e[k].to_string(), u8::from(t[k]).to_string()]);
        }
        r.extend([f.r_squared.to_string(), f.half_time.to_string(), fits.cut_lengths[i].to_string()]);
        r
    });
    write_rows(path, &header, rows)
}

pub fn write_truth_csv(path: impl AsRef<Path>, truth: &[TruthPoint]) -> Result<()> {
    let header: Vec<String> = ["age_frames", "gamma", "beta", "alpha", "baseline"].map(String::from).into();
    let rows = truth.iter().map(|t| {
        [t.age, t.gamma, t.beta, t.alpha, t.baseline]
            .iter()
            .map(|v| v.to_string())
            .collect()
    });
    write_rows(path, &header, rows)
}

pub fn write_history_csv(path: impl AsRef<Path>, epochs: &[EpochRecord]) -> Result<()> {
    let header: Vec<String> = ["epoch", "train_loss", "validation_loss", "learning_rate"].map(String::from).into();
    let rows = epochs.iter().map(|e| {
        vec![
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.validation_loss.to_string(),
            e.learning_rate.to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

/// Writes `anomaly.json`, `clusters.csv`, `distances.csv` and `projection.csv`.
pub fn write_anomaly_report(dir: impl AsRef<Path>, r: &AnomalyReport) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("anomaly.json"),
        serde_json::to_string_pretty(r).expect("anomaly reports serialize"),
    )?;
    let header: Vec<String> = ["series", "roi_label", "n_points", "spread", "normalized_distance", "flagged"]
        .map(String::from)
        .into();
    let rows = r.clusters.iter().map(|c| {
        vec![
            c.index.to_string(),
            c.roi_label.clone(),
            c.latents.len().to_string(),
            c.spread.to_string(),
            c.normalized_distance.to_string(),
            u8::from(c.flagged).to_string(),
        ]
    });
    write_rows(dir.join("clusters.csv"), &header, rows)?;

    let mut header = vec!["series".to_string()];
    header.extend(r.clusters.iter().map(|c| format!("to_{}", c.index)));
    let rows = r.clusters.iter().zip(&r.distances).map(|(c, d)| {
        let mut row = vec![c.index.to_string()];
        row.extend(d.iter().map(|v| v.to_string()));
        row
    });
    write_rows(dir.join("distances.csv"), &header, rows)?;

    let header: Vec<String> = ["series", "pc1", "pc2"].map(String::from).into();
    let rows = r
        .projection
        .iter()
        .map(|(i, x, y)| vec![r.clusters[*i].index.to_string(), x.to_string(), y.to_string()]);
    write_rows(dir.join("projection.csv"), &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrsim::{synth_two_time, ScenarioSpec, Trajectory};

    fn sample() -> TwoTimeCorrelation {
        let spec = ScenarioSpec {
            n_frames: 40,
            gamma: Trajectory::Constant(0.05),
            beta: Trajectory::Constant(0.2),
            alpha: Trajectory::Constant(1.0),
            baseline: 1.0,
            noise_sigma: 0.05,
            stripe_sigma: 0.0,
            seed: 5,
            frame_rate: 12.5,
        };
        synth_two_time(&spec).unwrap().1
    }

    #[test]
    fn matrix_round_trip_is_bitwise() {
        let c2 = sample();
        let bytes = matrix_to_bytes(&c2);
        assert_eq!(&bytes[..8], MAGIC);
        let back = matrix_from_bytes(&bytes).unwrap();
        assert_eq!(back.frame_rate, 12.5);
        assert_eq!(back.roi_label, c2.roi_label);
        for (a, b) in back.values().iter().zip(c2.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_the_documented_json() {
        let bytes = matrix_to_bytes(&sample());
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let v: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(v["shape"], serde_json::json!([40, 40]));
        assert_eq!(v["dtype"], "f64");
        assert_eq!(v["order"], "row-major");
        assert_eq!(v["frame_rate"], 12.5);
        assert_eq!(bytes.len(), 12 + hlen + 40 * 40 * 8);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let bytes = matrix_to_bytes(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(matrix_from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(matrix_from_bytes(&bytes[..10]), Err(Error::Parse { offset: 8, .. })));
        let truncated = &bytes[..bytes.len() - 4];
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
        match matrix_from_bytes(truncated) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12 + hlen),
            other => panic!("unexpected {other:?}"),
        }
        let mut broken = bytes.clone();
        // corrupt the first key of the header
        broken[13] = b'!';
        match matrix_from_bytes(&broken) {
            Err(Error::Parse { offset, .. }) => assert!((12..12 + hlen).contains(&offset)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_round_trip() {
        let cfg = ModelConfig { kernel_size: 3, input_side: 12, seed: 9, ..ModelConfig::default() };
        let w = ModelWeights::init(&cfg).unwrap();
        let a = ModelArtifacts {
            weights: w.clone(),
            latent_stats: Some(LatentStats {
                mean: vec![0.1; 8],
                std: vec![1.0; 8],
                median_distance: 2.5,
                weights_fingerprint: w.fingerprint(),
            }),
            acc_kde: Some(AccKde::with_bandwidth(vec![0.1, -0.2, 0.3], 0.05).unwrap()),
        };
        let back = weights_from_bytes(&weights_to_bytes(&a)).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.weights.fingerprint(), w.fingerprint());
        assert!(matrix_from_bytes(&weights_to_bytes(&a)).is_err());
        assert!(weights_from_bytes(&matrix_to_bytes(&sample())).is_err());
    }
}
