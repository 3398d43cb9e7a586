//! Preprocessing of 2TCFs into model inputs.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corrsim::TwoTimeCorrelation;
use crate::error::{Error, Result};

/// Side length of a model input.
pub const INPUT_SIDE: usize = 100;

/// Strides used for corpus augmentation.
pub const AUGMENT_STRIDES: [usize; 5] = [1, 2, 3, 4, 5];

/// Zero-mean, unit-variance scaling recorded for the reverse transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleTransform {
    pub mean: f64,
    pub std: f64,
}

impl ScaleTransform {
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| (v - self.mean) / self.std)
    }

    pub fn inverse(&self, y: &Array2<f64>) -> Array2<f64> {
        y.mapv(|v| v * self.std + self.mean)
    }
}

/// Replaces every diagonal element by the mean of its two nearest
/// off-diagonal neighbours in the same column; the corner elements take
/// their single neighbour.
pub fn repair_diagonal_in_place(m: &mut Array2<f64>) {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    if n < 2 {
        return;
    }
    m[[0, 0]] = m[[1, 0]];
    for j in 1..n - 1 {
        m[[j, j]] = (m[[j - 1, j]] + m[[j + 1, j]]) / 2.0;
    }
    m[[n - 1, n - 1]] = m[[n - 2, n - 1]];
}

pub fn repair_diagonal(c2: &TwoTimeCorrelation) -> TwoTimeCorrelation {
    let mut values = c2.values().clone();
    repair_diagonal_in_place(&mut values);
    c2.with_values(values)
        .expect("diagonal repair keeps a symmetric matrix symmetric")
}

pub fn standardize(x: &Array2<f64>) -> Result<(Array2<f64>, ScaleTransform)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateInput("need at least two values".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot standardize non-finite values"));
    }
    let mean = x.sum() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::DegenerateInput("input has zero variance".into()));
    }
    let t = ScaleTransform { mean, std };
    Ok((t.forward(x), t))
}

/// Builds a symmetric `side × side` model input from the block of `src`
/// starting at `(row_start, col_start)`: the lower half of the block is kept,
/// mirrored across the diagonal, and the diagonal is re-extrapolated.
pub(crate) fn mirrored_block(
    src: ArrayView2<f64>,
    row_start: usize,
    col_start: usize,
    side: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((side, side));
    for p in 0..side {
        for q in 0..=p {
            let v = src[[row_start + p, col_start + q]];
            out[[p, q]] = v;
            out[[q, p]] = v;
        }
    }
    repair_diagonal_in_place(&mut out);
    out
}

/// Every `stride`-th frame starting at `offset`, as a (possibly rectangular) view.
pub(crate) fn subsample(c2: &TwoTimeCorrelation, stride: usize, offset: (usize, usize)) -> ArrayView2<'_, f64> {
    c2.values()
        .slice(s![offset.0..;stride as isize, offset.1..;stride as isize])
}

pub fn down_map(c2: &TwoTimeCorrelation, stride: usize, offset: (usize, usize)) -> Result<Array2<f64>> {
    down_map_sized(c2, stride, offset, INPUT_SIDE)
}

/// [`down_map`] for an arbitrary model side length.
pub fn down_map_sized(
    c2: &TwoTimeCorrelation,
    stride: usize,
    offset: (usize, usize),
    side: usize,
) -> Result<Array2<f64>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if offset.0 >= stride || offset.1 >= stride {
        return Err(Error::invalid(format!(
            "offset {offset:?} must be below the stride {stride}"
        )));
    }
    let t = c2.n_frames();
    if t < side * stride {
        return Err(Error::InputTooSmall {
            needed: side * stride,
            got: t,
        });
    }
    Ok(mirrored_block(subsample(c2, stride, offset), 0, 0, side))
}

/// Stride used to bring a `n_frames` matrix down to the model size.
pub fn stride_for(n_frames: usize, side: usize) -> usize {
    n_frames / side
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone)]
pub struct CorpusExample {
    pub values: Array2<f64>,
    pub split: Split,
    /// Index of the source 2TCF this crop came from.
    pub source: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingCorpus {
    pub examples: Vec<CorpusExample>,
}

impl TrainingCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

/// Crops every source into diagonal, non-overlapping `100×100` blocks at
/// strides 1 through 5, repairing each block's diagonal.
pub fn augment_corpus(sources: &[(TwoTimeCorrelation, Split)]) -> TrainingCorpus {
    augment_corpus_sized(sources, INPUT_SIDE)
}

pub fn augment_corpus_sized(sources: &[(TwoTimeCorrelation, Split)], side: usize) -> TrainingCorpus {
    let mut examples = Vec::new();
    for (source, (c2, split)) in sources.iter().enumerate() {
        let t = c2.n_frames();
        for &stride in &AUGMENT_STRIDES {
            if t < side * stride {
                continue;
            }
            let sub = subsample(c2, stride, (0, 0));
            let len = sub.nrows();
            for k in 0..len / side {
                let start = k * side;
                let mut crop = sub.slice(s![start..start + side, start..start + side]).to_owned();
                repair_diagonal_in_place(&mut crop);
                examples.push(CorpusExample {
                    values: crop,
                    split: *split,
                    source,
                    stride,
                });
            }
        }
    }
    TrainingCorpus { examples }
}

/// Clips values into `[1, 2]` and re-extrapolates the diagonal.
pub fn clip_values(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.mapv(|v| v.clamp(1.0, 2.0));
    repair_diagonal_in_place(&mut out);
    out
}

pub fn clip_for_anomaly(c2: &TwoTimeCorrelation) -> Array2<f64> {
    clip_values(c2.values())
}
