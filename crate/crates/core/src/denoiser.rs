//! Applies the fixed-size model to 2TCFs of arbitrary size.
//!
//! Two schemes are combined: *down-and-up mapping* (every N-th frame, all
//! N² starting offsets, scattered back) covers the whole matrix at reduced
//! temporal resolution; the *sliding band* (diagonal 100-frame blocks along
//! the age axis) keeps full resolution close to the diagonal.

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::autoenc::{reconstruct, ModelWeights};
use crate::corrsim::{symmetrize, TwoTimeCorrelation};
use crate::error::{Error, Result};
use crate::prep::{mirrored_block, repair_diagonal, repair_diagonal_in_place, standardize, subsample};

/// Step between window starts in the down-sampled matrix.
pub const DOWNUP_WINDOW_STEP: usize = 50;

/// Default step of the sliding band along the age axis.
pub const DEFAULT_SLIDING_STEP: usize = 25;

/// `inverse(decode(encode(standardize(x))))`, symmetrized.
pub fn apply_100(x: &Array2<f64>, w: &ModelWeights) -> Result<Array2<f64>> {
    let side = w.config.input_side;
    if x.dim() != (side, side) {
        return Err(Error::invalid(format!(
            "model input must be {side}x{side}, got {:?}",
            x.dim()
        )));
    }
    let (scaled, t) = standardize(x)?;
    let out = reconstruct(&scaled, w)?;
    symmetrize(&t.inverse(&out))
}

/// Window starts `0, step, 2·step, …` with the last window anchored to `len`.
pub(crate) fn window_starts(len: usize, side: usize, step: usize) -> Vec<usize> {
    assert!(len >= side && step >= 1);
    let mut starts: Vec<usize> = (0..=len - side).step_by(step).collect();
    if *starts.last().expect("at least one start") != len - side {
        starts.push(len - side);
    }
    starts
}

/// One model application of the down-and-up scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DownUpWindow {
    pub offset: (usize, usize),
    /// Start of the window in the down-sampled matrix (rows, columns).
    pub start: (usize, usize),
}

/// All windows used by [`apply_downup`] on a `n_frames` matrix.
pub fn downup_plan(n_frames: usize, side: usize) -> Result<(usize, Vec<DownUpWindow>)> {
    if n_frames < side {
        return Err(Error::InputTooSmall {
            needed: side,
            got: n_frames,
        });
    }
    let stride = n_frames / side;
    let mut plan = Vec::new();
    for a in 0..stride {
        for b in 0..stride {
            let rows = (n_frames - a).div_ceil(stride);
            let cols = (n_frames - b).div_ceil(stride);
            for &rs in &window_starts(rows, side, DOWNUP_WINDOW_STEP) {
                for &cs in &window_starts(cols, side, DOWNUP_WINDOW_STEP) {
                    // skip windows lying entirely above the diagonal
                    if rs + side > cs {
                        plan.push(DownUpWindow {
                            offset: (a, b),
                            start: (rs, cs),
                        });
                    }
                }
            }
        }
    }
    Ok((stride, plan))
}

/// Per-pixel sums and write counts, accumulated on the lower triangle.
struct Accumulator {
    sum: Array2<f64>,
    count: Array2<u32>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            sum: Array2::zeros((n, n)),
            count: Array2::zeros((n, n)),
        }
    }

    fn add(&mut self, r: usize, c: usize, v: f64) {
        let (i, j) = if r >= c { (r, c) } else { (c, r) };
        self.sum[[i, j]] += v;
        self.count[[i, j]] += 1;
    }

    /// Averages and mirrors; unwritten pixels become NaN.
    fn finish(self) -> (Array2<f64>, Array2<u32>) {
        let n = self.sum.nrows();
        let mut values = Array2::from_elem((n, n), f64::NAN);
        let mut count = self.count;
        for i in 0..n {
            for j in 0..=i {
                let k = count[[i, j]];
                if k > 0 {
                    let v = self.sum[[i, j]] / k as f64;
                    values[[i, j]] = v;
                    values[[j, i]] = v;
                }
                count[[j, i]] = k;
            }
        }
        (values, count)
    }
}

/// Down-and-up mapping over all offsets, with the per-pixel write counts.
pub fn apply_downup_with_coverage(
    c2: &TwoTimeCorrelation,
    w: &ModelWeights,
) -> Result<(TwoTimeCorrelation, Array2<u32>)> {
    let side = w.config.input_side;
    let t = c2.n_frames();
    let (stride, plan) = downup_plan(t, side)?;
    let outputs: Vec<Result<Array2<f64>>> = plan
        .par_iter()
        .map(|win| {
            let sub = subsample(c2, stride, win.offset);
            let input = mirrored_block(sub, win.start.0, win.start.1, side);
            apply_100(&input, w)
        })
        .collect();

    let mut acc = Accumulator::new(t);
    for (win, out) in plan.iter().zip(outputs) {
        let out = out?;
        let (a, b) = win.offset;
        let (rs, cs) = win.start;
        for p in 0..side {
            for q in 0..=p {
                let r = a + stride * (rs + p);
                let c = b + stride * (cs + q);
                acc.add(r, c, out[[p, q]]);
            }
        }
    }
    let (values, count) = acc.finish();
    if let Some(((i, j), _)) = count.indexed_iter().find(|(_, k)| **k == 0) {
        return Err(Error::invalid(format!("down-and-up mapping left pixel ({i}, {j}) unwritten")));
    }
    Ok((c2.with_values(values)?, count))
}

pub fn apply_downup(c2: &TwoTimeCorrelation, w: &ModelWeights) -> Result<TwoTimeCorrelation> {
    apply_downup_with_coverage(c2, w).map(|(m, _)| m)
}

/// Near-diagonal output of the sliding scheme.
#[derive(Debug, Clone)]
pub struct Band {
    /// Averaged predictions; NaN where no block covered the pixel.
    pub values: Array2<f64>,
    pub counts: Array2<u32>,
}

pub fn apply_sliding(c2: &TwoTimeCorrelation, w: &ModelWeights, step: usize) -> Result<Band> {
    let side = w.config.input_side;
    let t = c2.n_frames();
    if t < side {
        return Err(Error::InputTooSmall { needed: side, got: t });
    }
    if step == 0 || step > side {
        return Err(Error::invalid(format!("sliding step must be in 1..={side}, got {step}")));
    }
    let starts = window_starts(t, side, step);
    let outputs: Vec<Result<Array2<f64>>> = starts
        .par_iter()
        .map(|&s0| {
            let mut block = c2.values().slice(s![s0..s0 + side, s0..s0 + side]).to_owned();
            repair_diagonal_in_place(&mut block);
            apply_100(&block, w)
        })
        .collect();
    let mut acc = Accumulator::new(t);
    for (&s0, out) in starts.iter().zip(outputs) {
        let out = out?;
        for p in 0..side {
            for q in 0..=p {
                acc.add(s0 + p, s0 + q, out[[p, q]]);
            }
        }
    }
    let (values, counts) = acc.finish();
    Ok(Band { values, counts })
}

/// Denoises a 2TCF of any size `T >= 100`.
///
/// Below 200 frames this is the down-and-up result. Otherwise band values
/// are used for delays below the model side wherever the band exists, the
/// down-and-up values elsewhere, and the diagonal is re-extrapolated.
pub fn denoise(c2: &TwoTimeCorrelation, w: &ModelWeights, step: usize) -> Result<TwoTimeCorrelation> {
    let side = w.config.input_side;
    let t = c2.n_frames();
    if t < side {
        return Err(Error::InputTooSmall { needed: side, got: t });
    }
    if t < 2 * side {
        return apply_downup(c2, w);
    }
    let downup = apply_downup(c2, w)?;
    let band = apply_sliding(c2, w, step)?;
    let mut out = downup.into_values();
    for i in 0..t {
        for j in i.saturating_sub(side - 1)..=i {
            if band.counts[[i, j]] > 0 {
                let v = band.values[[i, j]];
                out[[i, j]] = v;
                out[[j, i]] = v;
            }
        }
    }
    let combined = c2.with_values(out)?;
    Ok(repair_diagonal(&combined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::ModelConfig;
    use crate::corrsim::{synth_two_time, ScenarioSpec, Trajectory};

    fn weights() -> ModelWeights {
        ModelWeights::init(&ModelConfig { seed: 3, ..ModelConfig::default() }).unwrap()
    }

    fn noisy(n: usize, seed: u64) -> TwoTimeCorrelation {
        let spec = ScenarioSpec {
            n_frames: n,
            gamma: Trajectory::Exponential { start: 0.05, end: 0.02 },
            beta: Trajectory::Constant(0.25),
            alpha: Trajectory::Constant(1.2),
            baseline: 1.0,
            noise_sigma: 0.1,
            stripe_sigma: 0.02,
            seed,
            frame_rate: 2.0,
        };
        synth_two_time(&spec).unwrap().1
    }

    #[test]
    fn starts() {
        assert_eq!(window_starts(100, 100, 50), vec![0]);
        assert_eq!(window_starts(117, 100, 50), vec![0, 17]);
        assert_eq!(window_starts(199, 100, 50), vec![0, 50, 99]);
        assert_eq!(window_starts(200, 100, 100), vec![0, 100]);
        assert_eq!(window_starts(150, 100, 25), vec![0, 25, 50]);
    }

    #[test]
    fn stride_three_plan_has_nine_offsets_and_two_diagonal_windows() {
        let (stride, plan) = downup_plan(350, 100).unwrap();
        assert_eq!(stride, 3);
        let mut offsets: Vec<_> = plan.iter().map(|w| w.offset).collect();
        offsets.dedup();
        assert_eq!(offsets.len(), 9);
        for a in 0..3 {
            let diag = plan
                .iter()
                .filter(|w| w.offset == (a, a) && w.start.0 == w.start.1)
                .count();
            assert_eq!(diag, 2);
        }
    }

    /// Pure index audit of the down-and-up plan, without a model.
    fn covered(n: usize) -> bool {
        let side = 100;
        let (stride, plan) = downup_plan(n, side).unwrap();
        let mut hit = Array2::<bool>::from_elem((n, n), false);
        for win in plan {
            for p in 0..side {
                for q in 0..=p {
                    let r = win.offset.0 + stride * (win.start.0 + p);
                    let c = win.offset.1 + stride * (win.start.1 + q);
                    assert!(r < n && c < n);
                    hit[[r.max(c), r.min(c)]] = true;
                }
            }
        }
        (0..n).all(|i| (0..=i).all(|j| hit[[i, j]]))
    }

    #[test]
    fn downup_plan_covers_every_pixel() {
        for n in (100..=420).chain([499, 500, 501, 650, 799]) {
            assert!(covered(n), "T = {n} leaves pixels uncovered");
        }
    }

    #[test]
    fn t100_downup_is_apply_100_of_repaired_input() {
        let w = weights();
        let c2 = noisy(100, 1);
        let via_downup = apply_downup(&c2, &w).unwrap();
        let direct = apply_100(repair_diagonal(&c2).values(), &w).unwrap();
        assert_eq!(via_downup.values(), &direct);
        let via_denoise = denoise(&c2, &w, DEFAULT_SLIDING_STEP).unwrap();
        assert_eq!(via_denoise.values(), &direct);
    }

    #[test]
    fn apply_100_output_is_symmetric_and_deterministic() {
        let w = weights();
        let x = repair_diagonal(&noisy(100, 2)).into_values();
        let a = apply_100(&x, &w).unwrap();
        assert_eq!(a, a.t());
        assert_eq!(a, apply_100(&x, &w).unwrap());
        assert!(matches!(
            apply_100(&Array2::from_elem((100, 100), 1.0), &w),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn denoise_preserves_shape_symmetry_and_metadata() {
        let w = weights();
        let c2 = noisy(230, 3);
        let out = denoise(&c2, &w, DEFAULT_SLIDING_STEP).unwrap();
        assert_eq!(out.n_frames(), 230);
        assert_eq!(out.frame_rate, c2.frame_rate);
        assert_eq!(out.roi_label, c2.roi_label);
        assert!(out.values().iter().all(|v| v.is_finite()));
        assert_eq!(out.values(), &out.values().t());
    }

    #[test]
    fn downup_counts_are_positive() {
        let w = weights();
        let (_, counts) = apply_downup_with_coverage(&noisy(350, 4), &w).unwrap();
        assert!(counts.iter().all(|k| *k >= 1));
    }

    #[test]
    fn sliding_tiling_and_overlap() {
        let w = weights();
        let band = apply_sliding(&noisy(200, 5), &w, 100).unwrap();
        assert_eq!(band.counts[[10, 5]], 1);
        assert_eq!(band.counts[[150, 120]], 1);
        // pixels spanning the two tiles are outside every block
        assert_eq!(band.counts[[120, 80]], 0);
        assert!(band.values[[120, 80]].is_nan());

        let band = apply_sliding(&noisy(150, 6), &w, 50).unwrap();
        assert_eq!(band.counts[[70, 60]], 2);
        assert_eq!(band.counts[[20, 10]], 1);
        assert_eq!(band.counts[[120, 110]], 1);
    }

    #[test]
    fn too_small_inputs_are_rejected() {
        let w = weights();
        let c2 = noisy(99, 7);
        assert!(matches!(denoise(&c2, &w, 25), Err(Error::InputTooSmall { .. })));
        assert!(matches!(apply_downup(&c2, &w), Err(Error::InputTooSmall { .. })));
        assert!(matches!(apply_sliding(&c2, &w, 25), Err(Error::InputTooSmall { .. })));
        assert!(apply_sliding(&noisy(120, 7), &w, 0).is_err());
    }
}
