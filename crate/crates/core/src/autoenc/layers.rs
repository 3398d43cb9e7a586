//! Strided 2-D convolution, transposed convolution and dense layers on flat
//! channel-major buffers (`[channel][y][x]`), with their backward passes.

use std::ops::Range;

/// Geometry shared by a convolution and its transpose: the "small" side is
/// the convolution output (or transposed-convolution input), the "big" side
/// the convolution input (or transposed-convolution output). A tap at kernel
/// offset `off` pairs small index `i` with big index `i·stride + off`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub small: usize,
    pub big: usize,
}

impl ConvGeom {
    fn taps(&self, k_index: usize) -> (isize, Range<usize>) {
        let off = k_index as isize - self.pad as isize;
        (off, tap_range(self.small, self.big, self.stride, off))
    }
}

/// Small indices `i < n_small` with `0 <= i·s + off < n_big`.
fn tap_range(n_small: usize, n_big: usize, s: usize, off: isize) -> Range<usize> {
    let s_i = s as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s_i - 1) / s_i };
    let top = n_big as isize - 1 - off;
    if top < 0 {
        return 0..0;
    }
    let hi = (top / s_i + 1).min(n_small as isize);
    lo as usize..(hi.max(lo)) as usize
}

#[inline]
fn big_index(i: usize, s: usize, off: isize) -> usize {
    (i as isize * s as isize + off) as usize
}

/// Convolution: input `[in_c][big][big]`, output `[out_c][small][small]`,
/// weight `[out_c][in_c][k][k]`.
pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ns, nb, k) = (g.small, g.big, g.kernel);
    let mut out = vec![0.0; g.out_c * ns * ns];
    for oc in 0..g.out_c {
        out[oc * ns * ns..(oc + 1) * ns * ns].fill(bias[oc]);
    }
    for oc in 0..g.out_c {
        let out_c = &mut out[oc * ns * ns..(oc + 1) * ns * ns];
        for ic in 0..g.in_c {
            let in_c = &input[ic * nb * nb..(ic + 1) * nb * nb];
            for ky in 0..k {
                let (off_y, ry) = g.taps(ky);
                for kx in 0..k {
                    let (off_x, rx) = g.taps(kx);
                    let w = weight[((oc * g.in_c + ic) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for oy in ry.clone() {
                        let iy = big_index(oy, g.stride, off_y);
                        let orow = &mut out_c[oy * ns..(oy + 1) * ns];
                        let irow = &in_c[iy * nb..(iy + 1) * nb];
                        if g.stride == 1 {
                            let ix0 = big_index(rx.start, 1, off_x);
                            let len = rx.end - rx.start;
                            for (o, i) in orow[rx.clone()].iter_mut().zip(&irow[ix0..ix0 + len]) {
                                *o += w * i;
                            }
                        } else {
                            for ox in rx.clone() {
                                orow[ox] += w * irow[big_index(ox, g.stride, off_x)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv_forward`]; accumulates into `d_weight`/`d_bias`
/// and returns the input gradient when `want_input` is set.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (ns, nb, k) = (g.small, g.big, g.kernel);
    let mut d_in = want_input.then(|| vec![0.0; g.in_c * nb * nb]);
    for oc in 0..g.out_c {
        let dout_c = &d_out[oc * ns * ns..(oc + 1) * ns * ns];
        d_bias[oc] += dout_c.iter().sum::<f64>();
        for ic in 0..g.in_c {
            let in_c = &input[ic * nb * nb..(ic + 1) * nb * nb];
            for ky in 0..k {
                let (off_y, ry) = g.taps(ky);
                for kx in 0..k {
                    let (off_x, rx) = g.taps(kx);
                    let widx = ((oc * g.in_c + ic) * k + ky) * k + kx;
                    let w = weight[widx];
                    let mut acc = 0.0;
                    for oy in ry.clone() {
                        let iy = big_index(oy, g.stride, off_y);
                        let drow = &dout_c[oy * ns..(oy + 1) * ns];
                        let irow = &in_c[iy * nb..(iy + 1) * nb];
                        for ox in rx.clone() {
                            acc += drow[ox] * irow[big_index(ox, g.stride, off_x)];
                        }
                        if let Some(d_in) = d_in.as_mut() {
                            let dirow = &mut d_in[ic * nb * nb + iy * nb..ic * nb * nb + (iy + 1) * nb];
                            for ox in rx.clone() {
                                dirow[big_index(ox, g.stride, off_x)] += w * drow[ox];
                            }
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
    d_in
}

/// Transposed convolution: input `[in_c][small][small]`, output
/// `[out_c][big][big]`, weight `[in_c][out_c][k][k]`.
pub(crate) fn deconv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (ns, nb, k) = (g.small, g.big, g.kernel);
    let mut out = vec![0.0; g.out_c * nb * nb];
    for oc in 0..g.out_c {
        out[oc * nb * nb..(oc + 1) * nb * nb].fill(bias[oc]);
    }
    for ic in 0..g.in_c {
        let in_c = &input[ic * ns * ns..(ic + 1) * ns * ns];
        for oc in 0..g.out_c {
            let out_c = &mut out[oc * nb * nb..(oc + 1) * nb * nb];
            for ky in 0..k {
                let (off_y, ry) = g.taps(ky);
                for kx in 0..k {
                    let (off_x, rx) = g.taps(kx);
                    let w = weight[((ic * g.out_c + oc) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for iy in ry.clone() {
                        let y = big_index(iy, g.stride, off_y);
                        let irow = &in_c[iy * ns..(iy + 1) * ns];
                        let orow = &mut out_c[y * nb..(y + 1) * nb];
                        if g.stride == 1 {
                            let x0 = big_index(rx.start, 1, off_x);
                            let len = rx.end - rx.start;
                            for (o, i) in orow[x0..x0 + len].iter_mut().zip(&irow[rx.clone()]) {
                                *o += w * i;
                            }
                        } else {
                            for ix in rx.clone() {
                                orow[big_index(ix, g.stride, off_x)] += w * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn deconv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let (ns, nb, k) = (g.small, g.big, g.kernel);
    let mut d_in = vec![0.0; g.in_c * ns * ns];
    for oc in 0..g.out_c {
        d_bias[oc] += d_out[oc * nb * nb..(oc + 1) * nb * nb].iter().sum::<f64>();
    }
    for ic in 0..g.in_c {
        let in_c = &input[ic * ns * ns..(ic + 1) * ns * ns];
        for oc in 0..g.out_c {
            let dout_c = &d_out[oc * nb * nb..(oc + 1) * nb * nb];
            for ky in 0..k {
                let (off_y, ry) = g.taps(ky);
                for kx in 0..k {
                    let (off_x, rx) = g.taps(kx);
                    let widx = ((ic * g.out_c + oc) * k + ky) * k + kx;
                    let w = weight[widx];
                    let mut acc = 0.0;
                    for iy in ry.clone() {
                        let y = big_index(iy, g.stride, off_y);
                        let irow = &in_c[iy * ns..(iy + 1) * ns];
                        let drow = &dout_c[y * nb..(y + 1) * nb];
                        let dirow = &mut d_in[ic * ns * ns + iy * ns..ic * ns * ns + (iy + 1) * ns];
                        for ix in rx.clone() {
                            let d = drow[big_index(ix, g.stride, off_x)];
                            acc += irow[ix] * d;
                            dirow[ix] += w * d;
                        }
                    }
                    d_weight[widx] += acc;
                }
            }
        }
    }
    d_in
}

/// `y = W·x + b` with `W` stored `[n_out][n_in]`.
pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

pub(crate) fn dense_backward(
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let n_in = input.len();
    let mut d_in = want_input.then(|| vec![0.0; n_in]);
    for (o, &d) in d_out.iter().enumerate() {
        d_bias[o] += d;
        let dw = &mut d_weight[o * n_in..(o + 1) * n_in];
        for (g, x) in dw.iter_mut().zip(input) {
            *g += d * x;
        }
        if let Some(d_in) = d_in.as_mut() {
            let row = &weight[o * n_in..(o + 1) * n_in];
            for (di, w) in d_in.iter_mut().zip(row) {
                *di += d * w;
            }
        }
    }
    d_in
}

#[inline]
pub(crate) fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

#[inline]
pub(crate) fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_ranges() {
        assert_eq!(tap_range(50, 100, 2, -1), 1..50);
        assert_eq!(tap_range(50, 100, 2, 1), 0..50);
        assert_eq!(tap_range(50, 100, 2, 0), 0..50);
        assert_eq!(tap_range(10, 10, 1, -3), 3..10);
        assert_eq!(tap_range(10, 10, 1, 3), 0..7);
        assert_eq!(tap_range(4, 3, 1, 5), 0..0);
    }

    /// Naive reference: transposed convolution is the adjoint of convolution,
    /// so ⟨conv(x), y⟩ = ⟨x, deconv(y)⟩ for zero biases and matching weights.
    #[test]
    fn deconv_is_adjoint_of_conv() {
        for (k, s, nb) in [(1, 1, 6), (3, 2, 8), (3, 1, 5), (7, 2, 12)] {
            let pad = (k - 1) / 2;
            let ns = (nb + 2 * pad - k) / s + 1;
            let g = ConvGeom { in_c: 2, out_c: 3, kernel: k, stride: s, pad, small: ns, big: nb };
            let x: Vec<f64> = (0..2 * nb * nb).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let y: Vec<f64> = (0..3 * ns * ns).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
            // conv weight [out=3][in=2]; the adjoint deconv maps 3 → 2 with weight [in=3][out=2]
            let cx = conv_forward(&g, &x, &w, &[0.0; 3]);
            let gt = ConvGeom { in_c: 3, out_c: 2, ..g };
            let dy = deconv_forward(&gt, &y, &w, &[0.0; 2]);
            let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dy).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "k={k} s={s}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (k, s, nb) = (3, 2, 7);
        let pad = 1;
        let ns = (nb + 2 * pad - k) / s + 1;
        let g = ConvGeom { in_c: 1, out_c: 1, kernel: k, stride: s, pad, small: ns, big: nb };
        let x: Vec<f64> = (0..nb * nb).map(|i| i as f64 * 0.1).collect();
        let w: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let out = conv_forward(&g, &x, &w, &[0.5]);
        for oy in 0..ns {
            for ox in 0..ns {
                let mut expect = 0.5;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < nb && (ix as usize) < nb {
                            expect += w[ky * k + kx] * x[iy as usize * nb + ix as usize];
                        }
                    }
                }
                assert!((out[oy * ns + ox] - expect).abs() < 1e-12);
            }
        }
    }
}
