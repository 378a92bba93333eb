//! Raw NCHW convolution loops shared by forward and backward passes.

/// Range of output positions `o` with `0 <= o*stride + offset < input_len`.
#[inline]
fn valid_range(offset: isize, stride: usize, input_len: usize, output_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_incl = (input_len as isize - 1 - offset).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, output_len as isize);
    (lo.min(hi) as usize, hi as usize)
}

pub(crate) fn out_len(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(n: usize, c_in: usize, c_out: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        Self { n, c_in, c_out, h, w, k, stride, ho: out_len(h, k, stride), wo: out_len(w, k, stride) }
    }
}

/// Visits every (output row, input row, output col range) for one kernel tap.
#[inline]
fn for_tap(d: &ConvDims, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let pad = (d.k / 2) as isize;
    let (oy0, oy1) = valid_range(ky as isize - pad, d.stride, d.h, d.ho);
    let (ox0, ox1) = valid_range(kx as isize - pad, d.stride, d.w, d.wo);
    if ox0 >= ox1 {
        return;
    }
    for oy in oy0..oy1 {
        let iy = (oy * d.stride) as isize + ky as isize - pad;
        let ix0 = (ox0 * d.stride) as isize + kx as isize - pad;
        f(oy, iy as usize, ox0, ox1, ix0 as usize);
    }
}

/// Full convolution, `w` laid out `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (hw, ohw, kk) = (d.h * d.w, d.ho * d.wo, d.k * d.k);
    for n in 0..d.n {
        for co in 0..d.c_out {
            let o = &mut out[(n * d.c_out + co) * ohw..][..ohw];
            for ci in 0..d.c_in {
                let xi = &x[(n * d.c_in + ci) * hw..][..hw];
                let wk = &w[(co * d.c_in + ci) * kk..][..kk];
                accumulate_taps(d, xi, wk, o);
            }
        }
    }
}

#[inline]
fn accumulate_taps(d: &ConvDims, xi: &[f64], wk: &[f64], o: &mut [f64]) {
    for ky in 0..d.k {
        for kx in 0..d.k {
            let wv = wk[ky * d.k + kx];
            if wv == 0.0 {
                continue;
            }
            for_tap(d, ky, kx, |oy, iy, ox0, ox1, ix0| {
                let orow = &mut o[oy * d.wo..][ox0..ox1];
                let xrow = &xi[iy * d.w..];
                if d.stride == 1 {
                    for (ov, xv) in orow.iter_mut().zip(&xrow[ix0..]) {
                        *ov += wv * xv;
                    }
                } else {
                    for (i, ov) in orow.iter_mut().enumerate() {
                        *ov += wv * xrow[ix0 + i * d.stride];
                    }
                }
            });
        }
    }
}

#[inline]
fn backprop_taps(d: &ConvDims, xi: &[f64], wk: &[f64], go: &[f64], gx: &mut [f64], gw: &mut [f64]) {
    for ky in 0..d.k {
        for kx in 0..d.k {
            let wv = wk[ky * d.k + kx];
            let mut acc = 0.0;
            for_tap(d, ky, kx, |oy, iy, ox0, ox1, ix0| {
                let grow = &go[oy * d.wo..][ox0..ox1];
                let xoff = iy * d.w + ix0;
                if d.stride == 1 {
                    let xrow = &xi[xoff..][..grow.len()];
                    let gxrow = &mut gx[xoff..][..grow.len()];
                    for ((g, xv), gxv) in grow.iter().zip(xrow).zip(gxrow.iter_mut()) {
                        acc += g * xv;
                        *gxv += wv * g;
                    }
                } else {
                    for (i, g) in grow.iter().enumerate() {
                        let p = xoff + i * d.stride;
                        acc += g * xi[p];
                        gx[p] += wv * g;
                    }
                }
            });
            gw[ky * d.k + kx] += acc;
        }
    }
}

pub(crate) fn conv2d_backward(d: &ConvDims, x: &[f64], w: &[f64], gout: &[f64], gx: &mut [f64], gw: &mut [f64]) {
    let (hw, ohw, kk) = (d.h * d.w, d.ho * d.wo, d.k * d.k);
    for n in 0..d.n {
        for co in 0..d.c_out {
            let go = &gout[(n * d.c_out + co) * ohw..][..ohw];
            for ci in 0..d.c_in {
                let xi = &x[(n * d.c_in + ci) * hw..][..hw];
                let gxi = &mut gx[(n * d.c_in + ci) * hw..][..hw];
                let wk = &w[(co * d.c_in + ci) * kk..][..kk];
                let gwk = &mut gw[(co * d.c_in + ci) * kk..][..kk];
                backprop_taps(d, xi, wk, go, gxi, gwk);
            }
        }
    }
}

/// Depthwise convolution, `w` laid out `[c, k, k]`; `c_in == c_out`.
pub(crate) fn dwconv_forward(d: &ConvDims, x: &[f64], w: &[f64], out: &mut [f64]) {
    let (hw, ohw, kk) = (d.h * d.w, d.ho * d.wo, d.k * d.k);
    for n in 0..d.n {
        for c in 0..d.c_in {
            let xi = &x[(n * d.c_in + c) * hw..][..hw];
            let o = &mut out[(n * d.c_in + c) * ohw..][..ohw];
            accumulate_taps(d, xi, &w[c * kk..][..kk], o);
        }
    }
}

pub(crate) fn dwconv_backward(d: &ConvDims, x: &[f64], w: &[f64], gout: &[f64], gx: &mut [f64], gw: &mut [f64]) {
    let (hw, ohw, kk) = (d.h * d.w, d.ho * d.wo, d.k * d.k);
    for n in 0..d.n {
        for c in 0..d.c_in {
            let xi = &x[(n * d.c_in + c) * hw..][..hw];
            let go = &gout[(n * d.c_in + c) * ohw..][..ohw];
            let gxi = &mut gx[(n * d.c_in + c) * hw..][..hw];
            backprop_taps(d, xi, &w[c * kk..][..kk], go, gxi, &mut gw[c * kk..][..kk]);
        }
    }
}

/// 1×1 convolution: `out[n] = w · x[n]` with `w` `[c_out, c_in]`.
pub(crate) fn pointwise_forward(n: usize, c_in: usize, c_out: usize, hw: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    for b in 0..n {
        let xb = &x[b * c_in * hw..][..c_in * hw];
        for co in 0..c_out {
            let o = &mut out[(b * c_out + co) * hw..][..hw];
            for ci in 0..c_in {
                let wv = w[co * c_in + ci];
                if wv == 0.0 {
                    continue;
                }
                for (ov, xv) in o.iter_mut().zip(&xb[ci * hw..][..hw]) {
                    *ov += wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pointwise_backward(
    n: usize,
    c_in: usize,
    c_out: usize,
    hw: usize,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
) {
    for b in 0..n {
        let xb = &x[b * c_in * hw..][..c_in * hw];
        let gxb = &mut gx[b * c_in * hw..][..c_in * hw];
        for co in 0..c_out {
            let go = &gout[(b * c_out + co) * hw..][..hw];
            for ci in 0..c_in {
                let wv = w[co * c_in + ci];
                let xrow = &xb[ci * hw..][..hw];
                let gxrow = &mut gxb[ci * hw..][..hw];
                let mut acc = 0.0;
                for ((g, xv), gxv) in go.iter().zip(xrow).zip(gxrow.iter_mut()) {
                    acc += g * xv;
                    *gxv += wv * g;
                }
                gw[co * c_in + ci] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for input in 1..9usize {
            for stride in 1..3usize {
                for offset in -3isize..4 {
                    let output = input.div_ceil(stride) + 1;
                    let (lo, hi) = valid_range(offset, stride, input, output);
                    let brute: Vec<usize> = (0..output)
                        .filter(|&o| {
                            let i = (o * stride) as isize + offset;
                            i >= 0 && i < input as isize
                        })
                        .collect();
                    assert_eq!((lo..hi).collect::<Vec<_>>(), brute, "in={input} s={stride} off={offset}");
                }
            }
        }
    }

    #[test]
    fn dwconv_mac_count_example() {
        // 14x14 output, 128 channels, 3x3 kernel
        assert_eq!(14 * 14 * 128 * 3 * 3, 225_792);
        let d = ConvDims::new(1, 1, 1, 5, 5, 3, 1);
        let x: Vec<f64> = (0..25).map(f64::from).collect();
        let w = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let mut out = vec![0.0; 25];
        dwconv_forward(&d, &x, &w, &mut out);
        assert_eq!(out, x);
    }
}
