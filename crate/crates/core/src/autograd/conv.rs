//! 2-D convolution kernels (NCHW): im2col + GEMM for dense and grouped
//! convolutions, a direct loop for depthwise ones.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let [batch, cin, h, w] = <[usize; 4]>::try_from(x_shape)
            .map_err(|_| Error::Shape(format!("conv input must be rank 4, got {x_shape:?}")))?;
        let [cout, cin_g, kh, kw] = <[usize; 4]>::try_from(w_shape)
            .map_err(|_| Error::Shape(format!("conv weight must be rank 4, got {w_shape:?}")))?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Shape(format!(
                "groups={groups} must divide cin={cin} and cout={cout}"
            )));
        }
        if cin / groups != cin_g {
            return Err(Error::Shape(format!(
                "weight expects {} input channels per group, input has {} ({} groups)",
                cin_g,
                cin / groups,
                groups
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        let (ph, pw) = pad;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_h: ph,
            pad_w: pw,
            groups,
            hout: (h + 2 * ph - kh) / stride + 1,
            wout: (w + 2 * pw - kw) / stride + 1,
        })
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.hout, self.wout]
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.batch
            * self.cout
            * self.hout
            * self.wout
            * (self.cin / self.groups)
            * self.kh
            * self.kw) as u64
    }
}

/// Output indices `ox` in `[lo, hi)` whose input column `ox*stride + k - pad` is in bounds.
#[inline]
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    len_in: usize,
    len_out: usize,
) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if len_in + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((len_in - 1 + pad - k) / stride + 1).min(len_out);
    (lo.min(hi), hi)
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cin_g: usize, cols: &mut [T]) {
    let n = g.hout * g.wout;
    let (lo_x, hi_x): (Vec<usize>, Vec<usize>) = (0..g.kw)
        .map(|kx| valid_range(kx, g.pad_w, g.stride, g.w, g.wout))
        .unzip();
    for ci in 0..cin_g {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = (lo_x[kx], hi_x[kx]);
                for oy in 0..g.hout {
                    let drow = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                    drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad_w;
                        drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[ox * g.stride + kx - g.pad_w];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, cols: &[T], cin_g: usize, dx: &mut [T]) {
    let n = g.hout * g.wout;
    for ci in 0..cin_g {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_range(kx, g.pad_w, g.stride, g.w, g.wout);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[oy * g.wout..(oy + 1) * g.wout];
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad_w;
                        for (d, &s) in drow[ix0..ix0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox * g.stride + kx - g.pad_w] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.cout * g.hout * g.wout];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let k = cin_g * g.kh * g.kw;
        let n = g.hout * g.wout;
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * n]
        };
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let xs = &x[(b * g.cin + grp * cin_g) * g.h * g.w..][..cin_g * g.h * g.w];
                let ws = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
                let os = &mut out[(b * g.cout + grp * cout_g) * n..][..cout_g * n];
                let rhs = if g.is_pointwise() {
                    xs
                } else {
                    im2col(g, xs, cin_g, &mut cols);
                    &cols
                };
                gemm(false, false, cout_g, n, k, T::one(), ws, rhs, T::zero(), os);
            }
        }
    }
    if let Some(bias) = bias {
        let n = g.hout * g.wout;
        for (i, plane) in out.chunks_mut(n).enumerate() {
            let bv = bias[i % g.cout];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Accumulates input, weight and bias gradients (each optional) for `dout`.
pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n = g.hout * g.wout;
    if let Some(db) = db {
        for (i, plane) in dout.chunks(n).enumerate() {
            db[i % g.cout] += plane.iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    if g.is_depthwise() {
        depthwise_backward(g, x, w, dout, dx, dw);
        return;
    }
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let k = cin_g * g.kh * g.kw;
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * n }];
    let mut dcols = vec![T::zero(); if pointwise || dx.is_none() { 0 } else { k * n }];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let x_off = (b * g.cin + grp * cin_g) * g.h * g.w;
            let xs = &x[x_off..x_off + cin_g * g.h * g.w];
            let ws = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let ds = &dout[(b * g.cout + grp * cout_g) * n..][..cout_g * n];
            if let Some(dw) = dw.as_deref_mut() {
                let rhs = if pointwise {
                    xs
                } else {
                    im2col(g, xs, cin_g, &mut cols);
                    &cols
                };
                let dws = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                gemm(false, true, cout_g, k, n, T::one(), ds, rhs, T::one(), dws);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxs = &mut dx[x_off..x_off + cin_g * g.h * g.w];
                if pointwise {
                    gemm(true, false, k, n, cout_g, T::one(), ws, ds, T::one(), dxs);
                } else {
                    gemm(
                        true,
                        false,
                        k,
                        n,
                        cout_g,
                        T::one(),
                        ws,
                        ds,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(g, &dcols, cin_g, dxs);
                }
            }
        }
    }
}

fn depthwise_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.hout * g.wout);
    let ranges: Vec<(usize, usize)> = (0..g.kw)
        .map(|kx| valid_range(kx, g.pad_w, g.stride, g.w, g.wout))
        .collect();
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xs = &x[(b * g.cin + c) * hw..][..hw];
            let os = &mut out[(b * g.cin + c) * ohw..][..ohw];
            let ws = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for oy in 0..g.hout {
                let orow = &mut os[oy * g.wout..(oy + 1) * g.wout];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &xs[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for kx in 0..g.kw {
                        let wv = ws[ky * g.kw + kx];
                        let (lo, hi) = ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        if g.stride == 1 {
                            let ix0 = lo + kx - g.pad_w;
                            for (o, &v) in orow[lo..hi].iter_mut().zip(&xrow[ix0..ix0 + hi - lo]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * g.stride + kx - g.pad_w];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (hw, ohw) = (g.h * g.w, g.hout * g.wout);
    let ranges: Vec<(usize, usize)> = (0..g.kw)
        .map(|kx| valid_range(kx, g.pad_w, g.stride, g.w, g.wout))
        .collect();
    let kk = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let off = (b * g.cin + c) * hw;
            let xs = &x[off..off + hw];
            let ds = &dout[(b * g.cin + c) * ohw..][..ohw];
            let ws = &w[c * kk..(c + 1) * kk];
            let mut dwc = vec![T::zero(); kk];
            for oy in 0..g.hout {
                let drow = &ds[oy * g.wout..(oy + 1) * g.wout];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..g.kw {
                        let (lo, hi) = ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        let wv = ws[ky * g.kw + kx];
                        if g.stride == 1 {
                            let ix0 = lo + kx - g.pad_w;
                            let xrow = &xs[iy * g.w + ix0..iy * g.w + ix0 + hi - lo];
                            let d = &drow[lo..hi];
                            if dw.is_some() {
                                dwc[ky * g.kw + kx] +=
                                    d.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxrow =
                                    &mut dx[off + iy * g.w + ix0..off + iy * g.w + ix0 + hi - lo];
                                for (o, &v) in dxrow.iter_mut().zip(d) {
                                    *o += wv * v;
                                }
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * g.stride + kx - g.pad_w;
                                if dw.is_some() {
                                    dwc[ky * g.kw + kx] += drow[ox] * xs[iy * g.w + ix];
                                }
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[off + iy * g.w + ix] += wv * drow[ox];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                for (d, v) in dw[c * kk..(c + 1) * kk].iter_mut().zip(dwc) {
                    *d += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Sliding-window reference used as the oracle for both kernel paths.
    fn naive(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let cin_g = g.cin / g.groups;
        let cout_g = g.cout / g.groups;
        let mut out = vec![0.0; g.batch * g.cout * g.hout * g.wout];
        for b in 0..g.batch {
            for co in 0..g.cout {
                let grp = co / cout_g;
                for oy in 0..g.hout {
                    for ox in 0..g.wout {
                        let mut s = 0.0;
                        for ci in 0..cin_g {
                            let cin = grp * cin_g + ci;
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    s += w[((co * cin_g + ci) * g.kh + ky) * g.kw + kx]
                                        * x[((b * g.cin + cin) * g.h + iy as usize) * g.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((b * g.cout + co) * g.hout + oy) * g.wout + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()
    }

    #[test]
    fn kernels_match_sliding_window() {
        let cases = [
            // (b, cin, h, w, cout, kh, kw, stride, ph, pw, groups)
            (2, 3, 7, 6, 4, 3, 3, 1, 1, 1, 1),
            (1, 4, 8, 8, 6, 3, 3, 2, 1, 1, 2),
            (2, 5, 5, 9, 5, 3, 3, 1, 1, 1, 5),
            (1, 3, 6, 11, 3, 1, 5, 1, 0, 2, 3),
            (1, 3, 11, 4, 3, 5, 1, 1, 2, 0, 3),
            (1, 2, 9, 9, 2, 3, 3, 2, 1, 1, 2),
            (2, 4, 3, 3, 8, 1, 1, 1, 0, 0, 1),
            (1, 2, 3, 4, 2, 1, 11, 1, 0, 5, 2),
        ];
        for (i, &(b, cin, h, w, cout, kh, kw, s, ph, pw, gr)) in cases.iter().enumerate() {
            let g =
                ConvGeom::new(&[b, cin, h, w], &[cout, cin / gr, kh, kw], s, (ph, pw), gr).unwrap();
            let x = pseudo(b * cin * h * w, 0.37);
            let wt = pseudo(cout * cin / gr * kh * kw, 0.91);
            let got = conv2d_forward(&g, &x, &wt, None);
            let want = naive(&g, &x, &wt);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "case {i}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), d> == <x, conv^T(d)> and linear in w.
        let cases = [
            (2, 4, 6, 5, 6, 3, 3, 2, 1, 1, 2),
            (1, 3, 6, 6, 3, 3, 3, 1, 1, 1, 3),
            (1, 3, 5, 9, 3, 1, 7, 1, 0, 3, 3),
            (2, 3, 4, 4, 5, 1, 1, 1, 0, 0, 1),
        ];
        for &(b, cin, h, w, cout, kh, kw, s, ph, pw, gr) in &cases {
            let g =
                ConvGeom::new(&[b, cin, h, w], &[cout, cin / gr, kh, kw], s, (ph, pw), gr).unwrap();
            let x = pseudo(b * cin * h * w, 0.13);
            let wt = pseudo(cout * cin / gr * kh * kw, 0.29);
            let d = pseudo(b * cout * g.hout * g.wout, 0.53);
            let y = conv2d_forward(&g, &x, &wt, None);
            let lhs: f64 = y.iter().zip(&d).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            let mut dw = vec![0.0; wt.len()];
            conv2d_backward(&g, &x, &wt, &d, Some(&mut dx), Some(&mut dw), None);
            let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
            let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
        }
    }

    #[test]
    fn geometry_errors() {
        assert!(ConvGeom::new(&[1, 3, 8, 8], &[4, 3, 3, 3], 1, (1, 1), 2).is_err());
        assert!(ConvGeom::new(&[1, 4, 8, 8], &[4, 3, 3, 3], 1, (1, 1), 1).is_err());
        assert!(ConvGeom::new(&[1, 3, 2, 2], &[4, 3, 5, 5], 1, (0, 0), 1).is_err());
    }
}
