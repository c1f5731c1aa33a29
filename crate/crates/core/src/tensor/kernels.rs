//! Heavy kernels: im2col convolution and the bilinear grid sampler.

use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 || x[1] != k[1] {
            return Err(Error::shape("conv2d", x, k));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (o, kh, kw) = (k[0], k[2], k[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::shape("conv2d", x, k));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }
}

/// Unfolds one `[c, h, w]` sample into `[c*kh*kw, oh*ow]` columns.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[c, h, w]` sample.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = vec![T::zero(); patch * plane];
    let sample = g.c * g.h * g.w;
    for s in 0..g.n {
        im2col(&x[s * sample..(s + 1) * sample], g, &mut cols);
        let dst = &mut out[s * g.o * plane..(s + 1) * g.o * plane];
        T::gemm(g.o, patch, plane, k, false, &cols, false, dst, false);
    }
    out
}

/// Returns `(d input, d kernel)`, each only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, plane) = (g.patch(), g.out_plane());
    let sample = g.c * g.h * g.w;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); k.len()]);
    let mut cols = vec![T::zero(); patch * plane];
    for s in 0..g.n {
        let dys = &dy[s * g.o * plane..(s + 1) * g.o * plane];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[s * sample..(s + 1) * sample], g, &mut cols);
            T::gemm(g.o, plane, patch, dys, false, &cols, true, dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(patch, g.o, plane, k, true, dys, false, &mut cols, false);
            col2im(&cols, g, &mut dx[s * sample..(s + 1) * sample]);
        }
    }
    (dx, dk)
}

/// Target grid coordinate in `[-1, 1]` for index `i` of `n` points.
fn grid_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Source pixel coordinates for every output location of one sample.
fn source_pixels(params: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<(f64, f64, f64, f64)> {
    let (sx, sy, tx, ty) = (params[0], params[1], params[2], params[3]);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let yt = grid_coord(i, oh);
        let py = (sy * yt + ty + 1.0) * 0.5 * (h - 1) as f64;
        for j in 0..ow {
            let xt = grid_coord(j, ow);
            let px = (sx * xt + tx + 1.0) * 0.5 * (w - 1) as f64;
            out.push((px, py, xt, yt));
        }
    }
    out
}

/// Bilinear corner taps `(y, x, weight)`; taps outside the image are dropped (zero padding).
fn taps(px: f64, py: f64, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    let x0 = px.floor();
    let y0 = py.floor();
    let (fx, fy) = (px - x0, py - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ]
    .into_iter()
    .filter(move |&(y, x, _)| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
    .map(|(y, x, wt)| (y as usize, x as usize, wt))
}

pub(crate) fn grid_sample_forward<T: Real>(
    img: &[T],
    dims: [usize; 4],
    params: &[T],
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut out = vec![T::zero(); n * c * oh * ow];
    for s in 0..n {
        let p: Vec<f64> = params[s * 4..s * 4 + 4].iter().map(|v| v.to_f64().unwrap()).collect();
        let coords = source_pixels(&p, h, w, oh, ow);
        for (o, &(px, py, _, _)) in coords.iter().enumerate() {
            for (y, x, wt) in taps(px, py, h, w) {
                let wt = T::lit(wt);
                for ch in 0..c {
                    out[((s * c + ch) * oh * ow) + o] += wt * img[((s * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    out
}

/// Returns `(d image, d params)`, each only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn grid_sample_backward<T: Real>(
    img: &[T],
    dims: [usize; 4],
    params: &[T],
    oh: usize,
    ow: usize,
    dy: &[T],
    want_dimg: bool,
    want_dparams: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [n, c, h, w] = dims;
    let mut dimg = want_dimg.then(|| vec![T::zero(); img.len()]);
    let mut dparams = want_dparams.then(|| vec![T::zero(); params.len()]);
    let pix = |s: usize, ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            0.0
        } else {
            img[((s * c + ch) * h + y as usize) * w + x as usize].to_f64().unwrap()
        }
    };
    let half_w = 0.5 * (w - 1) as f64;
    let half_h = 0.5 * (h - 1) as f64;
    for s in 0..n {
        let p: Vec<f64> = params[s * 4..s * 4 + 4].iter().map(|v| v.to_f64().unwrap()).collect();
        let coords = source_pixels(&p, h, w, oh, ow);
        let mut acc = [0.0f64; 4];
        for (o, &(px, py, xt, yt)) in coords.iter().enumerate() {
            if let Some(dimg) = dimg.as_mut() {
                for (y, x, wt) in taps(px, py, h, w) {
                    let wt = T::lit(wt);
                    for ch in 0..c {
                        dimg[((s * c + ch) * h + y) * w + x] += wt * dy[(s * c + ch) * oh * ow + o];
                    }
                }
            }
            if want_dparams {
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let (mut dpx, mut dpy) = (0.0, 0.0);
                for ch in 0..c {
                    let g = dy[(s * c + ch) * oh * ow + o].to_f64().unwrap();
                    if g == 0.0 {
                        continue;
                    }
                    let (i00, i01) = (pix(s, ch, y0, x0), pix(s, ch, y0, x0 + 1));
                    let (i10, i11) = (pix(s, ch, y0 + 1, x0), pix(s, ch, y0 + 1, x0 + 1));
                    dpx += g * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10));
                    dpy += g * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01));
                }
                let (dxs, dys) = (dpx * half_w, dpy * half_h);
                acc[0] += dxs * xt;
                acc[1] += dys * yt;
                acc[2] += dxs;
                acc[3] += dys;
            }
        }
        if let Some(dp) = dparams.as_mut() {
            for (d, a) in dp[s * 4..s * 4 + 4].iter_mut().zip(acc) {
                *d = T::lit(a);
            }
        }
    }
    (dimg, dparams)
}

/// Smallest distance of any sampled source coordinate to an integer pixel
/// position, where bilinear interpolation has a kink.
pub(crate) fn grid_sample_kink_margin<T: Real>(
    dims: [usize; 4],
    params: &[T],
    oh: usize,
    ow: usize,
) -> f64 {
    let [n, _, h, w] = dims;
    let mut margin = f64::INFINITY;
    for s in 0..n {
        let p: Vec<f64> = params[s * 4..s * 4 + 4].iter().map(|v| v.to_f64().unwrap()).collect();
        for (px, py, _, _) in source_pixels(&p, h, w, oh, ow) {
            for v in [px, py] {
                let f = v - v.floor();
                margin = margin.min(f.min(1.0 - f));
            }
        }
    }
    margin
}
