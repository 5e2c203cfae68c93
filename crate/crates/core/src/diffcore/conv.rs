//! Convolution kernels over `Tensor4`, built on im2col/col2im and a dense GEMM.
//!
//! Samples in a batch are processed in parallel; per-sample weight gradients
//! are reduced in batch order so results do not depend on thread scheduling.

use super::tensor::{ConvSpec, Shape4, Tensor4};
use crate::error::{Error, Result};
use rayon::prelude::*;

/// Patch geometry shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
struct Patches {
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
    /// Output columns `lo..hi` whose kernel column `kj` lands inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride).min(self.ow);
        let hi = if self.w + self.pad > kj {
            ((self.w - 1 + self.pad - kj) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Patch columns for output rows `oy0..oy1`; `cols` is `rows × (oy1-oy0)·ow`.
fn im2col(img: &[f64], g: Patches, oy0: usize, oy1: usize, cols: &mut [f64]) {
    let p = (oy1 - oy0) * g.ow;
    for ci in 0..g.channels {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kj);
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of patch columns for output rows `oy0..oy1` back into an
/// image; adjoint of `im2col`.
fn col2im(cols: &[f64], g: Patches, oy0: usize, oy1: usize, img: &mut [f64]) {
    let p = (oy1 - oy0) * g.ow;
    for ci in 0..g.channels {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[(oy - oy0) * g.ow..(oy - oy0 + 1) * g.ow];
                    let (lo, hi) = g.valid_cols(kj);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kj - g.pad;
                    for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(&srow[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Doubles of patch buffer per band; keeps the band resident in cache.
const BAND_BUDGET: usize = 1 << 14;

/// Output-row bands `[oy0, oy1)` sized to `BAND_BUDGET`.
fn bands(g: Patches) -> impl Iterator<Item = (usize, usize)> {
    let per = (BAND_BUDGET / (g.rows() * g.ow).max(1)).max(1);
    (0..g.oh).step_by(per).map(move |a| (a, (a + per).min(g.oh)))
}

/// A row-major matrix view: `data[r * rs + c * cs]`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

fn view(data: &[f64], rs: usize, cs: usize) -> View<'_> {
    View {
        data,
        rs: rs as isize,
        cs: cs as isize,
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// `c = a·b + beta·c` for an `m×k` view `a`, a `k×n` view `b`, and `c`
/// with row stride `rsc`. Thin `m` is solved as `cᵀ = bᵀ·aᵀ`, which suits
/// the microkernel's tall tile.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: View, b: View, c: &mut [f64], rsc: usize, beta: f64) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(max_offset(m, k, a.rs, a.cs) < a.data.len());
    assert!(max_offset(k, n, b.rs, b.cs) < b.data.len());
    assert!((m - 1) * rsc + n <= c.len());
    let (rsc, csc) = (rsc as isize, 1isize);
    // SAFETY: the assertions above bound every element the strides can reach.
    unsafe {
        if m < n && m < 8 {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                b.data.as_ptr(),
                b.cs,
                b.rs,
                a.data.as_ptr(),
                a.cs,
                a.rs,
                beta,
                c.as_mut_ptr(),
                csc,
                rsc,
            );
        } else {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor4>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::shape(op, format!("bias of {channels}"), b.shape()));
        }
    }
    Ok(())
}

fn conv_geometry(x: Shape4, w: Shape4, spec: &ConvSpec) -> Result<Patches> {
    spec.validate()?;
    if x.c() != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input with {} channels", spec.in_channels),
            x,
        ));
    }
    if w != spec.conv_weight_shape() {
        return Err(Error::shape("conv2d weight", spec.conv_weight_shape(), w));
    }
    let (oh, ow) = match (spec.conv_out(x.h()), spec.conv_out(x.w())) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("padded input of at least kernel {}", spec.kernel),
                x,
            ))
        }
    };
    Ok(Patches {
        channels: x.c(),
        h: x.h(),
        w: x.w(),
        k: spec.kernel,
        stride: spec.stride,
        pad: spec.padding,
        oh,
        ow,
    })
}

fn transpose_geometry(x: Shape4, w: Shape4, spec: &ConvSpec) -> Result<Patches> {
    spec.validate()?;
    if x.c() != spec.in_channels {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input with {} channels", spec.in_channels),
            x,
        ));
    }
    if w != spec.transpose_weight_shape() {
        return Err(Error::shape("conv_transpose2d weight", spec.transpose_weight_shape(), w));
    }
    let (oh, ow) = match (spec.transpose_out(x.h()), spec.transpose_out(x.w())) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(Error::shape("conv_transpose2d", "positive output extent", x)),
    };
    // Patches describe the adjoint forward convolution: image = output, grid = input.
    Ok(Patches {
        channels: spec.out_channels,
        h: oh,
        w: ow,
        k: spec.kernel,
        stride: spec.stride,
        pad: spec.padding,
        oh: x.h(),
        ow: x.w(),
    })
}

pub fn conv2d_output_shape(x: Shape4, spec: &ConvSpec) -> Result<Shape4> {
    let g = conv_geometry(x, spec.conv_weight_shape(), spec)?;
    Ok(Shape4::new(x.n(), spec.out_channels, g.oh, g.ow))
}

pub fn conv_transpose2d_output_shape(x: Shape4, spec: &ConvSpec) -> Result<Shape4> {
    let g = transpose_geometry(x, spec.transpose_weight_shape(), spec)?;
    Ok(Shape4::new(x.n(), spec.out_channels, g.h, g.w))
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor4>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(dout: &Tensor4) -> Vec<f64> {
    let s = dout.shape();
    let mut db = vec![0.0; s.c()];
    for n in 0..s.n() {
        for (c, chunk) in dout.sample(n).chunks(s.plane()).enumerate() {
            db[c] += chunk.iter().sum::<f64>();
        }
    }
    db
}

fn reduce_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc
}

/// Cross-correlation with zero padding. Weights are `[out, in, k, k]`.
pub fn conv2d(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, spec: &ConvSpec) -> Result<Tensor4> {
    let g = conv_geometry(x.shape(), w.shape(), spec)?;
    check_bias("conv2d bias", b, spec.out_channels)?;
    let out_shape = Shape4::new(x.shape().n(), spec.out_channels, g.oh, g.ow);
    let mut out = vec![0.0; out_shape.len()];
    out.par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each(|(n, o)| {
            let mut cols = Vec::new();
            for (y0, y1) in bands(g) {
                let p = (y1 - y0) * g.ow;
                cols.resize(g.rows() * p, 0.0);
                im2col(x.sample(n), g, y0, y1, &mut cols);
                let wv = view(w.data(), g.rows(), 1);
                gemm(spec.out_channels, g.rows(), p, wv, view(&cols, p, 1), &mut o[y0 * g.ow..], g.cols(), 0.0);
            }
            add_bias(o, b, g.cols());
        });
    Tensor4::from_vec(out_shape, out)
}

/// Gradients of `conv2d` given the upstream gradient `dout`.
/// Returns `(dx, dw, db)`; each is computed only when requested.
pub fn conv2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    spec: &ConvSpec,
    dout: &Tensor4,
    want: [bool; 3],
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let g = conv_geometry(x.shape(), w.shape(), spec)?;
    let [want_x, want_w, want_b] = want;
    let xs = x.shape();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..xs.n())
        .into_par_iter()
        .map(|n| {
            let d = dout.sample(n);
            let mut dx = if want_x { vec![0.0; xs.sample_len()] } else { Vec::new() };
            let mut dw = if want_w { vec![0.0; w.len()] } else { Vec::new() };
            let mut cols = Vec::new();
            let (cout, rows, full) = (spec.out_channels, g.rows(), g.cols());
            for (y0, y1) in bands(g) {
                let p = (y1 - y0) * g.ow;
                let dband = view(&d[y0 * g.ow..], full, 1);
                cols.resize(rows * p, 0.0);
                if want_w {
                    im2col(x.sample(n), g, y0, y1, &mut cols);
                    gemm(cout, p, rows, dband, view(&cols, 1, p), &mut dw, rows, 1.0);
                }
                if want_x {
                    gemm(rows, cout, p, view(w.data(), 1, rows), dband, &mut cols, p, 0.0);
                    col2im(&cols, g, y0, y1, &mut dx);
                }
            }
            (dx, dw)
        })
        .collect();
    let (dxs, dws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let dx = want_x.then(|| dxs.concat());
    let dw = want_w.then(|| reduce_in_order(dws, w.len()));
    let db = want_b.then(|| bias_grad(dout));
    Ok((dx, dw, db))
}

/// Transposed convolution, the adjoint of `conv2d` for the same weights
/// (laid out `[in, out, k, k]` from this layer's point of view).
pub fn conv_transpose2d(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, spec: &ConvSpec) -> Result<Tensor4> {
    let g = transpose_geometry(x.shape(), w.shape(), spec)?;
    check_bias("conv_transpose2d bias", b, spec.out_channels)?;
    let out_shape = Shape4::new(x.shape().n(), spec.out_channels, g.h, g.w);
    let mut out = vec![0.0; out_shape.len()];
    out.par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each(|(n, o)| {
            let mut cols = Vec::new();
            let (cin, rows, full) = (spec.in_channels, g.rows(), g.cols());
            for (y0, y1) in bands(g) {
                let p = (y1 - y0) * g.ow;
                cols.resize(rows * p, 0.0);
                let xband = view(&x.sample(n)[y0 * g.ow..], full, 1);
                gemm(rows, cin, p, view(w.data(), 1, rows), xband, &mut cols, p, 0.0);
                col2im(&cols, g, y0, y1, o);
            }
            add_bias(o, b, g.h * g.w);
        });
    Tensor4::from_vec(out_shape, out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor4,
    w: &Tensor4,
    spec: &ConvSpec,
    dout: &Tensor4,
    want: [bool; 3],
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let g = transpose_geometry(x.shape(), w.shape(), spec)?;
    let [want_x, want_w, want_b] = want;
    let xs = x.shape();
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..xs.n())
        .into_par_iter()
        .map(|n| {
            let mut dx = if want_x { vec![0.0; xs.sample_len()] } else { Vec::new() };
            let mut dw = if want_w { vec![0.0; w.len()] } else { Vec::new() };
            let mut dcols = Vec::new();
            let (cin, rows, full) = (spec.in_channels, g.rows(), g.cols());
            for (y0, y1) in bands(g) {
                let p = (y1 - y0) * g.ow;
                dcols.resize(rows * p, 0.0);
                im2col(dout.sample(n), g, y0, y1, &mut dcols);
                if want_x {
                    gemm(cin, rows, p, view(w.data(), rows, 1), view(&dcols, p, 1), &mut dx[y0 * g.ow..], full, 0.0);
                }
                if want_w {
                    let xband = view(&x.sample(n)[y0 * g.ow..], full, 1);
                    gemm(cin, p, rows, xband, view(&dcols, 1, p), &mut dw, rows, 1.0);
                }
            }
            (dx, dw)
        })
        .collect();
    let (dxs, dws): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();
    let dx = want_x.then(|| dxs.concat());
    let dw = want_w.then(|| reduce_in_order(dws, w.len()));
    let db = want_b.then(|| bias_grad(dout));
    Ok((dx, dw, db))
}
