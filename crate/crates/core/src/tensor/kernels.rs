//! Forward and backward kernels over raw buffers. Shapes are validated by
//! the graph layer before these are called.

use super::{Real, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Output extent along one axis, or `None` when it would be < 1.
    pub fn out_extent(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
        let span = dilation * (k - 1) + 1;
        let padded = len + 2 * padding;
        (padded >= span).then(|| (padded - span) / stride + 1)
    }

    fn taps(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// 1×1, stride 1, unpadded convolutions read the input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose tap `kx` lands inside the input row.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let off = kx * g.dilation;
    let lo = g.padding.saturating_sub(off).div_ceil(g.stride).min(g.w_out);
    let hi = (g.w + g.padding).saturating_sub(off).div_ceil(g.stride).clamp(lo, g.w_out);
    (lo, hi)
}

/// Unfold one sample (`c_in × h × w`) into a `(c_in·k·k) × (h_out·w_out)` matrix.
fn im2col<T: Real>(g: &ConvGeometry, input: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let ix0 = lo * g.stride + kx * g.dilation - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                    } else {
                        for (j, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = srow[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the column matrix back into the image.
fn col2im<T: Real>(g: &ConvGeometry, col: &[T], grad_input: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dst = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    if lo == hi {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    let ix0 = lo * g.stride + kx * g.dilation - g.padding;
                    for (j, &v) in line.iter().enumerate() {
                        drow[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Row range `lo..hi` of outputs whose tap `ky` lands inside the input.
fn valid_rows(g: &ConvGeometry, ky: usize) -> (usize, usize) {
    let off = ky * g.dilation;
    let lo = g.padding.saturating_sub(off).div_ceil(g.stride).min(g.h_out);
    let hi = (g.h + g.padding).saturating_sub(off).div_ceil(g.stride).clamp(lo, g.h_out);
    (lo, hi)
}

impl ConvGeometry {
    /// Single-channel stride-1 convolutions (the shared smoothing kernels)
    /// run as shifted multiply-adds; im2col would be `k²` times the image.
    fn is_single_plane(&self) -> bool {
        self.c_in == 1 && self.c_out == 1 && self.stride == 1 && self.k > 1
    }
}

/// Visit every tap with the overlapping output and input row segments.
fn for_each_tap_row(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    for ky in 0..g.k {
        let (ylo, yhi) = valid_rows(g, ky);
        for kx in 0..g.k {
            let (xlo, xhi) = valid_cols(g, kx);
            if xlo == xhi {
                continue;
            }
            let ix0 = xlo + kx * g.dilation - g.padding;
            for oy in ylo..yhi {
                let iy = oy + ky * g.dilation - g.padding;
                // (tap, output offset, input offset, length)
                f(ky * g.k + kx, oy * g.w_out + xlo, iy * g.w + ix0, xhi - xlo);
            }
        }
    }
}

fn single_plane_forward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], y: &mut [T]) {
    for_each_tap_row(g, |tap, o, i, len| {
        let wv = w[tap];
        for (out, &v) in y[o..o + len].iter_mut().zip(&x[i..i + len]) {
            *out += wv * v;
        }
    });
}

fn single_plane_backward<T: Real>(g: &ConvGeometry, x: &[T], w: &[T], dy: &[T], dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    if let Some(dw) = dw {
        for_each_tap_row(g, |tap, o, i, len| {
            dw[tap] += dy[o..o + len].iter().zip(&x[i..i + len]).map(|(&a, &b)| a * b).sum::<T>();
        });
    }
    if let Some(dx) = dx {
        for_each_tap_row(g, |tap, o, i, len| {
            let wv = w[tap];
            for (d, &v) in dx[i..i + len].iter_mut().zip(&dy[o..o + len]) {
                *d += wv * v;
            }
        });
    }
}

pub fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * g.out_plane();
    let plane = g.out_plane();
    let mut out = vec![T::zero(); batch * out_per];
    let direct = g.is_single_plane();
    let mut col = if g.is_pointwise() || direct { Vec::new() } else { vec![T::zero(); g.taps() * plane] };
    for n in 0..batch {
        let x = &input[n * in_per..(n + 1) * in_per];
        let y = &mut out[n * out_per..(n + 1) * out_per];
        if direct {
            single_plane_forward(g, x, weight, y);
            if let Some(b) = bias {
                y.iter_mut().for_each(|v| *v += b[0]);
            }
            continue;
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        T::gemm(g.c_out, g.taps(), plane, weight, false, cols, false, y, false);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut y[co * plane..(co + 1) * plane] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. Each requested output buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    mut grad_bias: Option<&mut [T]>,
) {
    let in_per = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_per = g.c_out * plane;
    let pointwise = g.is_pointwise();
    let direct = g.is_single_plane();
    let mut col = if pointwise || direct { Vec::new() } else { vec![T::zero(); g.taps() * plane] };
    let mut dcol = if pointwise || direct { Vec::new() } else { vec![T::zero(); g.taps() * plane] };
    for n in 0..batch {
        let x = &input[n * in_per..(n + 1) * in_per];
        let dy = &grad_out[n * out_per..(n + 1) * out_per];
        if let Some(db) = grad_bias.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dy[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        if direct {
            let dx = grad_input.as_deref_mut().map(|d| &mut d[n * in_per..(n + 1) * in_per]);
            single_plane_backward(g, x, weight, dy, dx, grad_weight.as_deref_mut());
            continue;
        }
        if let Some(dw) = grad_weight.as_deref_mut() {
            let cols: &[T] = if pointwise {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            // dWᵀ (taps × c_out) += cols · dYᵀ; packing runs along contiguous rows of cols.
            T::gemm_transposed_out(g.taps(), plane, g.c_out, cols, false, dy, true, dw, true);
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            let dx = &mut dx[n * in_per..(n + 1) * in_per];
            if pointwise {
                T::gemm(g.taps(), g.c_out, plane, weight, true, dy, false, dx, true);
            } else {
                T::gemm(g.taps(), g.c_out, plane, weight, true, dy, false, &mut dcol, false);
                col2im(g, &dcol, dx);
            }
        }
    }
}

pub fn avg_pool_forward<T: Real>(s: Shape, k: usize, stride: usize, h_out: usize, w_out: usize, input: &[T]) -> Vec<T> {
    let inv = T::one() / T::of((k * k) as f64);
    let mut out = Vec::with_capacity(s.n * s.c * h_out * w_out);
    for plane in input.chunks_exact(s.plane()) {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = T::zero();
                for ky in 0..k {
                    let row = (oy * stride + ky) * s.w + ox * stride;
                    for &v in &plane[row..row + k] {
                        acc += v;
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(
    s: Shape,
    k: usize,
    stride: usize,
    h_out: usize,
    w_out: usize,
    grad_out: &[T],
    grad_input: &mut [T],
) {
    let inv = T::one() / T::of((k * k) as f64);
    for (dplane, gplane) in grad_input.chunks_exact_mut(s.plane()).zip(grad_out.chunks_exact(h_out * w_out)) {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let g = gplane[oy * w_out + ox] * inv;
                for ky in 0..k {
                    let row = (oy * stride + ky) * s.w + ox * stride;
                    for d in &mut dplane[row..row + k] {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Source taps for align-corners-false bilinear resampling along one axis:
/// `(lo, hi, weight_of_hi)` per output coordinate.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Real>(s: Shape, out_h: usize, out_w: usize, input: &[T]) -> Vec<T> {
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Vec::with_capacity(s.n * s.c * out_h * out_w);
    for plane in input.chunks_exact(s.plane()) {
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = plane[y0 * s.w + x0] * (T::one() - fx) + plane[y0 * s.w + x1] * fx;
                let bottom = plane[y1 * s.w + x0] * (T::one() - fx) + plane[y1 * s.w + x1] * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(s: Shape, out_h: usize, out_w: usize, grad_out: &[T], grad_input: &mut [T]) {
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    for (dplane, gplane) in grad_input.chunks_exact_mut(s.plane()).zip(grad_out.chunks_exact(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = gplane[oy * out_w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dplane[y0 * s.w + x0] += gt * (T::one() - fx);
                dplane[y0 * s.w + x1] += gt * fx;
                dplane[y1 * s.w + x0] += gb * (T::one() - fx);
                dplane[y1 * s.w + x1] += gb * fx;
            }
        }
    }
}
