//! Slice-level forward and backward kernels. All loops run in a fixed
//! order so results are bit-reproducible.

use std::collections::VecDeque;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side; preserves size at stride 1.
    Same,
    Valid,
}

/// Geometry of a 2D cross-correlation over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Option<Self> {
        if k == 0 || stride == 0 {
            return None;
        }
        let pad = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return None;
                }
                (k - 1) / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `lo..hi` whose input column for kernel offset `kx`
    /// lies inside the image. Empty when `lo >= hi`.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi)
    }

    /// True when the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` into a `[C*k*k, out_h*out_w]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let n_out = g.out_len();
    cols.clear();
    cols.resize(g.patch_len() * n_out, T::zero());
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let (lo, hi) = g.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        dst_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n_out = g.out_len();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let (lo, hi) = g.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        for (d, &s) in dst_row[start..start + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[c_out, out_h*out_w] = weight[c_out, C*k*k] . cols + bias`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let n_out = g.out_len();
    let kk = g.patch_len();
    let mut out = vec![T::zero(); c_out * n_out];
    let mut buf = Vec::new();
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        im2col(x, g, &mut buf);
        &buf
    };
    T::gemm(
        c_out, kk, n_out, T::one(), weight, kk as isize, 1, cols, n_out as isize, 1, T::zero(),
        &mut out, n_out as isize, 1,
    );
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n_out).enumerate() {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]; each requested buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    c_out: usize,
    g: &ConvGeom,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let n_out = g.out_len();
    let kk = g.patch_len();
    if let Some(db) = db {
        for (co, row) in dout.chunks(n_out).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let mut buf = Vec::new();
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut buf);
            &buf
        };
        // dw += dout[c_out, n_out] . cols^T
        T::gemm(
            c_out, n_out, kk, T::one(), dout, n_out as isize, 1, cols, 1, n_out as isize,
            T::one(), dw, kk as isize, 1,
        );
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            T::gemm(
                kk, c_out, n_out, T::one(), weight, 1, kk as isize, dout, n_out as isize, 1,
                T::one(), dx, n_out as isize, 1,
            );
        } else {
            let mut dcols = vec![T::zero(); kk * n_out];
            T::gemm(
                kk, c_out, n_out, T::one(), weight, 1, kk as isize, dout, n_out as isize, 1,
                T::zero(), &mut dcols, n_out as isize, 1,
            );
            col2im(&dcols, g, dx);
        }
    }
}

/// Window extent `[i - before, i + after]` used by the stride-1 max pool.
pub fn window_bounds(window: usize) -> (usize, usize) {
    let before = (window - 1) / 2;
    (before, window - 1 - before)
}

/// Sliding max along one strided line. Writes the maximum and the index
/// (within the line) of its first occurrence.
fn sliding_max_line<T: Scalar>(
    line: impl Fn(usize) -> T,
    len: usize,
    window: usize,
    mut emit: impl FnMut(usize, T, usize),
) {
    let (before, after) = window_bounds(window);
    let mut dq: VecDeque<usize> = VecDeque::with_capacity(window.min(len) + 1);
    let mut next = 0;
    for i in 0..len {
        let hi = (i + after).min(len - 1);
        while next <= hi {
            let v = line(next);
            // keep equal earlier entries in front: first occurrence wins
            while let Some(&b) = dq.back() {
                if line(b) < v {
                    dq.pop_back();
                } else {
                    break;
                }
            }
            dq.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(before);
        while let Some(&f) = dq.front() {
            if f < lo {
                dq.pop_front();
            } else {
                break;
            }
        }
        let f = *dq.front().expect("window never empty");
        emit(i, line(f), f);
    }
}

/// Stride-1 max pool of one `[H, W]` plane with borders clipped.
/// Returns values and, per output, the flat index of the row-major first
/// maximal input element inside its window.
pub fn maxpool_plane<T: Scalar>(x: &[T], h: usize, w: usize, window: usize) -> (Vec<T>, Vec<usize>) {
    // horizontal pass
    let mut row_max = vec![T::zero(); h * w];
    let mut row_arg = vec![0usize; h * w];
    for y in 0..h {
        let row = &x[y * w..(y + 1) * w];
        sliding_max_line(
            |i| row[i],
            w,
            window,
            |i, v, a| {
                row_max[y * w + i] = v;
                row_arg[y * w + i] = a;
            },
        );
    }
    // vertical pass; the first row attaining the max holds the first column too
    let mut out = vec![T::zero(); h * w];
    let mut arg = vec![0usize; h * w];
    for xcol in 0..w {
        sliding_max_line(
            |i| row_max[i * w + xcol],
            h,
            window,
            |i, v, a| {
                out[i * w + xcol] = v;
                arg[i * w + xcol] = a * w + row_arg[a * w + xcol];
            },
        );
    }
    (out, arg)
}

pub fn resize_nearest_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let row = &plane[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub fn resize_nearest_backward<T: Scalar>(dout: &[T], c: usize, h: usize, w: usize, f: usize, dx: &mut [T]) {
    let (oh, ow) = (h * f, w * f);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[ch * h * w + (oy / f) * w + ox / f] += dout[ch * oh * ow + oy * ow + ox];
            }
        }
    }
}

pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = src.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v - lse;
        }
    }
    out
}

/// Normalize each row to zero mean and unit (population) variance.
/// Returns the normalized rows and `1 / sqrt(var + eps)` per row.
pub fn layer_norm_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(cols).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / cols.max(1));
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * r;
        }
        inv.push(r);
    }
    (out, inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_pool(x: &[f64], h: usize, w: usize, win: usize) -> Vec<f64> {
        let (b, a) = window_bounds(win);
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut m = f64::NEG_INFINITY;
                for yy in y.saturating_sub(b)..=(y + a).min(h - 1) {
                    for xq in xx.saturating_sub(b)..=(xx + a).min(w - 1) {
                        m = m.max(x[yy * w + xq]);
                    }
                }
                out[y * w + xx] = m;
            }
        }
        out
    }

    #[test]
    fn pool_line_example() {
        let (v, _) = maxpool_plane(&[0.0f64, 5.0, 0.0, 0.0], 1, 4, 3);
        assert_eq!(v, vec![5.0, 5.0, 5.0, 0.0]);
        let (v, _) = maxpool_plane(&[0.0f64, 5.0, 0.0, 0.0], 1, 4, 1);
        assert_eq!(v, vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_argmax_prefers_row_major_first() {
        // all equal: every output picks the top-left element of its window
        let x = vec![1.0f64; 9];
        let (_, arg) = maxpool_plane(&x, 3, 3, 3);
        assert_eq!(arg, vec![0, 0, 1, 0, 0, 1, 3, 3, 4]);
    }

    #[test]
    fn pool_matches_brute_force_on_mixed_sizes() {
        let x: Vec<f64> = (0..35).map(|i| ((i * 37 % 11) as f64) - 3.0).collect();
        for win in 1..=9 {
            let (v, arg) = maxpool_plane(&x, 5, 7, win);
            assert_eq!(v, brute_pool(&x, 5, 7, win), "window {win}");
            for (o, &a) in arg.iter().enumerate() {
                assert_eq!(x[a], v[o]);
            }
        }
    }

    #[test]
    fn conv_delta_box() {
        let mut x = vec![0.0f64; 25];
        x[12] = 1.0;
        let g = ConvGeom::new(1, 5, 5, 3, 1, Padding::Same).unwrap();
        let out = conv2d_forward(&x, &[1.0; 9], None, 1, &g);
        for y in 0..5 {
            for xx in 0..5 {
                let inside = (1..=3).contains(&y) && (1..=3).contains(&xx);
                assert_eq!(out[y * 5 + xx], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn geometry_rules() {
        assert!(ConvGeom::new(1, 8, 8, 2, 1, Padding::Same).is_none());
        assert!(ConvGeom::new(1, 8, 8, 3, 0, Padding::Same).is_none());
        let g = ConvGeom::new(1, 12, 12, 4, 4, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (3, 3));
    }
}
