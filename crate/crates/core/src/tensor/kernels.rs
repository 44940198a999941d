//! Raw slice kernels behind the tensor primitives: strided GEMM, im2col/col2im,
//! convolution (forward and adjoint) and 2x2 max-pooling.

use super::Real;

/// Row-major `c = a * b + beta * c`, with `a` logically `m x k` and `b` logically `k x n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every address the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over a `[c, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
    fn valid_range(&self, kx: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s).min(out)
        };
        let hi = if extent + self.pad > kx {
            ((extent - 1 + self.pad - kx) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfold `[c, h, w]` into a `(c*k*k) x (oh*ow)` column matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.col_cols();
    let s = g.stride;
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.oh {
                    let out_row = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if oy < oy_lo || oy >= oy_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + ky - g.pad;
                    let in_row = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..ox_lo].fill(T::zero());
                    out_row[ox_hi..].fill(T::zero());
                    if s == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        out_row[ox_lo..ox_hi].copy_from_slice(&in_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] = in_row[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[c, h, w]`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, output: &mut [T]) {
    let n = g.col_cols();
    let s = g.stride;
    for c in 0..g.c {
        let plane = &mut output[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.h, g.oh);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.w, g.ow);
                let row = &cols[((c * g.k + ky) * g.k + kx) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - g.pad;
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * s + kx - g.pad] = dst[ox * s + kx - g.pad] + src[ox];
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn plane_sums<T: Real>(dy: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|o| {
            let s: f64 = dy[o * plane..(o + 1) * plane].iter().map(|v| v.as_f64()).sum();
            T::from_f64(s)
        })
        .collect()
}

fn unfold<'a, T: Real>(input: &'a [T], g: &ConvGeom, scratch: &'a mut Vec<T>) -> &'a [T] {
    // A 1x1 stride-1 kernel is its own column matrix.
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        return input;
    }
    scratch.resize(g.col_rows() * g.col_cols(), T::zero());
    im2col(input, g, scratch);
    scratch
}

/// Cross-correlation `y[o] = b[o] + sum_i w[o, i] * x[i]`, `w` shaped `[out_c, g.c, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    g: &ConvGeom,
    out_c: usize,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut scratch = Vec::new();
    let cols = unfold(x, g, &mut scratch);
    let n = g.col_cols();
    let mut y = vec![T::zero(); out_c * n];
    gemm(false, false, out_c, n, g.col_rows(), w, cols, T::zero(), &mut y);
    if let Some(b) = bias {
        add_bias(&mut y, b, n);
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    g: &ConvGeom,
    out_c: usize,
    w: &[T],
    dy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let n = g.col_cols();
    let rows = g.col_rows();
    let dx = need[0].then(|| {
        let mut dcols = vec![T::zero(); rows * n];
        gemm(true, false, rows, n, out_c, w, dy, T::zero(), &mut dcols);
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.c * g.h * g.w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    let dw = need[1].then(|| {
        let mut scratch = Vec::new();
        let cols = unfold(x, g, &mut scratch);
        let mut dw = vec![T::zero(); out_c * rows];
        gemm(false, true, out_c, rows, n, dy, cols, T::zero(), &mut dw);
        dw
    });
    let db = need[2].then(|| plane_sums(dy, out_c, n));
    ConvGrads { dx, dw, db }
}

/// Geometry of the stride-2 convolution whose adjoint is the transposed
/// convolution from `[in_c, h, w]` to `[out_c, 2h, 2w]`.
pub(crate) fn transpose_geom(out_c: usize, h: usize, w: usize, k: usize) -> ConvGeom {
    let g = ConvGeom::new(out_c, 2 * h, 2 * w, k, 2, k / 2);
    debug_assert_eq!((g.oh, g.ow), (h, w));
    g
}

/// Rearrange `w[o, i, kk]` into the `(o*k*k + kk) x i` matrix used by the transposed convolution.
fn transpose_matrix<T: Real>(w: &[T], out_c: usize, in_c: usize, kk: usize) -> Vec<T> {
    let mut a = vec![T::zero(); out_c * kk * in_c];
    for o in 0..out_c {
        for i in 0..in_c {
            for t in 0..kk {
                a[(o * kk + t) * in_c + i] = w[(o * in_c + i) * kk + t];
            }
        }
    }
    a
}

pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    in_c: usize,
    h: usize,
    w_dim: usize,
    out_c: usize,
    k: usize,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let g = transpose_geom(out_c, h, w_dim, k);
    let kk = k * k;
    let a = transpose_matrix(w, out_c, in_c, kk);
    let n = h * w_dim;
    let mut cols = vec![T::zero(); out_c * kk * n];
    gemm(false, false, out_c * kk, n, in_c, &a, x, T::zero(), &mut cols);
    let mut y = vec![T::zero(); out_c * g.h * g.w];
    col2im(&cols, &g, &mut y);
    if let Some(b) = bias {
        add_bias(&mut y, b, g.h * g.w);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    in_c: usize,
    h: usize,
    w_dim: usize,
    out_c: usize,
    k: usize,
    w: &[T],
    dy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = transpose_geom(out_c, h, w_dim, k);
    let kk = k * k;
    let n = h * w_dim;
    let mut dcols = vec![T::zero(); out_c * kk * n];
    im2col(dy, &g, &mut dcols);
    let dx = need[0].then(|| {
        let a = transpose_matrix(w, out_c, in_c, kk);
        let mut dx = vec![T::zero(); in_c * n];
        gemm(true, false, in_c, n, out_c * kk, &a, &dcols, T::zero(), &mut dx);
        dx
    });
    let dw = need[1].then(|| {
        let mut da = vec![T::zero(); out_c * kk * in_c];
        gemm(false, true, out_c * kk, in_c, n, &dcols, x, T::zero(), &mut da);
        let mut dw = vec![T::zero(); out_c * in_c * kk];
        for o in 0..out_c {
            for i in 0..in_c {
                for t in 0..kk {
                    dw[(o * in_c + i) * kk + t] = da[(o * kk + t) * in_c + i];
                }
            }
        }
        dw
    });
    let db = need[2].then(|| plane_sums(dy, out_c, g.h * g.w));
    ConvGrads { dx, dw, db }
}

/// 2x2 stride-2 max-pool over `[c, h, w]`; returns values and the flat input
/// index of each window's maximum (first maximum in row-major scan order).
pub(crate) fn maxpool2x2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for every geometry used by the networks.
        for &(h, w, k, s, p) in &[(5, 4, 3, 1, 1), (6, 6, 3, 2, 1), (4, 7, 3, 1, 0), (3, 3, 1, 1, 0)] {
            let g = ConvGeom::new(2, h, w, k, s, p);
            let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
                .map(|i| ((i * 13 % 7) as f64) - 3.0)
                .collect();
            let mut cols = vec![0.0; c.len()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&c, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{h}x{w} k{k} s{s} p{p}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
