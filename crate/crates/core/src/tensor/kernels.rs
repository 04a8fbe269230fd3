//! Raw slice kernels shared by the value API and the tape.

use crate::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 8;

/// `out[m×n] += a[m×k] · b[k×n]`, computed in `MR×NR` register tiles.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let bs: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        row[c] += av * bs[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    o[c] += row[c];
                }
            }
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                row_axpy(&a[r * k..(r + 1) * k], b, &mut out[r * n + j..(r + 1) * n], n, j);
            }
        }
        i += MR;
    }
    for r in i..m {
        row_axpy(&a[r * k..(r + 1) * k], b, &mut out[r * n..(r + 1) * n], n, 0);
    }
}

/// `out += Σ_p a[p] · b[p, from..]` for one output row.
fn row_axpy<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, from: usize) {
    for (p, &av) in a.iter().enumerate() {
        for (o, &bv) in out.iter_mut().zip(&b[p * n + from..(p + 1) * n]) {
            *o += av * bv;
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = T::zero());
    matmul_acc(a, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + MR <= m {
        let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in 0..n {
            let d = dot_rows(&rows, &b[j * k..(j + 1) * k]);
            for r in 0..MR {
                out[(i + r) * n + j] += d[r];
            }
        }
        i += MR;
    }
    for r in i..m {
        let arow = &a[r * k..(r + 1) * k];
        for j in 0..n {
            out[r * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot products of `MR` rows against one shared vector.
fn dot_rows<T: Scalar>(rows: &[&[T]; MR], y: &[T]) -> [T; MR] {
    const L: usize = 8;
    let mut lanes = [[T::zero(); L]; MR];
    let chunks = y.len() / L;
    for c in 0..chunks {
        let ys: &[T; L] = y[c * L..(c + 1) * L].try_into().unwrap();
        for (r, lane) in lanes.iter_mut().enumerate() {
            let xs: &[T; L] = rows[r][c * L..(c + 1) * L].try_into().unwrap();
            for l in 0..L {
                lane[l] += xs[l] * ys[l];
            }
        }
    }
    std::array::from_fn(|r| {
        let l = &lanes[r];
        let mut acc = ((l[0] + l[4]) + (l[1] + l[5])) + ((l[2] + l[6]) + (l[3] + l[7]));
        for q in chunks * L..y.len() {
            acc += rows[r][q] * y[q];
        }
        acc
    })
}

/// Dot product with eight independent partial sums so it vectorizes.
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            lanes[l] += a[l] * b[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&a, &b) in xr.iter().zip(yr) {
        acc += a * b;
    }
    acc
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut at = vec![T::zero(); k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    matmul_acc(&at, b, out, k, m, n);
}

/// In-place softmax over the middle index of an (outer, len, inner) view.
pub fn softmax<T: Scalar>(x: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                x[base + a * inner] = e;
                total += e;
            }
            for a in 0..len {
                x[base + a * inner] /= total;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.w_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `[C×H×W]` into `[C·k·k × H'·W']` patch columns (zero padding).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.cols_len();
    let mut cols = vec![T::zero(); g.cols_rows() * n];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    let d = &mut dst[oy * g.w_out + lo..oy * g.w_out + hi];
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        d.copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (o, v) in d.iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.cols_len();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    let s = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    let start = base + lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (o, &v) in dx[start..start + (hi - lo)].iter_mut().zip(s) {
                            *o += v;
                        }
                    } else {
                        for (o, &v) in dx[start..].iter_mut().step_by(g.stride).zip(s) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        (0..r * c).map(|i| x[(i % r) * c + i / r]).collect()
    }

    #[test]
    fn blocked_products_match_naive() {
        for (m, k, n) in [(1, 1, 1), (4, 3, 16), (5, 9, 33), (9, 17, 7), (8, 40, 20)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let want = naive(&a, &b, m, k, n);
            let close = |got: &[f64]| got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12);
            let mut out = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut out, m, k, n);
            assert!(close(&out), "nn {m} {k} {n}");
            let mut out = vec![0.0; m * n];
            matmul_nt_acc(&a, &transpose(&b, k, n), &mut out, m, k, n);
            assert!(close(&out), "nt {m} {k} {n}");
            let mut out = vec![0.0; m * n];
            matmul_tn_acc(&transpose(&a, m, k), &b, &mut out, k, m, n);
            assert!(close(&out), "tn {m} {k} {n}");
        }
    }

    /// Direct per-element unfold used as the reference.
    fn naive_im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
        let n = g.cols_len();
        let mut cols = vec![0.0; g.cols_rows() * n];
        for c in 0..g.c_in {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let row = (c * g.k + ky) * g.k + kx;
                    for oy in 0..g.h_out {
                        for ox in 0..g.w_out {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                cols[row * n + oy * g.w_out + ox] = x[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for k in 1..4 {
            for stride in 1..4 {
                for pad in 0..3 {
                    for (h, w) in [(5, 7), (k, k), (6, 3)] {
                        if k > h + 2 * pad || k > w + 2 * pad {
                            continue;
                        }
                        let g = ConvGeom {
                            c_in: 2,
                            h,
                            w,
                            k,
                            stride,
                            pad,
                            h_out: (h + 2 * pad - k) / stride + 1,
                            w_out: (w + 2 * pad - k) / stride + 1,
                        };
                        let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
                        let cols = im2col(&x, &g);
                        assert_eq!(cols, naive_im2col(&x, &g), "k {k} s {stride} p {pad} {h}x{w}");
                        // adjoint: <im2col(x), y> == <x, col2im(y)>
                        let y: Vec<f64> = (0..cols.len()).map(|i| (i % 7) as f64 - 3.0).collect();
                        let mut back = vec![0.0; x.len()];
                        col2im(&y, &g, &mut back);
                        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
                        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
                        assert_eq!(lhs, rhs);
                    }
                }
            }
        }
    }
}
