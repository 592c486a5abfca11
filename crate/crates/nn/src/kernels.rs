//! Slice-level kernels behind the graph ops. Every function works on one
//! sample so callers can fan samples out without changing arithmetic order.

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with arbitrary row/column
/// strides for `a` and `b` and a row-major `c` of leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a too short");
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b too short");
    assert!((m - 1) * ldc + n <= c.len(), "gemm: c too short");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Unfold a `c x h x w` plane stack into `(c*9) x (h*w)` columns for a
/// 3x3 kernel with zero padding 1.
pub(crate) fn im2col3(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let row = &mut cols[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => out.copy_from_slice(src),
                        _ => {
                            out[..w - 1].copy_from_slice(&src[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatter-add columns back into `dx`.
pub(crate) fn col2im3(cols: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ci * 9 + ky * 3 + kx;
                let row = &cols[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Dimensions of a 3x3 same convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub o: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn k(&self) -> usize {
        self.c * 9
    }
}

pub(crate) fn conv3_forward(d: ConvDims, x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let hw = d.hw();
    let mut cols = vec![0.0f32; d.k() * hw];
    im2col3(x, d.c, d.h, d.w, &mut cols);
    for (o, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[o]);
    }
    gemm(d.o, d.k(), hw, weight, (d.k(), 1), &cols, (hw, 1), 1.0, out, hw);
}

/// Per-sample gradients of a 3x3 convolution: (d weight, d bias, d input).
pub(crate) fn conv3_backward(
    d: ConvDims,
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    need_dx: bool,
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let hw = d.hw();
    let k = d.k();
    let mut cols = vec![0.0f32; k * hw];
    im2col3(x, d.c, d.h, d.w, &mut cols);
    let db: Vec<f32> = dout.chunks_exact(hw).map(|r| r.iter().sum()).collect();
    let mut dw = vec![0.0f32; d.o * k];
    gemm(d.o, hw, k, dout, (hw, 1), &cols, (1, hw), 0.0, &mut dw, k);
    let dx = need_dx.then(|| {
        // reuse the column buffer for d(cols)
        gemm(k, d.o, hw, weight, (1, k), dout, (hw, 1), 0.0, &mut cols, hw);
        let mut dx = vec![0.0f32; d.c * hw];
        col2im3(&cols, d.c, d.h, d.w, &mut dx);
        dx
    });
    (dw, db, dx)
}

/// 2x2 stride-2 max pool over one `c x h x w` sample. `argmax` receives
/// the flat in-sample index of each window's first maximum.
pub(crate) fn maxpool2_forward(x: &[f32], c: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * xo;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = ci * oh * ow + y * ow + xo;
                out[o] = x[best];
                argmax[o] = best as u32;
            }
        }
    }
}

/// 2x2 stride-2 transposed convolution of one sample. Weight layout is
/// `c x o x 2 x 2`.
pub(crate) fn upconv2_forward(d: ConvDims, x: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let hw = d.hw();
    let o4 = d.o * 4;
    let mut t = vec![0.0f32; o4 * hw];
    gemm(o4, d.c, hw, weight, (1, o4), x, (hw, 1), 0.0, &mut t, hw);
    let w2 = 2 * d.w;
    for o in 0..d.o {
        let plane = &mut out[o * 4 * hw..(o + 1) * 4 * hw];
        for dy in 0..2 {
            for dx in 0..2 {
                let row = &t[(o * 4 + dy * 2 + dx) * hw..][..hw];
                for y in 0..d.h {
                    for xx in 0..d.w {
                        plane[(2 * y + dy) * w2 + 2 * xx + dx] = row[y * d.w + xx] + bias[o];
                    }
                }
            }
        }
    }
}

pub(crate) fn upconv2_backward(
    d: ConvDims,
    x: &[f32],
    weight: &[f32],
    dout: &[f32],
    need_dx: bool,
) -> (Vec<f32>, Vec<f32>, Option<Vec<f32>>) {
    let hw = d.hw();
    let o4 = d.o * 4;
    let w2 = 2 * d.w;
    let mut dt = vec![0.0f32; o4 * hw];
    let mut db = vec![0.0f32; d.o];
    for o in 0..d.o {
        let plane = &dout[o * 4 * hw..(o + 1) * 4 * hw];
        db[o] = plane.iter().sum();
        for dy in 0..2 {
            for dx in 0..2 {
                let row = &mut dt[(o * 4 + dy * 2 + dx) * hw..][..hw];
                for y in 0..d.h {
                    for xx in 0..d.w {
                        row[y * d.w + xx] = plane[(2 * y + dy) * w2 + 2 * xx + dx];
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0f32; d.c * o4];
    gemm(d.c, hw, o4, x, (hw, 1), &dt, (1, hw), 0.0, &mut dw, o4);
    let dxv = need_dx.then(|| {
        let mut dxv = vec![0.0f32; d.c * hw];
        gemm(d.c, o4, hw, weight, (o4, 1), &dt, (hw, 1), 0.0, &mut dxv, hw);
        dxv
    });
    (dw, db, dxv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(d: ConvDims, x: &[f32], wt: &[f32], b: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; d.o * d.h * d.w];
        for o in 0..d.o {
            for y in 0..d.h as isize {
                for xx in 0..d.w as isize {
                    let mut s = b[o] as f64;
                    for c in 0..d.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy >= 0 && sx >= 0 && sy < d.h as isize && sx < d.w as isize {
                                    s += (x[c * d.h * d.w + (sy as usize) * d.w + sx as usize]
                                        * wt[((o * d.c + c) * 3 + ky as usize) * 3 + kx as usize])
                                        as f64;
                                }
                            }
                        }
                    }
                    out[o * d.h * d.w + y as usize * d.w + xx as usize] = s as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let d = ConvDims { c: 3, o: 4, h: 5, w: 7 };
        let x: Vec<f32> = (0..d.c * 35).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
        let wt: Vec<f32> = (0..d.o * d.c * 9).map(|i| ((i * 13 % 7) as f32 - 3.0) / 4.0).collect();
        let b = [0.5, -1.0, 0.0, 2.0];
        let mut out = vec![0.0; d.o * 35];
        conv3_forward(d, &x, &wt, &b, &mut out);
        let want = naive_conv(d, &x, &wt, &b);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 4, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.7).sin()).collect();
        let y: Vec<f32> = (0..c * 9 * h * w).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col3(&x, c, h, w, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; x.len()];
        col2im3(&y, c, h, w, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn pool_first_max_on_ties() {
        let x = [1.0f32; 16];
        let mut out = [0.0; 4];
        let mut arg = [0u32; 4];
        maxpool2_forward(&x, 1, 4, 4, &mut out, &mut arg);
        assert_eq!(arg, [0, 2, 8, 10]);
    }
}
