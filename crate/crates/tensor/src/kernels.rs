//! Raw forward/backward kernels over flat buffers. Shapes are validated by
//! the graph layer before these are called.

use crate::scalar::{gemm, MatRef, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1×1, stride-1, unpadded convolution reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: &[T],
) -> Vec<T> {
    let (patch, area) = (g.patch(), g.out_area());
    let mut out = vec![T::zero(); g.n * g.f * area];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * area]
    };
    let weights = MatRef::row_major(kernel, g.f, patch);
    for n in 0..g.n {
        let img = &input[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let dst = &mut out[n * g.f * area..(n + 1) * g.f * area];
        for (f, plane) in dst.chunks_mut(area).enumerate() {
            plane.fill(bias[f]);
        }
        let col_mat = if g.is_pointwise() {
            MatRef::row_major(img, patch, area)
        } else {
            im2col(g, img, &mut cols);
            MatRef::row_major(&cols, patch, area)
        };
        gemm(weights, col_mat, T::one(), dst);
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, area) = (g.patch(), g.out_area());
    let img_len = g.c * g.h * g.w;
    let mut d_input = want[0].then(|| vec![T::zero(); g.n * img_len]);
    let mut d_kernel = want[1].then(|| vec![T::zero(); g.f * patch]);
    let mut d_bias = want[2].then(|| vec![T::zero(); g.f]);
    let mut cols = vec![T::zero(); patch * area];
    for n in 0..g.n {
        let go = &grad_out[n * g.f * area..(n + 1) * g.f * area];
        if let Some(db) = d_bias.as_mut() {
            for (f, plane) in go.chunks(area).enumerate() {
                db[f] = db[f] + plane.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            let img = &input[n * img_len..(n + 1) * img_len];
            let col_t = if g.is_pointwise() {
                MatRef::transposed(img, patch, area)
            } else {
                im2col(g, img, &mut cols);
                MatRef::transposed(&cols, patch, area)
            };
            gemm(MatRef::row_major(go, g.f, area), col_t, T::one(), dk);
        }
        if let Some(di) = d_input.as_mut() {
            let w_t = MatRef::transposed(kernel, g.f, patch);
            let dst = &mut di[n * img_len..(n + 1) * img_len];
            if g.is_pointwise() {
                gemm(w_t, MatRef::row_major(go, g.f, area), T::zero(), dst);
            } else {
                gemm(w_t, MatRef::row_major(go, g.f, area), T::zero(), &mut cols);
                col2im_add(g, &cols, dst);
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// `y = x·Wᵀ + b` for `x: [n, inp]`, `W: [out, inp]`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    inp: usize,
    out: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    gemm(
        MatRef::row_major(x, n, inp),
        MatRef::transposed(w, out, inp),
        T::one(),
        &mut y,
    );
    y
}

#[allow(clippy::type_complexity)]
pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    (n, inp, out): (usize, usize, usize),
    want: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let dx = want[0].then(|| {
        let mut dx = vec![T::zero(); n * inp];
        gemm(
            MatRef::row_major(gy, n, out),
            MatRef::row_major(w, out, inp),
            T::zero(),
            &mut dx,
        );
        dx
    });
    let dw = want[1].then(|| {
        let mut dw = vec![T::zero(); out * inp];
        gemm(
            MatRef::transposed(gy, n, out),
            MatRef::row_major(x, n, inp),
            T::zero(),
            &mut dw,
        );
        dw
    });
    let db = want[2].then(|| {
        let mut db = vec![T::zero(); out];
        for row in gy.chunks(out) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
        db
    });
    (dx, dw, db)
}

/// Per-channel mean and biased variance over the N, H, W axes.
pub(crate) fn channel_stats<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    area: usize,
) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize_lossy(n * area);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * area;
            s = s + x[base..base + area].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut sq = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * area;
            sq = sq
                + x[base..base + area]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

pub(crate) fn upsample_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / s) * w..(oy / s + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / s];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let d = &mut dst[(oy / s) * w + ox / s];
                *d = *d + src[oy * ow + ox];
            }
        }
    }
    dx
}

pub(crate) fn avgpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for i in 0..k {
                    let row = &src[(oy * k + i) * w + ox * k..(oy * k + i) * w + ox * k + k];
                    s = s + row.iter().copied().sum::<T>();
                }
                dst[oy * ow + ox] = s * inv;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Scalar>(
    gy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::from_usize_lossy(k * k);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / k) * ow + x / k] * inv;
            }
        }
    }
    dx
}

/// Generic axis permutation of a rank-4 buffer.
pub(crate) fn permute4<T: Scalar>(x: &[T], shape: [usize; 4], perm: [usize; 4]) -> Vec<T> {
    let out_shape = [
        shape[perm[0]],
        shape[perm[1]],
        shape[perm[2]],
        shape[perm[3]],
    ];
    let in_strides = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let s = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
        in_strides[perm[3]],
    ];
    let mut out = Vec::with_capacity(x.len());
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let base = a * s[0] + b * s[1] + c * s[2];
                for d in 0..out_shape[3] {
                    out.push(x[base + d * s[3]]);
                }
            }
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
