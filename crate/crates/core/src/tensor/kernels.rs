//! Value-level kernels. The graph records these for differentiation; they are
//! also usable directly when no gradient is needed.

use super::Tensor;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]` on raw row-major slices.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return dim_err(format!("matmul inner extents {k} vs {k2}"));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

/// Outer count, axis length and inner stride for an axis of `shape`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for rank {}", shape.len()));
    }
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    if inner == 1 && len > 0 {
        for (orow, row) in out.chunks_exact_mut(len).zip(src.chunks_exact(len)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                total += *o;
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        return Tensor::new(x.shape().to_vec(), out)?.ensure_finite("softmax");
    }
    let mut mx = vec![T::neg_infinity(); inner];
    let mut total = vec![T::zero(); inner];
    for o in 0..outer {
        let block = o * len * inner..(o + 1) * len * inner;
        let (src, out) = (&src[block.clone()], &mut out[block]);
        mx.fill(T::neg_infinity());
        total.fill(T::zero());
        for row in src.chunks_exact(inner) {
            for (m, &v) in mx.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        for (orow, row) in out.chunks_exact_mut(inner).zip(src.chunks_exact(inner)) {
            for (((o, &v), &m), t) in orow.iter_mut().zip(row).zip(&mx).zip(total.iter_mut()) {
                *o = (v - m).exp();
                *t += *o;
            }
        }
        for orow in out.chunks_exact_mut(inner) {
            for (o, &t) in orow.iter_mut().zip(&total) {
                *o /= t;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)?.ensure_finite("softmax")
}

/// `r×c` row-major to `c×r`, in cache-sized tiles.
pub(crate) fn transpose_raw<T: Scalar>(src: &[T], r: usize, c: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut out = vec![T::zero(); r * c];
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    out
}

/// Row statistics kept by layer norm for its backward pass.
pub(crate) struct LayerNormParts<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_parts<T: Scalar>(
    x: &[T],
    c: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> LayerNormParts<T> {
    let rows = x.len() / c;
    let cf = T::from_usize_lossy(c);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..c {
            let h = (row[j] - mean) * is;
            xhat[r * c + j] = h;
            out[r * c + j] = gamma[j] * h + beta[j];
        }
    }
    LayerNormParts { out, xhat, inv_std }
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, c) = x.rows_cols();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return dim_err(format!(
            "layer_norm affine shapes {:?}/{:?} vs width {c}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if eps <= T::zero() {
        return dim_err("layer_norm eps must be positive");
    }
    let parts = layer_norm_parts(x.data(), c, gamma.data(), beta.data(), eps);
    Tensor::new(x.shape().to_vec(), parts.out)?.ensure_finite("layer_norm")
}

/// Corner indices and weights of a bilinear footprint. Out-of-bounds corners
/// are `None` and contribute zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint<T> {
    pub corners: [Option<usize>; 4],
    pub fx: T,
    pub fy: T,
}

/// Corner order: (y0,x0), (y0,x1), (y1,x0), (y1,x1); indices are pixel offsets.
pub(crate) fn footprint<T: Scalar>(h: usize, w: usize, u: T, v: T) -> Footprint<T> {
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let cell = |yf: T, xf: T| -> Option<usize> {
        if xf < T::zero() || yf < T::zero() {
            return None;
        }
        let (xi, yi) = (xf.to_usize()?, yf.to_usize()?);
        (xi < w && yi < h).then_some(yi * w + xi)
    };
    let one = T::one();
    Footprint {
        corners: [
            cell(y0f, x0f),
            cell(y0f, x0f + one),
            cell(y0f + one, x0f),
            cell(y0f + one, x0f + one),
        ],
        fx,
        fy,
    }
}

impl<T: Scalar> Footprint<T> {
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }
}

/// Bilinear sample of an `h×w×c` map at column `u`, row `v` (pixel index
/// units; integer coordinates hit pixel centres). Zero padding outside.
pub fn bilinear_sample<T: Scalar>(map: &Tensor<T>, u: T, v: T) -> Result<Tensor<T>> {
    let &[h, w, c] = map.shape() else {
        return dim_err(format!("bilinear_sample expects h×w×c, got {:?}", map.shape()));
    };
    let mut out = vec![T::zero(); c];
    sample_into(map.data(), h, w, c, u, v, &mut out);
    Tensor::new(vec![c], out)
}

pub(crate) fn sample_into<T: Scalar>(
    map: &[T],
    h: usize,
    w: usize,
    c: usize,
    u: T,
    v: T,
    out: &mut [T],
) {
    if !(u.is_finite() && v.is_finite()) {
        return;
    }
    let fp = footprint(h, w, u, v);
    for (corner, wt) in fp.corners.iter().zip(fp.weights()) {
        if let Some(px) = corner {
            let src = &map[px * c..(px + 1) * c];
            for (o, &s) in out.iter_mut().zip(src) {
                *o += wt * s;
            }
        }
    }
}
