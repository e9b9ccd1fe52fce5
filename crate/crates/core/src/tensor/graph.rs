//! Tape of tensor operations with a single scalar-loss backward pass.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list visits every consumer before its inputs. Leaves created through
//! [`Graph::leaf`] or [`Graph::param`] receive gradients; constants do not.

use std::collections::HashMap;

use super::kernels::{self, footprint, gemm_nt_acc, gemm_tn_acc};
use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmaxRows(Var),
    CrossEntropyRows { x: Var, targets: Vec<usize>, probs: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Sum(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Im2Col { x: Var, geom: ConvGeom },
    SamplePoints { map: Var, coords: Var },
    GroupWeightedSum { samples: Var, weights: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: T, weights: Vec<Var> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every contributing node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let value = value.ensure_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        let value = value.ensure_finite("constant")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Binds a stored parameter as a leaf; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.tensor(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|e| Error::Dimension(format!("{op}: {e}")))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn with_shape_of(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose_raw(self.value(a).data(), r, c);
        let t = Tensor::new(vec![c, r], out)?;
        self.push(t, Op::Transpose(a), &[a], "transpose")
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.with_shape_of(a, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    fn row_broadcast(&self, x: Var, r: Var, op: &str) -> Result<usize> {
        let (_, c) = self.value(x).rows_cols();
        if self.shape(r) != [c] {
            return dim_err(format!(
                "{op}: row vector {:?} vs last extent {c}",
                self.shape(r)
            ));
        }
        Ok(c)
    }

    /// `x[..., c] + b[c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.row_broadcast(x, b, "add_row")?;
        let bv = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        let t = self.with_shape_of(x, data);
        self.push(t, Op::AddRow(x, b), &[x, b], "add_row")
    }

    /// `x[..., c] * g[c]`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.row_broadcast(x, g, "mul_row")?;
        let gv = self.value(g).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv[i % c])
            .collect();
        let t = self.with_shape_of(x, data);
        self.push(t, Op::MulRow(x, g), &[x, g], "mul_row")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), &[x], "scale")
    }

    /// Multiplies each leading-axis slice by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let n = self.shape(x)[0];
        if factors.len() != n {
            return dim_err(format!("scale_rows: {} factors for {n} rows", factors.len()));
        }
        let per = self.value(x).len() / n;
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / per])
            .collect();
        let t = self.with_shape_of(x, data);
        self.push(t, Op::ScaleRows(x, factors), &[x], "scale_rows")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x], "relu")
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self
            .value(x)
            .map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        self.push(t, Op::Softplus(x), &[x], "softplus")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.abs());
        self.push(t, Op::Abs(x), &[x], "abs")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = kernels::softmax_axis(self.value(x), axis)?;
        self.push(t, Op::Softmax { x, axis }, &[x], "softmax")
    }

    /// Multi-head scaled dot-product attention. Column block `h` of the
    /// output is `softmax(scale · Q_h K_hᵀ) V_h`. The per-head `[nq, nk]`
    /// weights are returned as detached nodes.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: T) -> Result<(Var, Vec<Var>)> {
        let (nq, w) = self.dims2(q, "attention")?;
        let (nk, wk) = self.dims2(k, "attention")?;
        if self.shape(v) != [nk, wk] || wk != w {
            return dim_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if nk == 0 || heads == 0 || w % heads != 0 {
            return dim_err(format!("attention: {nk} keys, {heads} heads over width {w}"));
        }
        let dh = w / heads;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); nq * w];
        let mut head_weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let kh = head_block(kd, nk, w, h, dh);
            let vh = head_block(vd, nk, w, h, dh);
            let mut a = vec![T::zero(); nq * nk];
            for (i, arow) in a.chunks_exact_mut(nk).enumerate() {
                let qi = &qd[i * w + h * dh..i * w + (h + 1) * dh];
                for (s, kj) in arow.iter_mut().zip(kh.chunks_exact(dh)) {
                    *s = qi.iter().zip(kj).fold(T::zero(), |acc, (&x, &y)| acc + x * y) * scale;
                }
                softmax_in_place(arow);
                let orow = &mut out[i * w + h * dh..i * w + (h + 1) * dh];
                for (&p, vj) in arow.iter().zip(vh.chunks_exact(dh)) {
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
            head_weights.push(Tensor::new(vec![nq, nk], a)?);
        }
        let weights = head_weights
            .into_iter()
            .map(|a| self.constant(a))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(vec![nq, w], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            weights: weights.clone(),
        };
        Ok((self.push(t, op, &[q, k, v], "attention")?, weights))
    }

    /// Row softmax over the entries where `mask` is true; masked entries and
    /// fully masked rows produce zeros.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, k) = self.dims2(x, "masked_softmax_rows")?;
        if mask.len() != r * k {
            return dim_err("masked_softmax_rows: mask size");
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * k];
        for i in 0..r {
            let row = i * k..(i + 1) * k;
            let mx = row
                .clone()
                .filter(|&j| mask[j])
                .map(|j| src[j])
                .fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in row.clone().filter(|&j| mask[j]) {
                let e = (src[j] - mx).exp();
                out[j] = e;
                total += e;
            }
            for j in row {
                out[j] /= total;
            }
        }
        let t = Tensor::new(vec![r, k], out)?;
        self.push(t, Op::MaskedSoftmaxRows(x), &[x], "masked_softmax_rows")
    }

    /// Per-row cross-entropy `-log softmax(x)[target]`, shape `[r]`.
    pub fn cross_entropy_rows(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (r, k) = self.dims2(x, "cross_entropy_rows")?;
        if targets.len() != r || targets.iter().any(|&t| t >= k) {
            return dim_err("cross_entropy_rows: bad targets");
        }
        let probs = kernels::softmax_axis(self.value(x), 1)?.into_data();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.push(lse - row[targets[i]]);
        }
        let t = Tensor::new(vec![r], out)?;
        let op = Op::CrossEntropyRows {
            x,
            targets: targets.to_vec(),
            probs,
        };
        self.push(t, op, &[x], "cross_entropy_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (_, c) = self.value(x).rows_cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err("layer_norm: affine width");
        }
        if eps <= T::zero() {
            return dim_err("layer_norm: eps must be positive");
        }
        let parts = kernels::layer_norm_parts(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = self.with_shape_of(x, parts.out);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: parts.xhat,
            inv_std: parts.inv_std,
        };
        self.push(t, op, &[x, gamma, beta], "layer_norm")
    }

    /// `x / sqrt(|x|² + eps)` per last-axis row.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![T::zero(); src.len()];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms.push(n);
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let t = self.with_shape_of(x, out);
        self.push(t, Op::NormalizeRows { x, norms }, &[x], "normalize_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize_lossy(self.value(x).len());
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return dim_err(format!("slice_cols {start}+{len} of {c}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], out)?;
        self.push(t, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_cols: no inputs");
        }
        let dims = parts
            .iter()
            .map(|&p| self.dims2(p, "concat_cols"))
            .collect::<Result<Vec<_>>>()?;
        let r = dims[0].0;
        if dims.iter().any(|d| d.0 != r) {
            return dim_err("concat_cols: row counts differ");
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        self.push(t, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Stacks along the leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows: no inputs");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return dim_err(format!("concat_rows: trailing shape {s:?} vs {tail:?}"));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Gathers leading-axis slices (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let n = self.shape(x)[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return dim_err("select_rows: bad indices");
        }
        let per = self.value(x).len() / n;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            out.extend_from_slice(&src[r * per..(r + 1) * per]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] = rows.len();
        let t = Tensor::new(shape, out)?;
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        self.push(t, op, &[x], "select_rows")
    }

    /// Unfolds `k×k` patches of an `h×w×c` map into rows of a
    /// `(ho·wo) × (k·k·c)` matrix, columns ordered (ky, kx, channel).
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let &[h, w, c] = self.shape(x) else {
            return dim_err(format!("im2col expects h×w×c, got {:?}", self.shape(x)));
        };
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return dim_err("im2col: kernel larger than padded input");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            h,
            w,
            c,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let src = self.value(x).data();
        let cols = k * k * c;
        let mut out = vec![T::zero(); ho * wo * cols];
        for_each_tap(geom, |row, col, px| {
            out[row * cols + col..row * cols + col + c].copy_from_slice(&src[px * c..(px + 1) * c]);
        });
        let t = Tensor::new(vec![ho * wo, cols], out)?;
        self.push(t, Op::Im2Col { x, geom }, &[x], "im2col")
    }

    /// Bilinear samples of an `h×w×c` map at `p` (u, v) coordinates → `p×c`.
    pub fn sample_points(&mut self, map: Var, coords: Var) -> Result<Var> {
        let &[h, w, c] = self.shape(map) else {
            return dim_err("sample_points: map must be h×w×c");
        };
        let (p, two) = self.dims2(coords, "sample_points")?;
        if two != 2 {
            return dim_err("sample_points: coords must be p×2");
        }
        let m = self.value(map).data();
        let cd = self.value(coords).data();
        let mut out = vec![T::zero(); p * c];
        for i in 0..p {
            kernels::sample_into(m, h, w, c, cd[2 * i], cd[2 * i + 1], &mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![p, c], out)?;
        self.push(t, Op::SamplePoints { map, coords }, &[map, coords], "sample_points")
    }

    /// `out[q] = Σ_k weights[q,k] · samples[q·K + k]`.
    pub fn group_weighted_sum(&mut self, samples: Var, weights: Var) -> Result<Var> {
        let (qk, c) = self.dims2(samples, "group_weighted_sum")?;
        let (q, k) = self.dims2(weights, "group_weighted_sum")?;
        if q * k != qk {
            return dim_err(format!("group_weighted_sum: {qk} samples vs {q}×{k} weights"));
        }
        let s = self.value(samples).data();
        let wv = self.value(weights).data();
        let mut out = vec![T::zero(); q * c];
        for qi in 0..q {
            let orow = &mut out[qi * c..(qi + 1) * c];
            for ki in 0..k {
                let wt = wv[qi * k + ki];
                if wt == T::zero() {
                    continue;
                }
                let srow = &s[(qi * k + ki) * c..(qi * k + ki + 1) * c];
                for (o, &sv) in orow.iter_mut().zip(srow) {
                    *o += wt * sv;
                }
            }
        }
        let t = Tensor::new(vec![q, c], out)?;
        let op = Op::GroupWeightedSum { samples, weights };
        self.push(t, op, &[samples, weights], "group_weighted_sum")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return dim_err(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2d");
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| gemm_nt_acc(gy, bv, g, m, n, k));
                acc(*b, &mut |g| gemm_tn_acc(av, gy, g, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2().expect("2d");
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(o, &d)| *o -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    let c = g.len();
                    for (i, &d) in gy.iter().enumerate() {
                        g[i % c] += d;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x).data(), self.value(*r).data());
                let c = rv.len();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * rv[i % c];
                    }
                });
                acc(*r, &mut |g| {
                    for (i, &d) in gy.iter().enumerate() {
                        g[i % c] += d * xv[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| {
                g.iter_mut().zip(gy).for_each(|(o, &d)| *o += d * *s)
            }),
            Op::ScaleRows(x, f) => {
                let per = gy.len() / f.len();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * f[i / per];
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * sigmoid(xv[i]);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            g[i] += gy[i];
                        } else if xv[i] < T::zero() {
                            g[i] -= gy[i];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            } => {
                let (nq, w) = self.value(*q).dims2().expect("2d");
                let nk = self.value(*k).shape()[0];
                let dh = w / heads;
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let (mut dq, mut dk, mut dv) = (vec![T::zero(); nq * w], vec![T::zero(); nk * w], vec![T::zero(); nk * w]);
                let mut ds = vec![T::zero(); nk];
                for (h, wv) in weights.iter().enumerate() {
                    let a = self.value(*wv).data();
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..nq {
                        let arow = &a[i * nk..(i + 1) * nk];
                        let gi = &gy[i * w..(i + 1) * w][cols.clone()];
                        for (j, d) in ds.iter_mut().enumerate() {
                            let vj = &vd[j * w..(j + 1) * w][cols.clone()];
                            *d = gi.iter().zip(vj).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                            for (o, &x) in dv[j * w..(j + 1) * w][cols.clone()].iter_mut().zip(gi) {
                                *o += arow[j] * x;
                            }
                        }
                        let dot = arow.iter().zip(&ds).fold(T::zero(), |acc, (&p, &d)| acc + p * d);
                        let qi = &qd[i * w..(i + 1) * w][cols.clone()];
                        for (j, d) in ds.iter().enumerate() {
                            let g = arow[j] * (*d - dot) * *scale;
                            if g == T::zero() {
                                continue;
                            }
                            let kj = &kd[j * w..(j + 1) * w][cols.clone()];
                            for (o, &x) in dq[i * w..(i + 1) * w][cols.clone()].iter_mut().zip(kj) {
                                *o += g * x;
                            }
                            for (o, &x) in dk[j * w..(j + 1) * w][cols.clone()].iter_mut().zip(qi) {
                                *o += g * x;
                            }
                        }
                    }
                }
                acc(*q, &mut |g| add_into(g, &dq));
                acc(*k, &mut |g| add_into(g, &dk));
                acc(*v, &mut |g| add_into(g, &dv));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) =
                    kernels::axis_layout(node.value.shape(), *axis).expect("valid axis");
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: T = (0..len).map(|a| gy[base + a * inner] * y[base + a * inner]).sum();
                            for a in 0..len {
                                let j = base + a * inner;
                                g[j] += y[j] * (gy[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows(x) => {
                let k = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (r, (yr, gr)) in y.chunks(k).zip(gy.chunks(k)).enumerate() {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            g[r * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropyRows { x, targets, probs } => {
                let k = probs.len() / targets.len();
                acc(*x, &mut |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            g[r * k + j] += gy[r] * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let c = gam.len();
                let cf = T::from_usize_lossy(c);
                acc(*x, &mut |g| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let gh: Vec<T> = row.clone().map(|j| gy[j] * gam[j - r * c]).collect();
                        let mean_gh = gh.iter().copied().sum::<T>() / cf;
                        let mean_ghx = row.clone().map(|j| gh[j - r * c] * xhat[j]).sum::<T>() / cf;
                        for j in row {
                            g[j] += is * (gh[j - r * c] - mean_gh - xhat[j] * mean_ghx);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for (i, &d) in gy.iter().enumerate() {
                        g[i % c] += d * xhat[i];
                    }
                });
                acc(*beta, &mut |g| {
                    for (i, &d) in gy.iter().enumerate() {
                        g[i % c] += d;
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let c = gy.len() / norms.len();
                acc(*x, &mut |g| {
                    for (r, &n) in norms.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let dot: T = row.clone().map(|j| gy[j] * y[j]).sum();
                        for j in row {
                            g[j] += (gy[j] - y[j] * dot) / n;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|o| *o += gy[0])),
            Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gy)),
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (i, chunk) in gy.chunks(len).enumerate() {
                        add_into(&mut g[i * c + start..i * c + start + len], chunk);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape()[1];
                    acc(p, &mut |g| {
                        for (i, chunk) in g.chunks_mut(c).enumerate() {
                            add_into(chunk, &gy[i * total + offset..i * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |g| add_into(g, &gy[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let per = gy.len() / rows.len();
                acc(*x, &mut |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * per..(r + 1) * per], &gy[i * per..(i + 1) * per]);
                    }
                });
            }
            Op::Im2Col { x, geom } => {
                let cols = geom.k * geom.k * geom.c;
                let c = geom.c;
                acc(*x, &mut |g| {
                    for_each_tap(*geom, |row, col, px| {
                        add_into(&mut g[px * c..(px + 1) * c], &gy[row * cols + col..row * cols + col + c]);
                    });
                });
            }
            Op::SamplePoints { map, coords } => {
                let &[h, w, c] = self.value(*map).shape() else {
                    unreachable!()
                };
                let cd = self.value(*coords).data();
                let mv = self.value(*map).data();
                acc(*map, &mut |g| {
                    for (i, gr) in gy.chunks(c).enumerate() {
                        let (u, v) = (cd[2 * i], cd[2 * i + 1]);
                        let fp = footprint(h, w, u, v);
                        for (corner, wt) in fp.corners.iter().zip(fp.weights()) {
                            if let Some(px) = corner {
                                for (o, &d) in g[px * c..(px + 1) * c].iter_mut().zip(gr) {
                                    *o += wt * d;
                                }
                            }
                        }
                    }
                });
                acc(*coords, &mut |g| {
                    let one = T::one();
                    for (i, gr) in gy.chunks(c).enumerate() {
                        let fp = footprint(h, w, cd[2 * i], cd[2 * i + 1]);
                        let pix = |k: usize, ch: usize| fp.corners[k].map_or(T::zero(), |px| mv[px * c + ch]);
                        let (mut du, mut dv) = (T::zero(), T::zero());
                        for (ch, &d) in gr.iter().enumerate() {
                            let (p00, p01, p10, p11) = (pix(0, ch), pix(1, ch), pix(2, ch), pix(3, ch));
                            du += d * ((one - fp.fy) * (p01 - p00) + fp.fy * (p11 - p10));
                            dv += d * ((one - fp.fx) * (p10 - p00) + fp.fx * (p11 - p01));
                        }
                        g[2 * i] += du;
                        g[2 * i + 1] += dv;
                    }
                });
            }
            Op::GroupWeightedSum { samples, weights } => {
                let (q, k) = self.value(*weights).dims2().expect("2d");
                let c = node.value.shape()[1];
                let sv = self.value(*samples).data();
                let wv = self.value(*weights).data();
                acc(*samples, &mut |g| {
                    for qi in 0..q {
                        for ki in 0..k {
                            let wt = wv[qi * k + ki];
                            let row = (qi * k + ki) * c;
                            for j in 0..c {
                                g[row + j] += wt * gy[qi * c + j];
                            }
                        }
                    }
                });
                acc(*weights, &mut |g| {
                    for qi in 0..q {
                        for ki in 0..k {
                            let row = (qi * k + ki) * c;
                            let dot: T = (0..c).map(|j| sv[row + j] * gy[qi * c + j]).sum();
                            g[qi * k + ki] += dot;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &d)| *o += d);
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Visits every in-bounds kernel tap as (output row, column offset, source pixel).
fn for_each_tap(g: ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = oy * g.wo + ox;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let px = iy as usize * g.w + ix as usize;
                    f(row, (ky * g.k + kx) * g.c, px);
                }
            }
        }
    }
}

/// Column block `h` of a row-major `[rows, w]` matrix as a contiguous `[rows, dh]` copy.
fn head_block<T: Scalar>(x: &[T], rows: usize, w: usize, h: usize, dh: usize) -> Vec<T> {
    (0..rows).flat_map(|j| x[j * w + h * dh..j * w + (h + 1) * dh].iter().copied()).collect()
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
