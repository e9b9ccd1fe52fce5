//! Brute-force reference implementations used by tests.
//!
//! Everything here works on plain nested `Vec`s with explicit loops and
//! shares no code with the graph kernels, so agreement is evidence rather
//! than tautology.

use crate::bev::ProjectionTable;
use crate::camera::Camera;
use crate::head::{Box3d, GtObject};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, LN_EPS};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let (r, c) = t.rows_cols();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let c = m.first().map_or(0, Vec::len);
    Tensor::new(vec![m.len(), c], m.concat()).expect("rectangular matrix")
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; n]; a.len()];
    for i in 0..a.len() {
        for j in 0..n {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let c = a.first().map_or(0, Vec::len);
    (0..c).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter().map(|r| softmax(r)).collect()
}

pub fn softmax_cols(a: &Mat) -> Mat {
    transpose(&softmax_rows(&transpose(a)))
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Mean and (biased) variance recomputed per row.
pub fn layer_norm_rows(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// Affine map with weights read out of a store.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn read(store: &ParamStore<f64>, l: &Linear) -> Self {
        Self {
            w: to_mat(store.tensor(l.weight)),
            b: store.tensor(l.bias).data().to_vec(),
        }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        x.iter()
            .map(|r| {
                (0..self.b.len())
                    .map(|j| self.b[j] + (0..r.len()).map(|k| r[k] * self.w[k][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }
}

pub fn mlp(store: &ParamStore<f64>, m: &Mlp, x: &Mat) -> Mat {
    let h = relu(&Affine::read(store, &m.hidden).apply(x));
    Affine::read(store, &m.out).apply(&h)
}

pub fn layer_norm(store: &ParamStore<f64>, ln: &LayerNorm, x: &Mat) -> Mat {
    layer_norm_rows(x, store.tensor(ln.gamma).data(), store.tensor(ln.beta).data(), LN_EPS)
}

/// Hand-expanded four-term bilinear interpolation of a row-major `h×w`
/// grid of `c`-vectors, zero outside.
pub fn bilinear(map: &[Vec<f64>], h: usize, w: usize, u: f64, v: f64) -> Vec<f64> {
    let c = map.first().map_or(0, Vec::len);
    let (x0, y0) = (u.floor(), v.floor());
    let (a, b) = (u - x0, v - y0);
    let at = |y: f64, x: f64| -> Vec<f64> {
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            vec![0.0; c]
        } else {
            map[y as usize * w + x as usize].clone()
        }
    };
    let (p00, p01, p10, p11) = (at(y0, x0), at(y0, x0 + 1.0), at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0));
    (0..c)
        .map(|k| {
            (1.0 - a) * (1.0 - b) * p00[k] + a * (1.0 - b) * p01[k] + (1.0 - a) * b * p10[k] + a * b * p11[k]
        })
        .collect()
}

/// `K·(R p + t) / z` written out directly.
pub fn project(cam: &Camera<f64>, p: [f64; 3]) -> (f64, f64, f64) {
    let r = cam.rotation();
    let t = cam.translation();
    let k = cam.intrinsics();
    let mut pc = [0.0; 3];
    for i in 0..3 {
        pc[i] = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
    }
    let u = (k[0][0] * pc[0] + k[0][1] * pc[1] + k[0][2] * pc[2]) / pc[2];
    let v = (k[1][1] * pc[1] + k[1][2] * pc[2]) / pc[2];
    (u, v, pc[2])
}

/// 3×3 same-padding convolution over a row-major `h×w` token grid.
/// Weight rows are ordered (ky, kx, c_in).
pub fn conv3x3(tokens: &Mat, h: usize, w: usize, weight: &Mat, bias: &[f64]) -> Mat {
    let c = tokens.first().map_or(0, Vec::len);
    let mut out = vec![bias.to_vec(); h * w];
    for y in 0..h {
        for x in 0..w {
            for ky in 0..3 {
                for kx in 0..3 {
                    let (iy, ix) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let src = &tokens[iy as usize * w + ix as usize];
                    for ci in 0..c {
                        for (co, o) in out[y * w + x].iter_mut().enumerate() {
                            *o += src[ci] * weight[(ky * 3 + kx) * c + ci][co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Clustering logits followed by a softmax down each column.
pub fn cluster_assign(
    store: &ParamStore<f64>,
    op: &crate::cluster::Clustering,
    tokens: &Mat,
    layout: (usize, usize),
) -> Mat {
    use crate::cluster::Clustering;
    let logits = match op {
        Clustering::Linear(l) => Affine::read(store, l).apply(tokens),
        Clustering::Mlp(m) => mlp(store, m, tokens),
        Clustering::Conv { conv, proj } => {
            let y = conv3x3(
                tokens,
                layout.0,
                layout.1,
                &to_mat(store.tensor(conv.weight)),
                store.tensor(conv.bias).data(),
            );
            Affine::read(store, proj).apply(&y)
        }
    };
    softmax_cols(&logits)
}

/// `LN(Cᵀ F)` with the sum over tokens spelled out.
pub fn compute_clusters(tokens: &Mat, assign: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let m = assign.first().map_or(0, Vec::len);
    let c = tokens.first().map_or(0, Vec::len);
    let mut raw = vec![vec![0.0; c]; m];
    for (t, row) in tokens.iter().enumerate() {
        for j in 0..m {
            for k in 0..c {
                raw[j][k] += assign[t][j] * row[k];
            }
        }
    }
    layer_norm_rows(&raw, gamma, beta, LN_EPS)
}

/// Per-token, per-head attention loop; returns the projected output before
/// any residual.
pub fn attention(store: &ParamStore<f64>, mha: &MultiHeadAttention, queries: &Mat, kv: &Mat) -> Mat {
    let q = Affine::read(store, &mha.q).apply(queries);
    let k = Affine::read(store, &mha.k).apply(kv);
    let v = Affine::read(store, &mha.v).apply(kv);
    let dh = mha.width / mha.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = vec![vec![0.0; mha.width]; queries.len()];
    for i in 0..queries.len() {
        for h in 0..mha.heads {
            let cols = h * dh..(h + 1) * dh;
            let scores: Vec<f64> = (0..kv.len())
                .map(|j| cols.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() * scale)
                .collect();
            let p = softmax(&scores);
            for d in cols {
                merged[i][d] = (0..kv.len()).map(|j| p[j] * v[j][d]).sum();
            }
        }
    }
    Affine::read(store, &mha.o).apply(&merged)
}

/// `F + attention(F, z)`.
pub fn paca_attend(store: &ParamStore<f64>, paca: &crate::cluster::PacaAttention, tokens: &Mat, clusters: &Mat) -> Mat {
    add(tokens, &attention(store, &paca.attn, tokens, clusters))
}

/// One map of the pyramid as row-major tokens.
#[derive(Clone, Debug)]
pub struct LevelMap {
    pub h: usize,
    pub w: usize,
    pub tokens: Mat,
}

impl LevelMap {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let &[h, w, c] = t.shape() else { panic!("map must be h×w×c") };
        Self {
            h,
            w,
            tokens: (0..h * w).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect(),
        }
    }
}

/// Per-query, per-sample loop over one view. Returns the weighted sums and
/// the per-query hit flags.
pub fn deformable_sample(
    maps: &[LevelMap],
    table: &ProjectionTable<f64>,
    view: usize,
    offsets: &Mat,
    logits: &Mat,
    points: usize,
) -> (Mat, Vec<bool>) {
    let c = maps[0].tokens[0].len();
    let pillars = table.pillars;
    let mut out = Vec::with_capacity(table.cells);
    let mut hits = Vec::with_capacity(table.cells);
    for q in 0..table.cells {
        // Enumerate samples in (level, pillar, point) order.
        let mut samples = Vec::new();
        for (l, m) in maps.iter().enumerate() {
            for p in 0..pillars {
                let a = table.get(q, p, view, l);
                for s in 0..points {
                    let col = (l * pillars + p) * points + s;
                    samples.push((l, a, col, m));
                }
            }
        }
        let visible: Vec<usize> = samples.iter().filter(|x| x.1.visible).map(|x| x.2).collect();
        let mut acc = vec![0.0; c];
        if !visible.is_empty() {
            let mx = visible.iter().map(|&j| logits[q][j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = visible.iter().map(|&j| (logits[q][j] - mx).exp()).sum();
            for (_, a, col, m) in &samples {
                if !a.visible {
                    continue;
                }
                let wt = (logits[q][*col] - mx).exp() / z;
                let u = a.u - 0.5 + offsets[q][2 * col];
                let v = a.v - 0.5 + offsets[q][2 * col + 1];
                let s = bilinear(&m.tokens, m.h, m.w, u, v);
                for k in 0..c {
                    acc[k] += wt * s[k];
                }
            }
        }
        hits.push(!visible.is_empty());
        out.push(acc);
    }
    (out, hits)
}

/// Enumerates every (query, view, level, pillar, point) of one spatial
/// cross-attention pass and returns the updated queries.
pub fn spatial_cross_attention(
    store: &ParamStore<f64>,
    sca: &crate::lift::SpatialCrossAttention,
    queries: &Mat,
    views: &[Vec<LevelMap>],
    table: &ProjectionTable<f64>,
) -> Mat {
    let qn = layer_norm(store, &sca.norm, queries);
    let offsets = Affine::read(store, &sca.offsets).apply(&qn);
    let logits = Affine::read(store, &sca.weights).apply(&qn);
    let value = Affine::read(store, &sca.value);
    let c = queries[0].len();
    let mut total = vec![vec![0.0; value.b.len()]; table.cells];
    let mut hits = vec![0usize; table.cells];
    for (v, pyramid) in views.iter().enumerate() {
        let projected: Vec<LevelMap> = pyramid
            .iter()
            .map(|m| LevelMap {
                tokens: value.apply(&m.tokens),
                ..*m
            })
            .collect();
        let (s, hit) = deformable_sample(&projected, table, v, &offsets, &logits, sca.layout.points);
        for q in 0..table.cells {
            if hit[q] {
                hits[q] += 1;
                for k in 0..total[q].len() {
                    total[q][k] += s[q][k];
                }
            }
        }
    }
    let output = Affine::read(store, &sca.output);
    (0..table.cells)
        .map(|q| {
            if hits[q] == 0 {
                return queries[q].clone();
            }
            let mean: Vec<f64> = total[q].iter().map(|x| x / hits[q] as f64).collect();
            let upd = &output.apply(&vec![mean])[0];
            (0..c).map(|k| queries[q][k] + upd[k]).collect()
        })
        .collect()
}

/// PETR lifting, one token at a time.
pub fn petr_lift(store: &ParamStore<f64>, lift: &crate::lift::PetrLift, views: &[LevelMap], volumes: &[Tensor<f64>]) -> Mat {
    let feat = Affine::read(store, &lift.feat);
    let mut out = Vec::new();
    for (m, vol) in views.iter().zip(volumes) {
        let pos = LevelMap::from_tensor(vol);
        for t in 0..m.h * m.w {
            let f = &feat.apply(&vec![m.tokens[t].clone()])[0];
            let p = &mlp(store, &lift.pos, &vec![pos.tokens[t].clone()])[0];
            out.push(f.iter().zip(p).map(|(a, b)| a + b).collect());
        }
    }
    out
}

/// Pre-norm decoder stack with naive attention.
pub fn decode(store: &ParamStore<f64>, dec: &crate::head::Decoder, kv: &Mat) -> Mat {
    let mut x = to_mat(store.tensor(dec.queries));
    for layer in &dec.layers {
        let h = layer_norm(store, &layer.norm, &x);
        x = add(&x, &attention(store, &layer.cross, &h, kv));
        let h = layer_norm(store, &layer.ffn.norm, &x);
        x = add(&x, &mlp(store, &layer.ffn.mlp, &h));
    }
    x
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row[k] - m - row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every injective map from gt objects to queries, enumerated recursively.
fn injections(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn go(n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for q in 0..m {
            if !cur.contains(&q) {
                cur.push(q);
                go(n, m, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(n, m, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive matching: minimum total cost over all injections and the
/// resulting set loss. Returns `(loss, query_of_gt, min_cost)`.
pub fn match_and_loss(
    logits: &Mat,
    boxes: &Mat,
    gt: &[GtObject<f64>],
    lambda_cls: f64,
    lambda_box: f64,
) -> (f64, Vec<usize>, f64) {
    let velocity = boxes[0].len() == 10;
    let targets: Vec<Vec<f64>> = gt.iter().map(|o| o.bbox.target(velocity)).collect();
    let l1 = |q: usize, j: usize| -> f64 { boxes[q].iter().zip(&targets[j]).map(|(a, b)| (a - b).abs()).sum() };
    let cost = |q: usize, j: usize| lambda_cls * -log_softmax_at(&logits[q], gt[j].class) + lambda_box * l1(q, j);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for inj in injections(gt.len(), logits.len()) {
        let c: f64 = inj.iter().enumerate().map(|(j, &q)| cost(q, j)).sum();
        if best.as_ref().map_or(true, |(b, _)| c < *b) {
            best = Some((c, inj));
        }
    }
    let (min_cost, inj) = best.unwrap_or((0.0, Vec::new()));
    let none = logits[0].len() - 1;
    let mut cls_target = vec![none; logits.len()];
    for (j, &q) in inj.iter().enumerate() {
        cls_target[q] = gt[j].class;
    }
    let ce: f64 = (0..logits.len()).map(|q| -log_softmax_at(&logits[q], cls_target[q])).sum::<f64>() / logits.len() as f64;
    let bl: f64 = inj.iter().enumerate().map(|(j, &q)| l1(q, j)).sum();
    let loss = lambda_cls * ce + if gt.is_empty() { 0.0 } else { lambda_box * bl / gt.len() as f64 };
    (loss, inj, min_cost)
}

/// Nearest box hit by the ray through pixel centre `(u, v)`, via slab tests
/// in each box's local frame.
pub fn ray_cast(cam: &Camera<f64>, boxes: &[Box3d<f64>], u: f64, v: f64) -> Option<usize> {
    let o = cam.center();
    let d = cam.world_ray(u, v);
    let mut best: Option<(f64, usize)> = None;
    for (i, b) in boxes.iter().enumerate() {
        let (s, c) = b.yaw.sin_cos();
        let axes = [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]];
        let half = [b.size[0] / 2.0, b.size[2] / 2.0, b.size[1] / 2.0];
        let rel = [o[0] - b.center[0], o[1] - b.center[1], o[2] - b.center[2]];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut hit = true;
        for a in 0..3 {
            let po: f64 = (0..3).map(|k| rel[k] * axes[a][k]).sum();
            let pd: f64 = (0..3).map(|k| d[k] * axes[a][k]).sum();
            if pd.abs() < 1e-15 {
                if po.abs() > half[a] {
                    hit = false;
                }
                continue;
            }
            let (ta, tb) = ((-half[a] - po) / pd, (half[a] - po) / pd);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        if hit && t0 <= t1 && t1 > 0.0 {
            let t = if t0 > 0.0 { t0 } else { t1 };
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best.map(|(_, i)| i)
}
