//! Object-query decoder, box heads and set-matching loss.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::lift::LiftedKeysValues;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::param::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub queries: usize,
    pub layers: usize,
    pub classes: usize,
    pub lambda_cls: f64,
    pub lambda_box: f64,
    /// Predict velocity from the decoded states of two consecutive frames.
    pub velocity: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            queries: 16,
            layers: 2,
            classes: 3,
            lambda_cls: 1.0,
            lambda_box: 0.25,
            velocity: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.layers == 0 || self.classes == 0 {
            return Err(Error::Config("head queries, layers and classes must be >= 1".into()));
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_box >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Regression targets per box: center 3, size 3, yaw (sin, cos), then
    /// velocity 2 when enabled.
    pub fn box_dims(&self) -> usize {
        if self.velocity {
            10
        } else {
            8
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ffn: FeedForward,
}

/// Learned object queries refined by stacked pre-norm
/// {dense cross-attention, feed-forward} blocks.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub width: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        queries: usize,
        width: usize,
        kv_width: usize,
        layers: usize,
    ) -> Result<Self> {
        let q = store.add(format!("{name}.queries"), &[queries, width], Init::UniformFanIn)?;
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(DecoderLayer {
                    norm: LayerNorm::new(store, &format!("{p}.norm"), width)?,
                    cross: MultiHeadAttention::new(store, &format!("{p}.cross"), width, kv_width, width, 1)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), width, 2 * width)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries: q,
            layers,
            width,
        })
    }

    /// Returns the `O×width` decoded states and each layer's `O×tokens`
    /// attention weights.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        kv: &LiftedKeysValues,
    ) -> Result<(Var, Vec<Var>)> {
        if kv.count == 0 {
            return dim_err("decoder needs at least one key/value token");
        }
        let mut x = g.param(store, self.queries);
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let h = layer.norm.forward(g, store, x)?;
            let a = layer.cross.forward(g, store, h, kv.tokens)?;
            x = g.add(x, a.out)?;
            x = layer.ffn.forward(g, store, x)?;
            weights.extend(a.weights);
        }
        Ok((x, weights))
    }

    /// Value/output projections and FFN output maps of every layer.
    pub fn residual_paths(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.cross.v.weight,
                    l.cross.v.bias,
                    l.cross.o.weight,
                    l.cross.o.bias,
                    l.ffn.mlp.out.weight,
                    l.ffn.mlp.out.bias,
                ]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoxHeads {
    pub cls: Linear,
    pub center: Linear,
    pub reference: ParamId,
    pub size: Linear,
    pub yaw: Linear,
    pub velocity: Option<Linear>,
    pub classes: usize,
}

/// Graph outputs of the heads: `O×(classes+1)` logits (last column is
/// "no object") and `O×box_dims` box parameters.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub boxes: Var,
}

const YAW_EPS: f64 = 1e-9;

impl BoxHeads {
    /// `reference` holds the initial box centers, one row per query.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        cfg: &HeadConfig,
        reference: Tensor<T>,
    ) -> Result<Self> {
        if reference.shape() != [cfg.queries, 3] {
            return dim_err(format!("reference centers {:?}, expected [{}, 3]", reference.shape(), cfg.queries));
        }
        Ok(Self {
            cls: Linear::new(store, &format!("{name}.cls"), width, cfg.classes + 1)?,
            center: Linear::new(store, &format!("{name}.center"), width, 3)?,
            reference: store.add_tensor(format!("{name}.reference"), reference)?,
            size: Linear::new(store, &format!("{name}.size"), width, 3)?,
            yaw: Linear::new(store, &format!("{name}.yaw"), width, 2)?,
            velocity: if cfg.velocity {
                Some(Linear::new(store, &format!("{name}.velocity"), 2 * width, 2)?)
            } else {
                None
            },
            classes: cfg.classes,
        })
    }

    /// `next` is the decoded state of the following frame; required iff the
    /// velocity head exists.
    pub fn predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        decoded: Var,
        next: Option<Var>,
    ) -> Result<HeadOutput> {
        let logits = self.cls.forward(g, store, decoded)?;
        let offset = self.center.forward(g, store, decoded)?;
        let reference = g.param(store, self.reference);
        let center = g.add(reference, offset)?;
        let size = self.size.forward(g, store, decoded)?;
        let size = g.softplus(size)?;
        let yaw = self.yaw.forward(g, store, decoded)?;
        let yaw = g.normalize_rows(yaw, T::lit(YAW_EPS))?;
        let mut parts = vec![center, size, yaw];
        match (&self.velocity, next) {
            (Some(head), Some(next)) => {
                let both = g.concat_cols(&[decoded, next])?;
                parts.push(head.forward(g, store, both)?);
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Config("velocity head needs the next frame".into())),
            (None, Some(_)) => return Err(Error::Config("next frame given without a velocity head".into())),
        }
        let boxes = g.concat_cols(&parts)?;
        Ok(HeadOutput { logits, boxes })
    }
}

/// Ground-truth or decoded 3D box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3d<T> {
    pub center: [T; 3],
    pub size: [T; 3],
    pub yaw: T,
    pub velocity: [T; 2],
}

impl<T: Scalar> Box3d<T> {
    /// Regression target: center, size, sin/cos yaw, optional velocity.
    pub fn target(&self, velocity: bool) -> Vec<T> {
        let mut t = Vec::with_capacity(10);
        t.extend_from_slice(&self.center);
        t.extend_from_slice(&self.size);
        t.extend_from_slice(&[self.yaw.sin(), self.yaw.cos()]);
        if velocity {
            t.extend_from_slice(&self.velocity);
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject<T> {
    pub class: usize,
    pub bbox: Box3d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection<T> {
    pub class_logits: Vec<T>,
    pub bbox: Box3d<T>,
}

impl<T: Scalar> Detection<T> {
    /// Argmax over all columns; `classes` means "no object".
    pub fn label(&self) -> usize {
        argmax(&self.class_logits)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet<T> {
    pub detections: Vec<Detection<T>>,
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `atan2` mapped into `(−π, π]`.
pub fn yaw_from_pair<T: Scalar>(sin: T, cos: T) -> T {
    let y = sin.atan2(cos);
    if y <= -T::PI() {
        T::PI()
    } else {
        y
    }
}

/// Reads concrete detections off the graph.
pub fn decode_detections<T: Scalar>(g: &Graph<T>, out: &HeadOutput) -> Result<DetectionSet<T>> {
    let logits = g.value(out.logits);
    let boxes = g.value(out.boxes);
    let (o, _) = logits.dims2()?;
    let (ob, dims) = boxes.dims2()?;
    if o != ob || (dims != 8 && dims != 10) {
        return dim_err(format!("logits {:?} vs boxes {:?}", logits.shape(), boxes.shape()));
    }
    let detections = (0..o)
        .map(|i| {
            let b = boxes.row(i);
            Detection {
                class_logits: logits.row(i).to_vec(),
                bbox: Box3d {
                    center: [b[0], b[1], b[2]],
                    size: [b[3], b[4], b[5]],
                    yaw: yaw_from_pair(b[6], b[7]),
                    velocity: if dims == 10 { [b[8], b[9]] } else { [T::zero(); 2] },
                },
            }
        })
        .collect();
    Ok(DetectionSet { detections })
}

/// Minimum-cost assignment of every row to a distinct column of an
/// `n×m` cost matrix (`n ≤ m`). Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if n > m || cost.iter().any(|r| r.len() != m) {
        return dim_err(format!("hungarian needs a rectangular n×m cost with n ≤ m, got {n} rows"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("hungarian: non-finite cost".into()));
    }
    // Potentials u (rows), v (columns); p[j] is the row matched to column j,
    // with index 0 reserved as the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    Ok(cols)
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
    row[k] - lse
}

/// Matching cost `λ_cls·CE + λ_box·L1` of every (gt, query) pair.
pub fn matching_cost<T: Scalar>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gt: &[GtObject<T>],
    cfg: &HeadConfig,
) -> Result<Vec<Vec<f64>>> {
    let (o, k) = logits.dims2()?;
    let (_, dims) = boxes.dims2()?;
    let velocity = dims == 10;
    gt.iter()
        .map(|obj| {
            if obj.class >= k - 1 {
                return Err(Error::Config(format!("class {} out of range", obj.class)));
            }
            let target = obj.bbox.target(velocity);
            Ok((0..o)
                .map(|q| {
                    let row: Vec<f64> = logits.row(q).iter().map(|x| x.to_f64_lossy()).collect();
                    let ce = -log_softmax_at(&row, obj.class);
                    let l1: f64 = boxes
                        .row(q)
                        .iter()
                        .zip(&target)
                        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
                        .sum();
                    cfg.lambda_cls * ce + cfg.lambda_box * l1
                })
                .collect())
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MatchOutput {
    pub loss: Var,
    /// `(query, gt)` pairs in ascending query order.
    pub assignment: Vec<(usize, usize)>,
}

/// Set loss: `λ_cls · mean_q CE(q, target_q) + λ_box · Σ_matched L1 / max(|gt|, 1)`,
/// where unmatched queries target the "no object" class.
pub fn match_and_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &HeadOutput,
    gt: &[GtObject<T>],
    cfg: &HeadConfig,
) -> Result<MatchOutput> {
    let (o, k) = g.value(out.logits).dims2()?;
    if gt.len() > o {
        return Err(Error::Config(format!("{} objects exceed {o} queries", gt.len())));
    }
    let cost = matching_cost(g.value(out.logits), g.value(out.boxes), gt, cfg)?;
    let cols = hungarian(&cost)?;
    let mut assignment: Vec<(usize, usize)> = cols.iter().enumerate().map(|(j, &q)| (q, j)).collect();
    assignment.sort_unstable();
    let mut targets = vec![k - 1; o];
    for &(q, j) in &assignment {
        targets[q] = gt[j].class;
    }
    let ce = g.cross_entropy_rows(out.logits, &targets)?;
    let ce = g.mean(ce)?;
    let mut loss = g.scale(ce, T::lit(cfg.lambda_cls))?;
    if !assignment.is_empty() {
        let dims = g.shape(out.boxes)[1];
        let velocity = dims == 10;
        let rows: Vec<usize> = assignment.iter().map(|&(q, _)| q).collect();
        let picked = g.select_rows(out.boxes, &rows)?;
        let target: Vec<T> = assignment.iter().flat_map(|&(_, j)| gt[j].bbox.target(velocity)).collect();
        let target = g.constant(Tensor::new(vec![rows.len(), dims], target)?)?;
        let diff = g.sub(picked, target)?;
        let l1 = g.abs(diff)?;
        let l1 = g.sum(l1)?;
        let l1 = g.scale(l1, T::lit(cfg.lambda_box / gt.len() as f64))?;
        loss = g.add(loss, l1)?;
    }
    Ok(MatchOutput { loss, assignment })
}

/// Mean Euclidean center distance over matched pairs, and the fraction of
/// queries whose argmax equals their matching target.
pub fn match_metrics<T: Scalar>(
    dets: &DetectionSet<T>,
    gt: &[GtObject<T>],
    assignment: &[(usize, usize)],
    classes: usize,
) -> (f64, f64) {
    let box_err = if assignment.is_empty() {
        0.0
    } else {
        assignment
            .iter()
            .map(|&(q, j)| {
                let a = dets.detections[q].bbox.center;
                let b = gt[j].bbox.center;
                (0..3)
                    .map(|i| (a[i] - b[i]).to_f64_lossy().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / assignment.len() as f64
    };
    let mut targets = vec![classes; dets.detections.len()];
    for &(q, j) in assignment {
        targets[q] = gt[j].class;
    }
    let correct = dets
        .detections
        .iter()
        .zip(&targets)
        .filter(|(d, &t)| d.label() == t)
        .count();
    (box_err, correct as f64 / dets.detections.len().max(1) as f64)
}
