//! Registry of finite-difference gradient checks over every differentiable
//! computation, on tiny shapes with randomized parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, ToyBackbone};
use crate::bev::{build_bev_grid, project_anchors, BevConfig};
use crate::camera::{frustum_volume, CameraRig, SceneRange};
use crate::cluster::{cluster_assign, compute_clusters, ClusterConfig, Clustering, ClusteringOp, FeatureMap, Mvacon, PacaAttention};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::{match_and_loss, BoxHeads, Box3d, Decoder, GtObject, HeadConfig};
use crate::lift::{deformable_sample, BevEncoder, LiftMode, LiftedKeysValues, PetrLift, SampleLayout, SpatialCrossAttention};
use crate::model::{reference_lattice, Detector};
use crate::nn::LayerNorm;
use crate::param::{ParamId, ParamStore};
use crate::scene::{camera_ring, generate_scene, SceneConfig};
use crate::tensor::{grad_check, CoordSelection, GradCheckReport, Graph, Tensor, Var};

pub const DEFAULT_H: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub h: f64,
    pub tol: f64,
    /// Multiplies every analytic gradient; used to plant a wrong gradient.
    pub plant_scale: Option<f64>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            tol: DEFAULT_TOL,
            plant_scale: None,
        }
    }
}

/// A computation under test: builds its parameters, then checks them.
pub type CaseFn = fn(&CheckSettings) -> Result<GradCheckReport>;

#[derive(Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub run: CaseFn,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub passed: bool,
}

#[derive(Clone, Default)]
pub struct Registry {
    cases: Vec<GradCase>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &'static str, run: CaseFn) {
        self.cases.push(GradCase { name, run });
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.cases.iter().map(|c| c.name).collect()
    }

    pub fn run(&self, settings: &CheckSettings) -> Result<Vec<CaseResult>> {
        if self.cases.is_empty() {
            return Err(Error::Config("gradient-check registry is empty".into()));
        }
        self.cases
            .iter()
            .map(|c| {
                let report = (c.run)(settings)?;
                let passed = report.passes(settings.tol);
                Ok(CaseResult {
                    name: c.name,
                    report,
                    passed,
                })
            })
            .collect()
    }

    /// Every op and module of the model.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        let cases: [(&'static str, CaseFn); 32] = [
            ("tensor.matmul", op_matmul),
            ("tensor.elementwise", op_elementwise),
            ("tensor.row_broadcast", op_row_broadcast),
            ("tensor.softmax", op_softmax),
            ("tensor.masked_softmax", op_masked_softmax),
            ("tensor.attention", op_attention),
            ("tensor.cross_entropy", op_cross_entropy),
            ("tensor.layer_norm", op_layer_norm),
            ("tensor.normalize_rows", op_normalize_rows),
            ("tensor.activations", op_activations),
            ("tensor.reshape_slice_concat", op_structural),
            ("tensor.im2col", op_im2col),
            ("tensor.bilinear_sample", op_sample_points),
            ("tensor.group_weighted_sum", op_group_weighted_sum),
            ("cluster.assign_linear", cluster_linear),
            ("cluster.assign_mlp", cluster_mlp),
            ("cluster.assign_conv", cluster_conv),
            ("cluster.compute_clusters", cluster_compute),
            ("cluster.paca_attend", cluster_paca),
            ("cluster.mvacon_cross_level", cluster_mvacon),
            ("cluster.mvacon_lite", cluster_mvacon_lite),
            ("lift.petr_lift", lift_petr),
            ("lift.deformable_sample", lift_deformable),
            ("lift.spatial_cross_attention", lift_sca),
            ("lift.bev_encoder", lift_encoder),
            ("head.decoder", head_decoder),
            ("head.predict", head_predict),
            ("head.match_and_loss", head_match),
            ("scene.backbone", scene_backbone),
            ("model.end_to_end_petr", e2e_petr),
            ("model.end_to_end_bevformer", e2e_bevformer),
            ("model.end_to_end_lite_per_layer", e2e_lite_per_layer),
        ];
        for (n, f) in cases {
            r.register(n, f);
        }
        r
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Adds uniform noise to every parameter so no bias sits at a kink and no
/// zero-initialized head is degenerate.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64, amount: f64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v += r.gen_range(-amount..amount);
        }
    }
}

/// `Σ x ⊙ R` for a fixed random `R`, so every output element matters.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = rand_tensor(&mut r, g.shape(x), -1.0, 1.0);
    let w = g.constant(w)?;
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn check<F>(store: &mut ParamStore<f64>, ids: &[ParamId], s: &CheckSettings, sel: CoordSelection, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check(store, ids, s.h, sel, s.plant_scale, f)
}

fn all_ids(store: &ParamStore<f64>) -> Vec<ParamId> {
    store.ids().collect()
}

/// Parameters whose gradient is identically zero by construction: biases
/// feeding a softmax that is invariant to them.
fn without(store: &ParamStore<f64>, suffixes: &[&str]) -> Vec<ParamId> {
    store
        .ids()
        .filter(|&id| !suffixes.iter().any(|s| store.name(id).ends_with(s)))
        .collect()
}

/// Clustering biases (including the conv bias, linear up to the projection)
/// shift every token's logit for a cluster equally, and
/// key biases shift every score of a query equally.
const SHIFT_INVARIANT: [&str; 5] = [
    "cluster.bias",
    "cluster.conv.bias",
    "cluster.proj.bias",
    "cluster.fc2.bias",
    ".k.bias",
];

fn op_matmul(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(1);
    let mut st = ParamStore::new(0);
    let a = st.add_tensor("a", rand_tensor(&mut r, &[3, 4], -1.0, 1.0))?;
    let b = st.add_tensor("b", rand_tensor(&mut r, &[4, 2], -1.0, 1.0))?;
    check(&mut st, &[a, b], s, CoordSelection::All, |g, st| {
        let (x, y) = (g.param(st, a), g.param(st, b));
        let z = g.matmul(x, y)?;
        probe(g, z, 1)
    })
}

fn op_elementwise(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(2);
    let mut st = ParamStore::new(0);
    let a = st.add_tensor("a", rand_tensor(&mut r, &[3, 3], -1.0, 1.0))?;
    let b = st.add_tensor("b", rand_tensor(&mut r, &[3, 3], -1.0, 1.0))?;
    check(&mut st, &[a, b], s, CoordSelection::All, |g, st| {
        let (x, y) = (g.param(st, a), g.param(st, b));
        let t = g.transpose(x)?;
        let p = g.add(t, y)?;
        let q = g.sub(x, y)?;
        let m = g.mul(p, q)?;
        let m = g.scale(m, 1.7)?;
        let m = g.scale_rows(m, vec![0.5, -2.0, 1.5])?;
        let m = g.mean(m)?;
        let z = g.sum(q)?;
        g.add(m, z)
    })
}

fn op_row_broadcast(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(3);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("x", rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0))?;
    let b = st.add_tensor("b", rand_tensor(&mut r, &[4], -1.0, 1.0))?;
    let m = st.add_tensor("m", rand_tensor(&mut r, &[4], -1.0, 1.0))?;
    check(&mut st, &[x, b, m], s, CoordSelection::All, |g, st| {
        let (xv, bv, mv) = (g.param(st, x), g.param(st, b), g.param(st, m));
        let y = g.add_row(xv, bv)?;
        let y = g.mul_row(y, mv)?;
        probe(g, y, 3)
    })
}

fn op_softmax(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(4);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("x", rand_tensor(&mut r, &[3, 4, 2], -2.0, 2.0))?;
    check(&mut st, &[x], s, CoordSelection::All, |g, st| {
        let xv = g.param(st, x);
        let a = g.softmax(xv, 0)?;
        let b = g.softmax(xv, 1)?;
        let c = g.softmax(xv, 2)?;
        let ab = g.add(a, b)?;
        let abc = g.mul(ab, c)?;
        probe(g, abc, 4)
    })
}

fn op_attention(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(24);
    let mut st = ParamStore::new(0);
    let q = st.add_tensor("q", rand_tensor(&mut r, &[3, 4], -1.5, 1.5))?;
    let k = st.add_tensor("k", rand_tensor(&mut r, &[5, 4], -1.5, 1.5))?;
    let v = st.add_tensor("v", rand_tensor(&mut r, &[5, 4], -1.5, 1.5))?;
    check(&mut st, &[q, k, v], s, CoordSelection::All, |g, st| {
        let (qv, kv, vv) = (g.param(st, q), g.param(st, k), g.param(st, v));
        let (y, _) = g.attention(qv, kv, vv, 2, 0.8)?;
        probe(g, y, 24)
    })
}

fn op_masked_softmax(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(5);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("x", rand_tensor(&mut r, &[3, 4], -2.0, 2.0))?;
    let mask = [true, false, true, true, false, false, false, false, true, true, true, true];
    check(&mut st, &[x], s, CoordSelection::All, |g, st| {
        let xv = g.param(st, x);
        let y = g.masked_softmax_rows(xv, &mask)?;
        probe(g, y, 5)
    })
}

fn op_cross_entropy(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(6);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("x", rand_tensor(&mut r, &[4, 3], -2.0, 2.0))?;
    check(&mut st, &[x], s, CoordSelection::All, |g, st| {
        let xv = g.param(st, x);
        let ce = g.cross_entropy_rows(xv, &[0, 2, 1, 2])?;
        probe(g, ce, 6)
    })
}

fn op_layer_norm(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(7);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("x", rand_tensor(&mut r, &[3, 5], -2.0, 2.0))?;
    let gm = st.add_tensor("gamma", rand_tensor(&mut r, &[5], 0.5, 1.5))?;
    let bt = st.add_tensor("beta", rand_tensor(&mut r, &[5], -0.5, 0.5))?;
    check(&mut st, &[x, gm, bt], s, CoordSelection::All, |g, st| {
        let (xv, gv, bv) = (g.param(st, x), g.param(st, gm), g.param(st, bt));
        let y = g.layer_norm(xv, gv, bv, 1e-5)?;
        probe(g, y, 7)
    })
}

fn op_normalize_rows(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(8);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("x", rand_tensor(&mut r, &[4, 2], -2.0, 2.0))?;
    check(&mut st, &[x], s, CoordSelection::All, |g, st| {
        let xv = g.param(st, x);
        let y = g.normalize_rows(xv, 1e-9)?;
        probe(g, y, 8)
    })
}

fn op_activations(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(9);
    let mut st = ParamStore::new(0);
    // Kept away from the kinks at zero.
    let x = st.add_tensor(
        "x",
        Tensor::from_fn(&[3, 4], |_| {
            let v: f64 = r.gen_range(0.1..2.0);
            if r.gen::<bool>() {
                v
            } else {
                -v
            }
        }),
    )?;
    check(&mut st, &[x], s, CoordSelection::All, |g, st| {
        let xv = g.param(st, x);
        let a = g.relu(xv)?;
        let b = g.softplus(xv)?;
        let c = g.abs(xv)?;
        let ab = g.add(a, b)?;
        let abc = g.mul(ab, c)?;
        probe(g, abc, 9)
    })
}

fn op_structural(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(10);
    let mut st = ParamStore::new(0);
    let a = st.add_tensor("a", rand_tensor(&mut r, &[4, 6], -1.0, 1.0))?;
    let b = st.add_tensor("b", rand_tensor(&mut r, &[2, 6], -1.0, 1.0))?;
    check(&mut st, &[a, b], s, CoordSelection::All, |g, st| {
        let (av, bv) = (g.param(st, a), g.param(st, b));
        let rows = g.concat_rows(&[av, bv])?;
        let picked = g.select_rows(rows, &[5, 0, 0, 3])?;
        let left = g.slice_cols(picked, 1, 3)?;
        let right = g.slice_cols(picked, 4, 2)?;
        let cat = g.concat_cols(&[right, left])?;
        let flat = g.reshape(cat, &[2, 10])?;
        probe(g, flat, 10)
    })
}

fn op_im2col(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(11);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("x", rand_tensor(&mut r, &[5, 4, 2], -1.0, 1.0))?;
    check(&mut st, &[x], s, CoordSelection::All, |g, st| {
        let xv = g.param(st, x);
        let a = g.im2col(xv, 3, 2, 1)?;
        let b = g.im2col(xv, 2, 1, 0)?;
        let pa = probe(g, a, 11)?;
        let pb = probe(g, b, 12)?;
        g.add(pa, pb)
    })
}

fn op_sample_points(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(12);
    let mut st = ParamStore::new(0);
    let map = st.add_tensor("map", rand_tensor(&mut r, &[4, 5, 3], -1.0, 1.0))?;
    // Includes partially out-of-bounds footprints; avoids integer coordinates.
    let coords = st.add_tensor(
        "coords",
        Tensor::from_fn(&[8, 2], |i| {
            let base: f64 = r.gen_range(-0.9..4.9);
            let frac = base - base.floor();
            if (0.05..0.95).contains(&frac) {
                base
            } else {
                base.floor() + 0.5
            }
            .min(if i % 2 == 0 { 4.9 } else { 3.9 })
        }),
    )?;
    check(&mut st, &[map, coords], s, CoordSelection::All, |g, st| {
        let (m, c) = (g.param(st, map), g.param(st, coords));
        let y = g.sample_points(m, c)?;
        probe(g, y, 12)
    })
}

fn op_group_weighted_sum(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(13);
    let mut st = ParamStore::new(0);
    let x = st.add_tensor("samples", rand_tensor(&mut r, &[6, 3], -1.0, 1.0))?;
    let w = st.add_tensor("weights", rand_tensor(&mut r, &[2, 3], -1.0, 1.0))?;
    check(&mut st, &[x, w], s, CoordSelection::All, |g, st| {
        let (xv, wv) = (g.param(st, x), g.param(st, w));
        let y = g.group_weighted_sum(xv, wv)?;
        probe(g, y, 13)
    })
}

fn tokens_param(st: &mut ParamStore<f64>, r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Result<ParamId> {
    st.add_tensor("tokens", rand_tensor(r, &[h * w, c], -1.0, 1.0))
}

fn cluster_case(s: &CheckSettings, op: ClusteringOp, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut st = ParamStore::new(seed);
    let (h, w, c, m) = (3, 4, 4, 3);
    let f = tokens_param(&mut st, &mut r, h, w, c)?;
    let cl = Clustering::new(&mut st, "cluster", op, c, m)?;
    jitter(&mut st, seed, 0.3);
    let ids = without(&st, &SHIFT_INVARIANT);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let t = g.param(st, f);
        let a = cluster_assign(g, st, &cl, t, Some((h, w)))?;
        probe(g, a, seed)
    })
}

fn cluster_linear(s: &CheckSettings) -> Result<GradCheckReport> {
    cluster_case(s, ClusteringOp::Linear, 21)
}

fn cluster_mlp(s: &CheckSettings) -> Result<GradCheckReport> {
    cluster_case(s, ClusteringOp::Mlp, 22)
}

fn cluster_conv(s: &CheckSettings) -> Result<GradCheckReport> {
    cluster_case(s, ClusteringOp::Conv, 23)
}

fn cluster_compute(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(24);
    let mut st = ParamStore::new(24);
    let f = tokens_param(&mut st, &mut r, 2, 3, 4)?;
    let a = st.add_tensor("assign", rand_tensor(&mut r, &[6, 3], 0.05, 1.0))?;
    let ln = LayerNorm::new(&mut st, "norm", 4)?;
    jitter(&mut st, 24, 0.3);
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let (t, av) = (g.param(st, f), g.param(st, a));
        let (z, _) = compute_clusters(g, st, t, av, &ln)?;
        probe(g, z, 24)
    })
}

fn cluster_paca(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(25);
    let mut st = ParamStore::new(25);
    let f = tokens_param(&mut st, &mut r, 2, 3, 4)?;
    let z = st.add_tensor("clusters", rand_tensor(&mut r, &[3, 4], -1.0, 1.0))?;
    let paca = PacaAttention::new(&mut st, "paca", 4, 2)?;
    jitter(&mut st, 25, 0.3);
    let ids = without(&st, &SHIFT_INVARIANT);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let (t, zv) = (g.param(st, f), g.param(st, z));
        let y = paca.attend(g, st, t, zv)?;
        probe(g, y, 25)
    })
}

fn pyramid_params(st: &mut ParamStore<f64>, r: &mut ChaCha8Rng, sizes: &[(usize, usize)], c: usize, tag: &str) -> Result<Vec<ParamId>> {
    sizes
        .iter()
        .enumerate()
        .map(|(l, &(h, w))| st.add_tensor(format!("{tag}.map{l}"), rand_tensor(r, &[h, w, c], -1.0, 1.0)))
        .collect()
}

fn bind_pyramid(g: &mut Graph<f64>, st: &ParamStore<f64>, ids: &[ParamId]) -> Result<Vec<FeatureMap>> {
    ids.iter()
        .map(|&id| {
            let v = g.param(st, id);
            FeatureMap::new(g, v)
        })
        .collect()
}

/// Data-input pyramids recorded as constants: their gradients are covered
/// by the sampling checks, and weakly sampled pixels would only measure
/// rounding noise.
fn const_pyramid(g: &mut Graph<f64>, maps: &[Tensor<f64>]) -> Result<Vec<FeatureMap>> {
    maps.iter()
        .map(|m| {
            let v = g.constant(m.clone())?;
            FeatureMap::new(g, v)
        })
        .collect()
}

fn rand_pyramid(r: &mut ChaCha8Rng, sizes: &[(usize, usize)], c: usize) -> Vec<Tensor<f64>> {
    sizes.iter().map(|&(h, w)| rand_tensor(r, &[h, w, c], -1.0, 1.0)).collect()
}

fn mvacon_case(s: &CheckSettings, cross_level: bool, seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut st = ParamStore::new(seed);
    let maps = pyramid_params(&mut st, &mut r, &[(4, 4), (2, 2)], 4, "view")?;
    let cfg = ClusterConfig {
        clusters: 3,
        heads: 2,
        clustering_op: ClusteringOp::Conv,
        cross_level,
        layers: 1,
    };
    let m = Mvacon::new(&mut st, "mvacon", &cfg, 4, 2)?;
    jitter(&mut st, seed, 0.3);
    let ids = without(&st, &SHIFT_INVARIANT);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let p = bind_pyramid(g, st, &maps)?;
        let (out, _) = m.contextualize_view(g, st, &p)?;
        let a = probe(g, out[0].var, seed)?;
        let b = probe(g, out[1].var, seed + 1)?;
        g.add(a, b)
    })
}

fn cluster_mvacon(s: &CheckSettings) -> Result<GradCheckReport> {
    mvacon_case(s, true, 26)
}

fn cluster_mvacon_lite(s: &CheckSettings) -> Result<GradCheckReport> {
    mvacon_case(s, false, 27)
}

/// Two cameras on a ring looking at the origin.
fn tiny_rig(image: usize) -> Result<CameraRig<f64>> {
    let cfg = SceneConfig {
        cameras: 2,
        image_size: [image, image],
        focal: image as f64 / 2.0,
        ring_radius: 6.0,
        ..SceneConfig::default()
    };
    camera_ring(&cfg)
}

fn tiny_bev() -> BevConfig {
    BevConfig {
        nx: 4,
        nz: 4,
        x_bounds: [-2.0, 2.0],
        z_bounds: [-2.0, 2.0],
        pillar_count: 2,
        y_bounds: [0.0, 2.0],
    }
}

fn lift_petr(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(31);
    let mut st = ParamStore::new(31);
    let rig = tiny_rig(16)?;
    let range = SceneRange { depth_levels: 2, ..rig.range.clone() };
    let vols = rig
        .cameras
        .iter()
        .map(|c| frustum_volume(c, 2, 3, &range))
        .collect::<Result<Vec<_>>>()?;
    let maps = (0..2)
        .map(|v| st.add_tensor(format!("view{v}"), rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let petr = PetrLift::new(&mut st, "petr", 4, 5, 2)?;
    jitter(&mut st, 31, 0.3);
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let views = bind_pyramid(g, st, &maps)?;
        let kv = petr.lift(g, st, &views, &vols)?;
        probe(g, kv.tokens, 31)
    })
}

fn lift_deformable(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(32);
    let mut st = ParamStore::new(32);
    let rig = tiny_rig(16)?;
    let grid = build_bev_grid::<f64>(&tiny_bev())?;
    let levels = [(8, 8), (4, 4)];
    let table = project_anchors(&grid, &rig, &levels)?;
    let maps = pyramid_params(&mut st, &mut r, &levels, 3, "view")?;
    let k = levels.len() * 2 * 2;
    let off = st.add_tensor("offsets", rand_tensor(&mut r, &[16, 2 * k], -0.7, 0.7))?;
    let logit = st.add_tensor("logits", rand_tensor(&mut r, &[16, k], -1.0, 1.0))?;
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let p = bind_pyramid(g, st, &maps)?;
        let (o, l) = (g.param(st, off), g.param(st, logit));
        let ds = deformable_sample(g, &p, &table, 0, o, l, 2)?;
        probe(g, ds.out, 32)
    })
}

fn lift_sca(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(33);
    let mut st = ParamStore::new(33);
    let rig = tiny_rig(16)?;
    let grid = build_bev_grid::<f64>(&tiny_bev())?;
    let levels = [(8, 8), (4, 4)];
    let table = project_anchors(&grid, &rig, &levels)?;
    let v0 = rand_pyramid(&mut r, &levels, 4);
    let v1 = rand_pyramid(&mut r, &levels, 4);
    let q = st.add_tensor("queries", rand_tensor(&mut r, &[16, 4], -1.0, 1.0))?;
    let layout = SampleLayout {
        levels: 2,
        pillars: 2,
        points: 2,
    };
    let sca = SpatialCrossAttention::new(&mut st, "sca", 4, layout)?;
    jitter(&mut st, 33, 0.2);
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::Sample { count: 150, seed: 33 }, |g, st| {
        let views = vec![const_pyramid(g, &v0)?, const_pyramid(g, &v1)?];
        let qv = g.param(st, q);
        let (out, _) = sca.forward(g, st, qv, &views, &table)?;
        probe(g, out, 33)
    })
}

fn lift_encoder(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(34);
    let mut st = ParamStore::new(34);
    let rig = tiny_rig(16)?;
    let grid = build_bev_grid::<f64>(&tiny_bev())?;
    let levels = [(8, 8)];
    let table = project_anchors(&grid, &rig, &levels)?;
    let v0 = rand_pyramid(&mut r, &levels, 4);
    let v1 = rand_pyramid(&mut r, &levels, 4);
    let layout = SampleLayout {
        levels: 1,
        pillars: 2,
        points: 2,
    };
    let enc = BevEncoder::new(&mut st, "encoder", 16, 4, 2, layout)?;
    jitter(&mut st, 34, 0.2);
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::Sample { count: 150, seed: 34 }, |g, st| {
        let views = vec![const_pyramid(g, &v0)?, const_pyramid(g, &v1)?];
        let per_layer = vec![views.clone(), views];
        let (kv, _) = enc.forward(g, st, &per_layer, &table)?;
        probe(g, kv.tokens, 34)
    })
}

fn head_decoder(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(41);
    let mut st = ParamStore::new(41);
    let kv = st.add_tensor("kv", rand_tensor(&mut r, &[7, 3], -1.0, 1.0))?;
    let dec = Decoder::new(&mut st, "decoder", 4, 4, 3, 2)?;
    jitter(&mut st, 41, 0.3);
    let ids = without(&st, &SHIFT_INVARIANT);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let tokens = g.param(st, kv);
        let lifted = LiftedKeysValues {
            tokens,
            count: 7,
            width: 3,
        };
        let (x, _) = dec.decode(g, st, &lifted)?;
        probe(g, x, 41)
    })
}

fn tiny_head_cfg() -> HeadConfig {
    HeadConfig {
        queries: 5,
        layers: 1,
        classes: 3,
        ..HeadConfig::default()
    }
}

fn head_predict(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(42);
    let mut st = ParamStore::new(42);
    let cfg = tiny_head_cfg();
    let d0 = st.add_tensor("decoded", rand_tensor(&mut r, &[5, 4], -1.0, 1.0))?;
    let d1 = st.add_tensor("decoded_next", rand_tensor(&mut r, &[5, 4], -1.0, 1.0))?;
    let heads = BoxHeads::new(&mut st, "heads", 4, &cfg, reference_lattice(5, &tiny_bev()))?;
    jitter(&mut st, 42, 0.3);
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let (a, b) = (g.param(st, d0), g.param(st, d1));
        let out = heads.predict(g, st, a, Some(b))?;
        let p = probe(g, out.logits, 42)?;
        let q = probe(g, out.boxes, 43)?;
        g.add(p, q)
    })
}

/// Ground truth kept well away from the predictions so no L1 term sits at
/// its kink.
fn tiny_gt() -> Vec<GtObject<f64>> {
    let b = |x: f64, z: f64, yaw: f64| Box3d {
        center: [x, 0.37, z],
        size: [2.1, 1.9, 2.3],
        yaw,
        velocity: [3.3, -2.9],
    };
    vec![
        GtObject { class: 1, bbox: b(1.3, -0.4, 0.3) },
        GtObject { class: 0, bbox: b(-0.8, 1.1, -2.0) },
    ]
}

fn head_match(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(43);
    let mut st = ParamStore::new(43);
    let cfg = tiny_head_cfg();
    let d0 = st.add_tensor("decoded", rand_tensor(&mut r, &[5, 4], -1.0, 1.0))?;
    let d1 = st.add_tensor("decoded_next", rand_tensor(&mut r, &[5, 4], -1.0, 1.0))?;
    let heads = BoxHeads::new(&mut st, "heads", 4, &cfg, reference_lattice(5, &tiny_bev()))?;
    jitter(&mut st, 43, 0.3);
    let gt = tiny_gt();
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::All, |g, st| {
        let (a, b) = (g.param(st, d0), g.param(st, d1));
        let out = heads.predict(g, st, a, Some(b))?;
        Ok(match_and_loss(g, &out, &gt, &cfg)?.loss)
    })
}

fn scene_backbone(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut r = rng(51);
    let mut st = ParamStore::new(51);
    let image = st.add_tensor("image", rand_tensor(&mut r, &[16, 16, 3], 0.0, 1.0))?;
    let bb = ToyBackbone::new(&mut st, "backbone", 3, &BackboneConfig { channels: 4, levels: 3 })?;
    jitter(&mut st, 51, 0.3);
    let ids = all_ids(&st);
    check(&mut st, &ids, s, CoordSelection::Sample { count: 150, seed: 51 }, |g, st| {
        let im = g.param(st, image);
        let maps = bb.forward(g, st, im)?;
        let mut acc = probe(g, maps[0].var, 51)?;
        for (i, m) in maps.iter().enumerate().skip(1) {
            let p = probe(g, m.var, 51 + i as u64)?;
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    })
}

/// Smallest full configuration: 2 cameras of 32×32, one pyramid level of
/// width 8, 2×2 BEV.
pub fn tiny_run_config(mode: LiftMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scene.cameras = 2;
    cfg.scene.image_size = [32, 32];
    cfg.scene.focal = 16.0;
    cfg.scene.objects = 3;
    // One pyramid level and a 2x2 BEV keep per-parameter gradients well
    // above the finite-difference noise floor.
    cfg.model.backbone = BackboneConfig { channels: 8, levels: 1 };
    cfg.model.bev = BevConfig {
        nx: 2,
        nz: 2,
        pillar_count: 1,
        ..tiny_bev()
    };
    cfg.model.mvacon.clusters = 3;
    cfg.model.mvacon.heads = 2;
    cfg.model.mvacon.layers = 2;
    cfg.model.lift.mode = mode;
    cfg.model.lift.layers = 2;
    cfg.model.lift.sample_points = 1;
    cfg.model.lift.d = 4;
    cfg.model.lift.depth_levels = 2;
    cfg.model.head = tiny_head_cfg();
    cfg.model.head.queries = 4;
    cfg
}

fn end_to_end(s: &CheckSettings, cfg: &RunConfig, seed: u64) -> Result<GradCheckReport> {
    // Random images: rendered scenes are mostly flat background, which
    // leaves many parameters with vanishing gradients.
    let scene = generate_scene::<f64>(&cfg.scene, cfg.scene.seed)?;
    let mut r = rng(seed);
    let [w, h] = cfg.scene.image_size;
    let frames: Vec<Vec<Tensor<f64>>> = (0..2)
        .map(|_| (0..cfg.scene.cameras).map(|_| rand_tensor(&mut r, &[h, w, 3], 0.0, 1.0)).collect())
        .collect();
    let mut st = ParamStore::new(seed);
    let det = Detector::new(&mut st, &cfg.model, 3)?;
    let geom = det.geometry(&scene.rig)?;
    jitter(&mut st, seed, 0.5);
    let gt = scene.ground_truth();
    let ids = without(&st, &SHIFT_INVARIANT);
    check(&mut st, &ids, s, CoordSelection::Sample { count: 50, seed }, |g, st| {
        Ok(det.loss(g, st, &frames, &geom, &gt)?.1.loss)
    })
}

fn e2e_petr(s: &CheckSettings) -> Result<GradCheckReport> {
    end_to_end(s, &tiny_run_config(LiftMode::Petr), 61)
}

fn e2e_bevformer(s: &CheckSettings) -> Result<GradCheckReport> {
    end_to_end(s, &tiny_run_config(LiftMode::Bevformer), 62)
}

fn e2e_lite_per_layer(s: &CheckSettings) -> Result<GradCheckReport> {
    let mut cfg = tiny_run_config(LiftMode::Bevformer);
    cfg.model.mvacon.cross_level = false;
    cfg.model.mvacon.clustering_op = ClusteringOp::Linear;
    cfg.model.lift.mvacon_per_layer = true;
    end_to_end(s, &cfg, 63)
}
