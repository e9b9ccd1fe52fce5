#![allow(dead_code)]

use mvacon_core::camera::{Camera, CameraRig, SceneRange};
use mvacon_core::cluster::FeatureMap;
use mvacon_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Adds uniform noise to every parameter so zero-initialized weights and
/// unit layer-norm scales stop being special.
pub fn perturb(store: &mut mvacon_core::ParamStore<f64>, r: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v += r.gen_range(-amount..amount);
        }
    }
}

pub fn map_on(g: &mut Graph<f64>, t: Tensor<f64>) -> FeatureMap {
    let v = g.constant(t).unwrap();
    FeatureMap::new(g, v).unwrap()
}

pub fn leaf_map(g: &mut Graph<f64>, t: Tensor<f64>) -> FeatureMap {
    let v = g.leaf(t).unwrap();
    FeatureMap::new(g, v).unwrap()
}

pub fn value(g: &Graph<f64>, v: Var) -> Tensor<f64> {
    g.value(v).clone()
}

pub fn range() -> SceneRange<f64> {
    SceneRange {
        x: [-12.0, 12.0],
        y: [-1.0, 4.0],
        z: [-12.0, 12.0],
        depth: [2.0, 18.0],
        depth_levels: 4,
    }
}

/// Three cameras looking at the origin from different sides.
pub fn small_rig(w: usize, h: usize) -> CameraRig<f64> {
    let cams = [[0.0, 1.0, -6.0], [6.0, 1.0, 0.5], [-4.0, 1.5, -4.0]]
        .iter()
        .map(|&eye| Camera::look_at(eye, [0.0, 1.0, 0.0], w as f64 / 2.0, w, h).unwrap())
        .collect();
    CameraRig::new(cams, range()).unwrap()
}
