//! Seeded synthetic multi-camera scenes of flat-shaded boxes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRig, SceneRange, Vec3};
use crate::error::{Error, Result};
use crate::head::{Box3d, GtObject};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Placement attempts before scene generation gives up.
pub const MAX_ATTEMPTS: usize = 1000;

/// Box extents `(l, w, h)` per class.
pub const CLASS_SIZES: [[f64; 3]; 3] = [[1.6, 0.9, 0.8], [0.7, 0.7, 1.5], [1.0, 1.4, 0.6]];
/// RGB tint per class.
pub const CLASS_COLORS: [[f64; 3]; 3] = [[1.0, 0.35, 0.2], [0.25, 1.0, 0.35], [0.3, 0.4, 1.0]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub cameras: usize,
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
    pub objects: usize,
    pub seed: u64,
    pub range: SceneRange<f64>,
    /// Camera ring radius (m).
    pub ring_radius: f64,
    pub camera_height: f64,
    pub focal: f64,
    /// Object centers stay within this distance of the origin (m).
    pub placement_radius: f64,
    pub max_speed: f64,
    /// Time between the two rendered frames (s).
    pub dt: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            cameras: 6,
            image_size: [64, 64],
            objects: 3,
            seed: 0,
            range: SceneRange {
                x: [-12.0, 12.0],
                y: [-1.0, 4.0],
                z: [-12.0, 12.0],
                depth: [2.0, 18.0],
                depth_levels: 4,
            },
            ring_radius: 10.0,
            camera_height: 1.0,
            focal: 32.0,
            placement_radius: 4.5,
            max_speed: 1.0,
            dt: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras == 0 || self.image_size.contains(&0) {
            return Err(Error::Config("scene needs >= 1 camera and a non-empty image".into()));
        }
        for (name, v) in [
            ("ring_radius", self.ring_radius),
            ("focal", self.focal),
            ("placement_radius", self.placement_radius),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("scene {name} must be positive")));
            }
        }
        if !(self.max_speed >= 0.0 && self.dt >= 0.0) {
            return Err(Error::Config("scene max_speed and dt must be non-negative".into()));
        }
        self.range.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject<T> {
    pub gt: GtObject<T>,
    pub intensity: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub rig: CameraRig<T>,
    pub objects: Vec<SceneObject<T>>,
    pub seed: u64,
    pub dt: T,
}

/// `V` inward-looking cameras evenly spaced on a horizontal circle.
pub fn camera_ring<T: Scalar>(cfg: &SceneConfig) -> Result<CameraRig<T>> {
    let cams = (0..cfg.cameras)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / cfg.cameras as f64;
            let pos = [cfg.ring_radius * a.cos(), cfg.camera_height, cfg.ring_radius * a.sin()];
            Camera::look_at(
                pos.map(T::lit),
                [0.0, cfg.camera_height, 0.0].map(T::lit),
                T::lit(cfg.focal),
                cfg.image_size[0],
                cfg.image_size[1],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(cams, cfg.range.cast())
}

fn footprint_radius(size: [f64; 3]) -> f64 {
    0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt()
}

/// Places `cfg.objects` non-overlapping boxes resting on the ground plane.
pub fn generate_scene<T: Scalar>(cfg: &SceneConfig, seed: u64) -> Result<Scene<T>> {
    cfg.validate()?;
    let rig = camera_ring(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut placed: Vec<([f64; 2], f64)> = Vec::new();
    let mut objects = Vec::with_capacity(cfg.objects);
    let mut attempts = 0;
    while objects.len() < cfg.objects {
        if attempts == MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "placed {} of {} boxes in {MAX_ATTEMPTS} attempts",
                objects.len(),
                cfg.objects
            )));
        }
        attempts += 1;
        let class = objects.len() % CLASS_SIZES.len();
        let size = CLASS_SIZES[class];
        let r = cfg.placement_radius * rng.gen::<f64>().sqrt();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let xz = [r * a.cos(), r * a.sin()];
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = cfg.max_speed * rng.gen::<f64>();
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let rad = footprint_radius(size);
        let clear = placed
            .iter()
            .all(|(c, rr)| ((c[0] - xz[0]).powi(2) + (c[1] - xz[1]).powi(2)).sqrt() > rad + rr);
        let center = [xz[0], 0.5 * size[2], xz[1]];
        if !clear || !cfg.range.contains(center) {
            continue;
        }
        placed.push((xz, rad));
        let intensity = 0.5 + 0.5 * (objects.len() + 1) as f64 / cfg.objects as f64;
        objects.push(SceneObject {
            gt: GtObject {
                class,
                bbox: Box3d {
                    center: center.map(T::lit),
                    size: size.map(T::lit),
                    yaw: T::lit(yaw),
                    velocity: [speed * heading.cos(), speed * heading.sin()].map(T::lit),
                },
            },
            intensity: T::lit(intensity),
        });
    }
    Ok(Scene {
        rig,
        objects,
        seed,
        dt: T::lit(cfg.dt),
    })
}

impl<T: Scalar> Scene<T> {
    /// The same scene with every box advanced by `velocity · t`.
    pub fn advanced(&self, t: T) -> Self {
        let mut s = self.clone();
        for o in &mut s.objects {
            let b = &mut o.gt.bbox;
            b.center[0] += b.velocity[0] * t;
            b.center[2] += b.velocity[1] * t;
        }
        s
    }

    pub fn ground_truth(&self) -> Vec<GtObject<T>> {
        self.objects.iter().map(|o| o.gt).collect()
    }
}

/// Box-local axes: `l` along rotated X, `h` along Y, `w` along rotated Z.
fn box_axes<T: Scalar>(b: &Box3d<T>) -> [Vec3<T>; 3] {
    let (s, c) = b.yaw.sin_cos();
    [[c, T::zero(), -s], [T::zero(), T::one(), T::zero()], [s, T::zero(), c]]
}

fn half_extents<T: Scalar>(b: &Box3d<T>) -> Vec3<T> {
    let h = T::lit(0.5);
    [b.size[0] * h, b.size[2] * h, b.size[1] * h]
}

fn dot<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// The six faces as corner quads in world coordinates, counter-clockwise.
pub fn box_faces<T: Scalar>(b: &Box3d<T>) -> [[Vec3<T>; 4]; 6] {
    let ax = box_axes(b);
    let he = half_extents(b);
    let corner = |sx: T, sy: T, sz: T| {
        [0, 1, 2].map(|i| b.center[i] + ax[0][i] * he[0] * sx + ax[1][i] * he[1] * sy + ax[2][i] * he[2] * sz)
    };
    let (p, n) = (T::one(), -T::one());
    [
        [corner(p, n, n), corner(p, p, n), corner(p, p, p), corner(p, n, p)],
        [corner(n, n, n), corner(n, n, p), corner(n, p, p), corner(n, p, n)],
        [corner(n, p, n), corner(n, p, p), corner(p, p, p), corner(p, p, n)],
        [corner(n, n, n), corner(p, n, n), corner(p, n, p), corner(n, n, p)],
        [corner(n, n, p), corner(p, n, p), corner(p, p, p), corner(n, p, p)],
        [corner(n, n, n), corner(n, p, n), corner(p, p, n), corner(p, n, n)],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews<T> {
    /// Per view `H×W×3`, values in `[0, 1]`.
    pub images: Vec<Tensor<T>>,
    /// Per view, row-major object index of the visible surface.
    pub ids: Vec<Vec<Option<usize>>>,
}

fn cross2<T: Scalar>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Rasterizes one view with a per-pixel depth test at pixel centres.
fn render_view<T: Scalar>(cam: &Camera<T>, objects: &[SceneObject<T>]) -> Result<(Tensor<T>, Vec<Option<usize>>)> {
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![T::infinity(); w * h];
    let mut ids = vec![None; w * h];
    let origin = cam.center();
    let half = T::lit(0.5);
    for (oi, obj) in objects.iter().enumerate() {
        for face in box_faces(&obj.gt.bbox) {
            let proj = face.map(|p| cam.project(p));
            if proj.iter().any(|p| p.depth <= T::lit(crate::camera::MIN_DEPTH)) {
                continue;
            }
            let pts = proj.map(|p| [p.u, p.v]);
            let area = cross2(pts[0], pts[1], pts[2]) + cross2(pts[0], pts[2], pts[3]);
            if area == T::zero() {
                continue;
            }
            let sign = area.signum();
            let lo = |f: fn(&[T; 2]) -> T| pts.iter().map(f).fold(T::infinity(), T::min);
            let hi = |f: fn(&[T; 2]) -> T| pts.iter().map(f).fold(T::neg_infinity(), T::max);
            let clampi = |x: T, n: usize| x.max(T::zero()).min(T::from_usize_lossy(n)).to_f64_lossy() as usize;
            let (c0, c1) = (clampi(lo(|p| p[0]).floor(), w), clampi(hi(|p| p[0]).ceil(), w));
            let (r0, r1) = (clampi(lo(|p| p[1]).floor(), h), clampi(hi(|p| p[1]).ceil(), h));
            let e1: Vec3<T> = [0, 1, 2].map(|i| face[1][i] - face[0][i]);
            let e2: Vec3<T> = [0, 1, 2].map(|i| face[3][i] - face[0][i]);
            let normal = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            let to_face: Vec3<T> = [0, 1, 2].map(|i| face[0][i] - origin[i]);
            for r in r0..r1 {
                for c in c0..c1 {
                    let px = [T::from_usize_lossy(c) + half, T::from_usize_lossy(r) + half];
                    let inside = (0..4).all(|k| cross2(pts[k], pts[(k + 1) % 4], px) * sign >= T::zero());
                    if !inside {
                        continue;
                    }
                    let ray = cam.world_ray(px[0], px[1]);
                    let denom = dot(normal, ray);
                    if denom == T::zero() {
                        continue;
                    }
                    let t = dot(normal, to_face) / denom;
                    let idx = r * w + c;
                    if t > T::zero() && t < depth[idx] {
                        depth[idx] = t;
                        ids[idx] = Some(oi);
                    }
                }
            }
        }
    }
    let mut data = vec![T::zero(); w * h * 3];
    for (idx, id) in ids.iter().enumerate() {
        if let Some(oi) = *id {
            let obj = &objects[oi];
            let color = CLASS_COLORS[obj.gt.class % CLASS_COLORS.len()];
            for ch in 0..3 {
                data[idx * 3 + ch] = obj.intensity * T::lit(color[ch]);
            }
        }
    }
    Ok((Tensor::new(vec![h, w, 3], data)?, ids))
}

/// Renders every view; views are independent and run in parallel.
pub fn render<T: Scalar>(scene: &Scene<T>) -> Result<RenderedViews<T>> {
    let per_view = scene
        .rig
        .cameras
        .par_iter()
        .map(|cam| render_view(cam, &scene.objects))
        .collect::<Result<Vec<_>>>()?;
    let (images, ids) = per_view.into_iter().unzip();
    Ok(RenderedViews { images, ids })
}

/// Writes an `H×W×3` image as binary PPM with a `# config <hash>` comment.
pub fn write_ppm<T: Scalar, W: Write>(out: &mut W, image: &Tensor<T>, config_hash: &str) -> Result<()> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::Dimension(format!("ppm needs H×W×3, got {:?}", image.shape())));
    };
    write!(out, "P6\n# config {config_hash}\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}
