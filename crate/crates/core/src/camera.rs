//! Pinhole cameras, multi-camera rigs and the frustum position volume.
//!
//! Conventions: the camera frame is x right, y down, z forward. The world
//! frame has Y up; the ground plane is X–Z. `pose` maps world to camera.
//! Continuous pixel coordinates put pixel `j` on `[j, j+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Vec3<T> = [T; 3];
pub type Mat3<T> = [[T; 3]; 3];

/// Depth floor below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;
const PIXEL_CLAMP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    k: Mat3<T>,
    rotation: Mat3<T>,
    translation: Vec3<T>,
    pub width: usize,
    pub height: usize,
}

fn orthonormal_tol<T: Scalar>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(1e3))
}

pub(crate) fn mat_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn mat_t_vec<T: Scalar>(m: &Mat3<T>, v: Vec3<T>) -> Vec3<T> {
    [0, 1, 2].map(|c| m[0][c] * v[0] + m[1][c] * v[1] + m[2][c] * v[2])
}

pub(crate) fn cross<T: Scalar>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize3<T: Scalar>(a: Vec3<T>) -> Vec3<T> {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|x| x / n)
}

fn det3<T: Scalar>(m: &Mat3<T>) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl<T: Scalar> Camera<T> {
    /// Validates intrinsics (upper-triangular, positive focals, unit `K[2][2]`)
    /// and that the rotation is orthonormal with determinant +1.
    pub fn new(k: Mat3<T>, rotation: Mat3<T>, translation: Vec3<T>, width: usize, height: usize) -> Result<Self> {
        let zero = T::zero();
        if k[1][0] != zero || k[2][0] != zero || k[2][1] != zero {
            return Err(Error::Construction("intrinsics must be upper-triangular".into()));
        }
        if !(k[0][0] > zero && k[1][1] > zero) || k[2][2] != T::one() {
            return Err(Error::Construction("degenerate intrinsics".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Construction("image size must be positive".into()));
        }
        let tol = orthonormal_tol::<T>();
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).map(|c| rotation[i][c] * rotation[j][c]).sum::<T>();
                let want = if i == j { T::one() } else { zero };
                if (dot - want).abs() > tol {
                    return Err(Error::Construction("rotation is not orthonormal".into()));
                }
            }
        }
        if (det3(&rotation) - T::one()).abs() > tol {
            return Err(Error::Construction("rotation determinant must be +1".into()));
        }
        if k.iter().flatten().chain(rotation.iter().flatten()).chain(&translation).any(|x| !x.is_finite()) {
            return Err(Error::Construction("non-finite camera parameters".into()));
        }
        Ok(Self {
            k,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Builds from a row-major 4×4 world→camera transform.
    pub fn from_matrix(k: Mat3<T>, pose: [[T; 4]; 4], width: usize, height: usize) -> Result<Self> {
        let last = pose[3];
        if last != [T::zero(), T::zero(), T::zero(), T::one()] {
            return Err(Error::Construction("pose last row must be [0,0,0,1]".into()));
        }
        let rotation = [0, 1, 2].map(|r| [pose[r][0], pose[r][1], pose[r][2]]);
        let translation = [pose[0][3], pose[1][3], pose[2][3]];
        Self::new(k, rotation, translation, width, height)
    }

    /// Camera at `position` with its optical axis towards `target`; image
    /// "down" is aligned with world −Y as far as possible.
    pub fn look_at(
        position: Vec3<T>,
        target: Vec3<T>,
        focal: T,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = normalize3([0, 1, 2].map(|i| target[i] - position[i]));
        let down = [T::zero(), -T::one(), T::zero()];
        let right = normalize3(cross(down, forward));
        let down = cross(forward, right);
        let rotation = [right, down, forward];
        let translation = mat_vec(&rotation, position).map(|x| -x);
        let half = T::lit(0.5);
        let k = [
            [focal, T::zero(), T::from_usize_lossy(width) * half],
            [T::zero(), focal, T::from_usize_lossy(height) * half],
            [T::zero(), T::zero(), T::one()],
        ];
        Self::new(k, rotation, translation, width, height)
    }

    pub fn intrinsics(&self) -> &Mat3<T> {
        &self.k
    }

    pub fn rotation(&self) -> &Mat3<T> {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3<T> {
        self.translation
    }

    /// Row-major world→camera transform.
    pub fn pose_matrix(&self) -> [[T; 4]; 4] {
        let r = &self.rotation;
        let t = self.translation;
        let (z, o) = (T::zero(), T::one());
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [z, z, z, o],
        ]
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        mat_t_vec(&self.rotation, self.translation).map(|x| -x)
    }

    /// Optical axis in world coordinates.
    pub fn forward(&self) -> Vec3<T> {
        self.rotation[2]
    }

    pub fn world_to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        let r = mat_vec(&self.rotation, p);
        [0, 1, 2].map(|i| r[i] + self.translation[i])
    }

    pub fn camera_to_world(&self, pc: Vec3<T>) -> Vec3<T> {
        mat_t_vec(&self.rotation, [0, 1, 2].map(|i| pc[i] - self.translation[i]))
    }

    pub fn project(&self, p_world: Vec3<T>) -> Projection<T> {
        let pc = self.world_to_camera(p_world);
        let depth = pc[2];
        let floor = T::lit(MIN_DEPTH);
        let z = depth.max(floor);
        let clamp = T::lit(PIXEL_CLAMP);
        let u = (self.k[0][0] * pc[0] / z + self.k[0][1] * pc[1] / z + self.k[0][2]).max(-clamp).min(clamp);
        let v = (self.k[1][1] * pc[1] / z + self.k[1][2]).max(-clamp).min(clamp);
        let visible = depth > floor
            && u >= T::zero()
            && v >= T::zero()
            && u < T::from_usize_lossy(self.width)
            && v < T::from_usize_lossy(self.height);
        Projection { u, v, depth, visible }
    }

    /// Camera-frame ray `K⁻¹ [u, v, 1]` (unit depth).
    pub fn ray(&self, u: T, v: T) -> Vec3<T> {
        let k = &self.k;
        let y = (v - k[1][2]) / k[1][1];
        let x = (u - k[0][2] - k[0][1] * y) / k[0][0];
        [x, y, T::one()]
    }

    /// World-frame direction of [`ray`](Self::ray).
    pub fn world_ray(&self, u: T, v: T) -> Vec3<T> {
        mat_t_vec(&self.rotation, self.ray(u, v))
    }

    /// World point at pixel `(u, v)` and camera depth `depth`.
    pub fn back_project(&self, u: T, v: T, depth: T) -> Vec3<T> {
        self.camera_to_world(self.ray(u, v).map(|x| x * depth))
    }
}

/// Axis-aligned world box used to normalize positions, plus the depth
/// discretization of the frustum volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRange<T> {
    pub x: [T; 2],
    pub y: [T; 2],
    pub z: [T; 2],
    pub depth: [T; 2],
    #[serde(default = "default_depth_levels")]
    pub depth_levels: usize,
}

fn default_depth_levels() -> usize {
    4
}

impl<T: Scalar> SceneRange<T> {
    pub fn validate(&self) -> Result<()> {
        for (axis, b) in [("x", self.x), ("y", self.y), ("z", self.z), ("depth", self.depth)] {
            if !(b[1] > b[0]) {
                return Err(Error::Config(format!("range {axis}: max must exceed min")));
            }
        }
        if self.depth[0] <= T::zero() {
            return Err(Error::Config("range depth must be positive".into()));
        }
        if self.depth_levels == 0 {
            return Err(Error::Config("depth_levels must be >= 1".into()));
        }
        Ok(())
    }

    /// Maps a world point into the unit cube spanned by the range.
    pub fn normalize(&self, p: Vec3<T>) -> Vec3<T> {
        let b = [self.x, self.y, self.z];
        [0, 1, 2].map(|i| (p[i] - b[i][0]) / (b[i][1] - b[i][0]))
    }

    /// Centres of `depth_levels` equal sub-intervals of the depth span.
    pub fn depth_bins(&self) -> Vec<T> {
        let d = T::from_usize_lossy(self.depth_levels);
        let step = (self.depth[1] - self.depth[0]) / d;
        (0..self.depth_levels)
            .map(|k| self.depth[0] + (T::from_usize_lossy(k) + T::lit(0.5)) * step)
            .collect()
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        [self.x, self.y, self.z]
            .iter()
            .zip(p)
            .all(|(b, v)| v >= b[0] && v <= b[1])
    }

    pub fn cast<U: Scalar>(&self) -> SceneRange<U> {
        let c = |a: [T; 2]| a.map(|v| U::lit(v.to_f64_lossy()));
        SceneRange {
            x: c(self.x),
            y: c(self.y),
            z: c(self.z),
            depth: c(self.depth),
            depth_levels: self.depth_levels,
        }
    }
}

/// Image-pixel centre of feature cell `(row, col)` on an `h×w` map.
pub fn cell_center<T: Scalar>(cam: &Camera<T>, h: usize, w: usize, row: usize, col: usize) -> (T, T) {
    let half = T::lit(0.5);
    let sx = T::from_usize_lossy(cam.width) / T::from_usize_lossy(w);
    let sy = T::from_usize_lossy(cam.height) / T::from_usize_lossy(h);
    (
        (T::from_usize_lossy(col) + half) * sx,
        (T::from_usize_lossy(row) + half) * sy,
    )
}

/// Per feature cell and depth bin, the back-projected world point normalized
/// by `range` in homogeneous form: an `h×w×(4·D)` tensor, channels
/// `(x, y, z, 1)` per bin, bins in increasing depth.
pub fn frustum_volume<T: Scalar>(cam: &Camera<T>, h: usize, w: usize, range: &SceneRange<T>) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(Error::Construction("frustum volume needs h, w >= 1".into()));
    }
    range.validate()?;
    let bins = range.depth_bins();
    let ch = 4 * bins.len();
    let mut data = Vec::with_capacity(h * w * ch);
    for row in 0..h {
        for col in 0..w {
            let (u, v) = cell_center(cam, h, w, row, col);
            for &d in &bins {
                let n = range.normalize(cam.back_project(u, v, d));
                data.extend_from_slice(&[n[0], n[1], n[2], T::one()]);
            }
        }
    }
    Tensor::new(vec![h, w, ch], data)?.ensure_finite("frustum_volume")
}

/// Cameras sharing one scene range.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig<T> {
    pub cameras: Vec<Camera<T>>,
    pub range: SceneRange<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "T")]
    t: Vec<f64>,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigRecord {
    cameras: Vec<CameraRecord>,
    range: SceneRange<f64>,
}

impl<T: Scalar> CameraRig<T> {
    pub fn new(cameras: Vec<Camera<T>>, range: SceneRange<T>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Config("rig needs at least one camera".into()));
        }
        range.validate()?;
        Ok(Self { cameras, range })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Parses `{"cameras":[{"K":[9],"T":[16],"width","height"}],"range":{..}}`
    /// with row-major matrices.
    pub fn from_json(text: &str) -> Result<Self> {
        let rec: RigRecord = serde_json::from_str(text)?;
        let cams = rec
            .cameras
            .iter()
            .map(|c| {
                if c.k.len() != 9 || c.t.len() != 16 {
                    return Err(Error::Config("K needs 9 values and T needs 16".into()));
                }
                let k = [0, 1, 2].map(|r| [0, 1, 2].map(|col| T::lit(c.k[r * 3 + col])));
                let pose = [0, 1, 2, 3].map(|r| [0, 1, 2, 3].map(|col| T::lit(c.t[r * 4 + col])));
                Camera::from_matrix(k, pose, c.width, c.height)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cams, rec.range.cast())
    }

    pub fn to_json(&self) -> Result<String> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| CameraRecord {
                k: c.k.iter().flatten().map(|v| v.to_f64_lossy()).collect(),
                t: c.pose_matrix().iter().flatten().map(|v| v.to_f64_lossy()).collect(),
                width: c.width,
                height: c.height,
            })
            .collect();
        let rec = RigRecord {
            cameras,
            range: self.range.cast(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident() -> Mat3<f64> {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    fn cam() -> Camera<f64> {
        let k = [[50.0, 0.0, 32.0], [0.0, 40.0, 24.0], [0.0, 0.0, 1.0]];
        Camera::new(k, ident(), [0.0; 3], 64, 48).unwrap()
    }

    fn range() -> SceneRange<f64> {
        SceneRange {
            x: [-10.0, 10.0],
            y: [-10.0, 10.0],
            z: [0.0, 20.0],
            depth: [1.0, 9.0],
            depth_levels: 4,
        }
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let p = cam().project([0.0, 0.0, 5.0]);
        assert_eq!((p.u, p.v, p.depth, p.visible), (32.0, 24.0, 5.0, true));
    }

    #[test]
    fn behind_camera_is_invisible_and_finite() {
        let p = cam().project([1.0, 2.0, -3.0]);
        assert!(!p.visible);
        assert!(p.u.is_finite() && p.v.is_finite());
        let p = cam().project([1.0, 2.0, 0.0]);
        assert!(!p.visible && p.u.is_finite());
    }

    #[test]
    fn rejects_bad_intrinsics_and_rotation() {
        let bad_k = [[0.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(bad_k, ident(), [0.0; 3], 4, 4).is_err());
        let lower = [[1.0, 0.0, 1.0], [0.5, 1.0, 1.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(lower, ident(), [0.0; 3], 4, 4).is_err());
        let k = [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]];
        let skewed = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(k, skewed, [0.0; 3], 4, 4).is_err());
        let reflect = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(k, reflect, [0.0; 3], 4, 4).is_err());
    }

    #[test]
    fn frustum_principal_cell_and_homogeneous_channel() {
        // 2×2 map over a 64×48 image: cell (0,0) centre is (16, 12), not the
        // principal point; use a 1×1 map whose only centre is (32, 24).
        let vol = frustum_volume(&cam(), 1, 1, &range()).unwrap();
        assert_eq!(vol.shape(), &[1, 1, 16]);
        let r = range();
        for (k, d) in r.depth_bins().iter().enumerate() {
            let n = r.normalize([0.0, 0.0, *d]);
            assert_eq!(&vol.data()[4 * k..4 * k + 4], &[n[0], n[1], n[2], 1.0]);
        }
    }

    #[test]
    fn single_depth_level_has_four_channels() {
        let mut r = range();
        r.depth_levels = 1;
        let vol = frustum_volume(&cam(), 3, 5, &r).unwrap();
        assert_eq!(vol.shape(), &[3, 5, 4]);
        let z = vol.data()[2];
        assert!(vol.data().chunks(4).all(|px| px[2] == z && px[3] == 1.0));
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let c = Camera::<f64>::look_at([10.0, 1.0, 0.0], [0.0, 1.0, 0.0], 32.0, 64, 64).unwrap();
        let p = c.project([0.0, 1.0, 0.0]);
        assert!((p.u - 32.0).abs() < 1e-12 && (p.v - 32.0).abs() < 1e-12);
        assert!((p.depth - 10.0).abs() < 1e-12);
        // world up maps to image up
        assert!(c.project([0.0, 2.0, 0.0]).v < 32.0);
    }

    #[test]
    fn rig_json_round_trip() {
        let rig = CameraRig::new(vec![cam()], range()).unwrap();
        let text = rig.to_json().unwrap();
        assert!(text.contains("\"K\"") && text.contains("\"T\""));
        let back = CameraRig::<f64>::from_json(&text).unwrap();
        assert_eq!(back, rig);
        assert!(CameraRig::<f64>::from_json(r#"{"cameras":[],"range":{"x":[0,1],"y":[0,1],"z":[0,1],"depth":[1,2]}}"#).is_err());
    }
}
