//! Bird's-eye-view grid on the X–Z plane, pillar anchors along Y, and their
//! projections into every camera at every pyramid level.

use serde::{Deserialize, Serialize};

use crate::camera::{CameraRig, Vec3};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevConfig {
    pub nx: usize,
    pub nz: usize,
    pub x_bounds: [f64; 2],
    pub z_bounds: [f64; 2],
    pub pillar_count: usize,
    pub y_bounds: [f64; 2],
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            nx: 16,
            nz: 16,
            x_bounds: [-8.0, 8.0],
            z_bounds: [-8.0, 8.0],
            pillar_count: 4,
            y_bounds: [0.0, 3.0],
        }
    }
}

impl BevConfig {
    /// Full-size 200×200 grid.
    pub fn full_scale() -> Self {
        Self {
            nx: 200,
            nz: 200,
            x_bounds: [-50.0, 50.0],
            z_bounds: [-50.0, 50.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.nz == 0 || self.pillar_count == 0 {
            return Err(Error::Config("bev extents and pillar_count must be >= 1".into()));
        }
        for (name, b) in [("x", self.x_bounds), ("z", self.z_bounds), ("y", self.y_bounds)] {
            if !(b[1] > b[0]) {
                return Err(Error::Config(format!("bev {name}_bounds: max must exceed min")));
            }
        }
        Ok(())
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_bounds[1] - self.x_bounds[0]) / self.nx as f64,
            (self.z_bounds[1] - self.z_bounds[0]) / self.nz as f64,
        )
    }
}

/// Cell `(i, k)` has flat index `i·nz + k`; its pillar points follow at
/// `cell·P + p`, lowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid<T> {
    pub nx: usize,
    pub nz: usize,
    pub pillar_count: usize,
    pub centers: Vec<[T; 2]>,
    pub pillar_points: Vec<Vec3<T>>,
}

fn mid<T: Scalar>(lo: f64, hi: f64, n: usize, i: usize) -> T {
    T::lit(lo + (i as f64 + 0.5) * (hi - lo) / n as f64)
}

pub fn build_bev_grid<T: Scalar>(cfg: &BevConfig) -> Result<BevGrid<T>> {
    cfg.validate()?;
    let heights: Vec<T> = (0..cfg.pillar_count)
        .map(|p| mid(cfg.y_bounds[0], cfg.y_bounds[1], cfg.pillar_count, p))
        .collect();
    let mut centers = Vec::with_capacity(cfg.nx * cfg.nz);
    let mut pillar_points = Vec::with_capacity(cfg.nx * cfg.nz * cfg.pillar_count);
    for i in 0..cfg.nx {
        let x = mid(cfg.x_bounds[0], cfg.x_bounds[1], cfg.nx, i);
        for k in 0..cfg.nz {
            let z = mid(cfg.z_bounds[0], cfg.z_bounds[1], cfg.nz, k);
            centers.push([x, z]);
            pillar_points.extend(heights.iter().map(|&y| [x, y, z]));
        }
    }
    Ok(BevGrid {
        nx: cfg.nx,
        nz: cfg.nz,
        pillar_count: cfg.pillar_count,
        centers,
        pillar_points,
    })
}

impl<T> BevGrid<T> {
    pub fn cells(&self) -> usize {
        self.nx * self.nz
    }

    pub fn cell_index(&self, i: usize, k: usize) -> usize {
        i * self.nz + k
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorProjection<T> {
    /// Continuous coordinates on the level's feature map.
    pub u: T,
    pub v: T,
    pub visible: bool,
}

/// Projections indexed by (cell, pillar point, view, level).
#[derive(Clone, Debug)]
pub struct ProjectionTable<T> {
    pub cells: usize,
    pub pillars: usize,
    pub views: usize,
    pub levels: Vec<(usize, usize)>,
    entries: Vec<AnchorProjection<T>>,
    /// Full-resolution image coordinates, indexed by (cell, pillar, view).
    image: Vec<AnchorProjection<T>>,
}

impl<T: Scalar> ProjectionTable<T> {
    fn index(&self, cell: usize, pillar: usize, view: usize, level: usize) -> usize {
        ((cell * self.pillars + pillar) * self.views + view) * self.levels.len() + level
    }

    pub fn get(&self, cell: usize, pillar: usize, view: usize, level: usize) -> AnchorProjection<T> {
        self.entries[self.index(cell, pillar, view, level)]
    }

    pub fn image_point(&self, cell: usize, pillar: usize, view: usize) -> AnchorProjection<T> {
        self.image[(cell * self.pillars + pillar) * self.views + view]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AnchorProjection<T>] {
        &self.entries
    }
}

/// Projects every pillar point into every view, rescaled to each level's
/// `(h, w)` feature-map coordinates.
pub fn project_anchors<T: Scalar>(
    grid: &BevGrid<T>,
    rig: &CameraRig<T>,
    levels: &[(usize, usize)],
) -> Result<ProjectionTable<T>> {
    if rig.is_empty() {
        return Err(Error::Config("rig has no cameras".into()));
    }
    let views = rig.len();
    let mut entries = Vec::with_capacity(grid.pillar_points.len() * views * levels.len());
    let mut image = Vec::with_capacity(grid.pillar_points.len() * views);
    for &p in &grid.pillar_points {
        for cam in &rig.cameras {
            let pr = cam.project(p);
            image.push(AnchorProjection {
                u: pr.u,
                v: pr.v,
                visible: pr.visible,
            });
            let (fw, fh) = (T::from_usize_lossy(cam.width), T::from_usize_lossy(cam.height));
            for &(h, w) in levels {
                entries.push(AnchorProjection {
                    u: pr.u * (T::from_usize_lossy(w) / fw),
                    v: pr.v * (T::from_usize_lossy(h) / fh),
                    visible: pr.visible,
                });
            }
        }
    }
    Ok(ProjectionTable {
        cells: grid.cells(),
        pillars: grid.pillar_count,
        views,
        levels: levels.to_vec(),
        entries,
        image,
    })
}
