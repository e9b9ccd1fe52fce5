mod common;

use common::{range, rng, small_rig};
use mvacon_core::bev::{build_bev_grid, project_anchors, BevConfig};
use mvacon_core::camera::{cell_center, frustum_volume, Camera, CameraRig, SceneRange};
use mvacon_core::oracle;
use proptest::prelude::*;
use rand::Rng;

const IDENT: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn k(fx: f64, fy: f64, cx: f64, cy: f64) -> [[f64; 3]; 3] {
    [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]
}

#[test]
fn identity_pose_matches_direct_formula() {
    let mut r = rng(11);
    let cam = Camera::new(k(40.0, 38.0, 31.0, 29.0), IDENT, [0.0; 3], 64, 60).unwrap();
    for _ in 0..200 {
        let p = [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(0.5..20.0)];
        let pr = cam.project(p);
        let u = 40.0 * p[0] / p[2] + 31.0;
        let v = 38.0 * p[1] / p[2] + 29.0;
        assert!((pr.u - u).abs() < 1e-10 && (pr.v - v).abs() < 1e-10);
        assert!((pr.depth - p[2]).abs() < 1e-12);
    }
}

#[test]
fn posed_projection_matches_oracle() {
    let rig = small_rig(48, 40);
    let mut r = rng(12);
    for cam in &rig.cameras {
        let rot = cam.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|m| rot[i][m] * rot[j][m]).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
        }
        for _ in 0..100 {
            let p = [r.gen_range(-3.0..3.0), r.gen_range(0.0..2.0), r.gen_range(-3.0..3.0)];
            let pr = cam.project(p);
            let (u, v, z) = oracle::project(cam, p);
            if z > 1e-3 {
                assert!((pr.u - u).abs() < 1e-9 && (pr.v - v).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn frustum_round_trip_recovers_cell_centres() {
    let rig = small_rig(32, 24);
    let rg = range();
    for cam in &rig.cameras {
        let (h, w) = (6, 8);
        let vol = frustum_volume(cam, h, w, &rg).unwrap();
        let d = rg.depth_levels;
        for row in 0..h {
            for col in 0..w {
                let (cu, cv) = cell_center(cam, h, w, row, col);
                for b in 0..d {
                    let base = (row * w + col) * 4 * d + 4 * b;
                    let n = &vol.data()[base..base + 4];
                    assert_eq!(n[3], 1.0);
                    let p = [
                        rg.x[0] + n[0] * (rg.x[1] - rg.x[0]),
                        rg.y[0] + n[1] * (rg.y[1] - rg.y[0]),
                        rg.z[0] + n[2] * (rg.z[1] - rg.z[0]),
                    ];
                    let pr = cam.project(p);
                    assert!((pr.u - cu).abs() < 1e-8 && (pr.v - cv).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn normalized_coordinates_inside_range() {
    // 90° field of view; depths up to 2 m stay within y ∈ [-0.5, 3.5].
    let cam = Camera::look_at([0.0, 1.5, -3.0], [0.0, 1.5, 0.0], 16.0, 32, 32).unwrap();
    let rg = SceneRange {
        depth: [1.0, 2.0],
        ..range()
    };
    let vol = frustum_volume(&cam, 4, 4, &rg).unwrap();
    assert!(vol.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
}

#[test]
fn table_matches_per_point_projection() {
    let cfg = BevConfig {
        nx: 5,
        nz: 4,
        x_bounds: [-3.0, 3.0],
        z_bounds: [-2.0, 2.5],
        pillar_count: 3,
        y_bounds: [0.0, 2.0],
    };
    let grid = build_bev_grid::<f64>(&cfg).unwrap();
    let rig = small_rig(40, 30);
    let levels = [(15, 20), (8, 10), (4, 5)];
    let table = project_anchors(&grid, &rig, &levels).unwrap();
    assert_eq!(table.len(), 5 * 4 * 3 * 3 * 3);
    for cell in 0..grid.cells() {
        for p in 0..3 {
            let pt = grid.pillar_points[cell * 3 + p];
            assert_eq!([pt[0], pt[2]], grid.centers[cell]);
            for (v, cam) in rig.cameras.iter().enumerate() {
                let pr = cam.project(pt);
                let full = table.image_point(cell, p, v);
                assert_eq!((full.u, full.v, full.visible), (pr.u, pr.v, pr.visible));
                for (l, &(h, w)) in levels.iter().enumerate() {
                    let e = table.get(cell, p, v, l);
                    assert!((e.u - pr.u * w as f64 / 40.0).abs() < 1e-9);
                    assert!((e.v - pr.v * h as f64 / 30.0).abs() < 1e-9);
                    assert_eq!(e.visible, pr.visible);
                }
            }
        }
    }
}

#[test]
fn anchor_on_optical_axis_and_behind() {
    let cam = Camera::look_at([0.0, 1.0, -5.0], [0.0, 1.0, 0.0], 20.0, 40, 30).unwrap();
    let rig = CameraRig::new(vec![cam], range()).unwrap();
    let on_axis = BevConfig {
        nx: 1,
        nz: 1,
        x_bounds: [-1.0, 1.0],
        z_bounds: [-1.0, 1.0],
        pillar_count: 1,
        y_bounds: [0.5, 1.5],
    };
    let grid = build_bev_grid::<f64>(&on_axis).unwrap();
    let t = project_anchors(&grid, &rig, &[(15, 20)]).unwrap();
    let e = t.get(0, 0, 0, 0);
    assert!(e.visible && (e.u - 10.0).abs() < 1e-9 && (e.v - 7.5).abs() < 1e-9);
    let behind = BevConfig {
        z_bounds: [-9.0, -7.0],
        ..on_axis
    };
    let grid = build_bev_grid::<f64>(&behind).unwrap();
    let t = project_anchors(&grid, &rig, &[(15, 20)]).unwrap();
    assert!(t.entries().iter().all(|e| !e.visible && e.u.is_finite() && e.v.is_finite()));
}

#[test]
fn table_is_translation_equivariant() {
    let cfg = BevConfig {
        nx: 3,
        nz: 3,
        x_bounds: [-2.0, 2.0],
        z_bounds: [-2.0, 2.0],
        pillar_count: 2,
        y_bounds: [0.0, 2.0],
    };
    let shift = [3.5, -0.25, -1.75];
    let shifted = BevConfig {
        x_bounds: cfg.x_bounds.map(|x| x + shift[0]),
        z_bounds: cfg.z_bounds.map(|z| z + shift[2]),
        y_bounds: cfg.y_bounds.map(|y| y + shift[1]),
        ..cfg.clone()
    };
    let eyes = [[0.0, 1.0, -6.0], [5.0, 2.0, 1.0]];
    let rig = |off: [f64; 3]| {
        let cams = eyes
            .iter()
            .map(|e| {
                let p = [e[0] + off[0], e[1] + off[1], e[2] + off[2]];
                Camera::look_at(p, [off[0], 1.0 + off[1], off[2]], 20.0, 40, 40).unwrap()
            })
            .collect();
        CameraRig::new(cams, range()).unwrap()
    };
    let a = project_anchors(&build_bev_grid::<f64>(&cfg).unwrap(), &rig([0.0; 3]), &[(10, 10)]).unwrap();
    let b = project_anchors(&build_bev_grid::<f64>(&shifted).unwrap(), &rig(shift), &[(10, 10)]).unwrap();
    for (x, y) in a.entries().iter().zip(b.entries()) {
        assert_eq!(x.visible, y.visible);
        assert!((x.u - y.u).abs() < 1e-9 && (x.v - y.v).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn back_project_then_project(
        ex in -8.0f64..8.0, ey in 0.0f64..3.0, ez in -8.0f64..8.0,
        u in 0.0f64..64.0, v in 0.0f64..48.0, d in 0.5f64..30.0,
    ) {
        prop_assume!(ex.abs() + ez.abs() > 0.5);
        let cam = Camera::look_at([ex, ey, ez], [0.0, 1.0, 0.0], 30.0, 64, 48).unwrap();
        let p = cam.back_project(u, v, d);
        let pr = cam.project(p);
        prop_assert!((pr.u - u).abs() < 1e-8 && (pr.v - v).abs() < 1e-8 && (pr.depth - d).abs() < 1e-8);
        prop_assert!(pr.visible);
    }

    #[test]
    fn grid_centres_uniform(nx in 1usize..7, nz in 1usize..7, p in 1usize..5, x0 in -5.0f64..0.0, span in 0.5f64..8.0) {
        let cfg = BevConfig { nx, nz, x_bounds: [x0, x0 + span], z_bounds: [x0, x0 + span], pillar_count: p, y_bounds: [0.0, 1.0] };
        let g = build_bev_grid::<f64>(&cfg).unwrap();
        prop_assert_eq!(g.pillar_points.len(), nx * nz * p);
        for i in 0..nx {
            for k in 0..nz {
                let c = g.centers[g.cell_index(i, k)];
                prop_assert!((c[0] - (x0 + (i as f64 + 0.5) * span / nx as f64)).abs() < 1e-12);
                prop_assert!((c[1] - (x0 + (k as f64 + 0.5) * span / nz as f64)).abs() < 1e-12);
            }
        }
    }
}
