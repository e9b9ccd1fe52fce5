mod common;

use mvacon_core::head::Box3d;
use mvacon_core::oracle;
use mvacon_core::scene::{box_faces, camera_ring, generate_scene, render, write_ppm, SceneConfig};
use proptest::prelude::*;

fn cfg(objects: usize) -> SceneConfig {
    SceneConfig {
        objects,
        ..SceneConfig::default()
    }
}

#[test]
fn same_seed_same_scene_and_pixels() {
    let c = cfg(3);
    let a = generate_scene::<f64>(&c, 17).unwrap();
    let b = generate_scene::<f64>(&c, 17).unwrap();
    assert_eq!(a, b);
    assert_eq!(render(&a).unwrap(), render(&b).unwrap());
    let other = generate_scene::<f64>(&c, 18).unwrap();
    assert_ne!(a.objects, other.objects);
}

#[test]
fn cameras_evenly_spaced_and_inward() {
    let rig = camera_ring::<f64>(&SceneConfig::default()).unwrap();
    assert_eq!(rig.cameras.len(), 6);
    for (i, cam) in rig.cameras.iter().enumerate() {
        let p = cam.center();
        let next = rig.cameras[(i + 1) % 6].center();
        let ang = |q: [f64; 3]| q[2].atan2(q[0]);
        let mut d = ang(next) - ang(p);
        if d < 0.0 {
            d += std::f64::consts::TAU;
        }
        assert!((d - std::f64::consts::FRAC_PI_3).abs() < 1e-12);
        assert!(((p[0] * p[0] + p[2] * p[2]).sqrt() - 10.0).abs() < 1e-12);
        let f = cam.forward();
        let inward = [-p[0] / 10.0, 0.0, -p[2] / 10.0];
        assert!((0..3).map(|k| f[k] * inward[k]).sum::<f64>() > 1.0 - 1e-12);
    }
}

#[test]
fn objects_rest_on_ground_without_overlap() {
    for seed in 0..20 {
        let s = generate_scene::<f64>(&cfg(3), seed).unwrap();
        for (i, a) in s.objects.iter().enumerate() {
            let b = &a.gt.bbox;
            assert!((b.center[1] - b.size[2] / 2.0).abs() < 1e-12);
            let corners: Vec<_> = box_faces(b).iter().flatten().copied().collect();
            assert!(corners.iter().all(|c| c[1] > -1e-12));
            for o in &s.objects[i + 1..] {
                let d = ((b.center[0] - o.gt.bbox.center[0]).powi(2) + (b.center[2] - o.gt.bbox.center[2]).powi(2)).sqrt();
                let r = |x: &Box3d<f64>| 0.5 * x.size[0].hypot(x.size[1]);
                assert!(d > r(b) + r(&o.gt.bbox));
            }
        }
    }
}

#[test]
fn renderer_agrees_with_ray_casting() {
    let c = SceneConfig {
        image_size: [48, 48],
        focal: 40.0,
        ring_radius: 7.0,
        ..cfg(3)
    };
    let mut checked = 0;
    let mut covered = 0;
    for seed in 0..6 {
        let s = generate_scene::<f64>(&c, seed).unwrap();
        let r = render(&s).unwrap();
        let boxes: Vec<_> = s.objects.iter().map(|o| o.gt.bbox).collect();
        for (v, cam) in s.rig.cameras.iter().enumerate() {
            for row in 0..16 {
                for col in 0..16 {
                    let (y, x) = (row * 3 + 1, col * 3 + 1);
                    let want = oracle::ray_cast(cam, &boxes, x as f64 + 0.5, y as f64 + 0.5);
                    assert_eq!(r.ids[v][y * 48 + x], want, "seed {seed} view {v} pixel ({x},{y})");
                    checked += 1;
                    covered += usize::from(want.is_some());
                }
            }
        }
    }
    assert!(covered * 20 > checked, "{covered} of {checked} probes hit a box");
}

#[test]
fn empty_scene_renders_black() {
    let s = generate_scene::<f64>(&cfg(0), 3).unwrap();
    let r = render(&s).unwrap();
    assert!(r.images.iter().all(|im| im.data().iter().all(|&x| x == 0.0)));
    assert!(r.ids.iter().flatten().all(Option::is_none));
}

#[test]
fn crowded_scene_fails_cleanly() {
    let c = SceneConfig {
        placement_radius: 0.5,
        ..cfg(12)
    };
    assert!(generate_scene::<f64>(&c, 0).is_err());
}

#[test]
fn ppm_header_and_size() {
    let s = generate_scene::<f64>(&cfg(2), 1).unwrap();
    let r = render(&s).unwrap();
    let mut buf = Vec::new();
    write_ppm(&mut buf, &r.images[0], "abc123").unwrap();
    let header = b"P6\n# config abc123\n64 64\n255\n";
    assert!(buf.starts_with(header));
    assert_eq!(buf.len(), header.len() + 64 * 64 * 3);
}

#[test]
fn advanced_scene_moves_by_velocity() {
    let s = generate_scene::<f64>(&cfg(3), 4).unwrap();
    let t = s.advanced(s.dt);
    for (a, b) in s.objects.iter().zip(&t.objects) {
        let (p, q) = (a.gt.bbox, b.gt.bbox);
        assert!((q.center[0] - p.center[0] - p.velocity[0] * 0.5).abs() < 1e-12);
        assert!((q.center[2] - p.center[2] - p.velocity[1] * 0.5).abs() < 1e-12);
        assert_eq!(q.center[1], p.center[1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn f32_and_f64_scenes_share_layout(seed in 0u64..1_000) {
        let a = generate_scene::<f64>(&cfg(3), seed).unwrap();
        let b = generate_scene::<f32>(&cfg(3), seed).unwrap();
        for (x, y) in a.objects.iter().zip(&b.objects) {
            prop_assert_eq!(x.gt.class, y.gt.class);
            for k in 0..3 {
                prop_assert!((x.gt.bbox.center[k] - f64::from(y.gt.bbox.center[k])).abs() < 1e-5);
            }
        }
    }
}
