use std::fs;

use mvacon_core::config::{Checkpoint, RunConfig};
use mvacon_core::lift::LiftMode;
use mvacon_core::train::Trainer;
use mvacon_core::verify::{tiny_run_config, CheckSettings, Registry};
use mvacon_harness::{bench, gradcheck, output, scene_gen, train, viz, with_seed, HarnessError};

fn tiny(mode: LiftMode, steps: usize) -> RunConfig {
    let mut cfg = tiny_run_config(mode);
    cfg.training.steps = steps;
    cfg
}

#[test]
fn zero_steps_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(LiftMode::Petr, 0);
    let out = train::train(&cfg, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join(train::METRICS_FILE)).unwrap();
    assert_eq!(text, format!("# config {}\nstep,loss,box_err,cls_acc\n", out.hash));
    let ck = Checkpoint::from_json(&fs::read_to_string(dir.path().join(train::CHECKPOINT_FILE)).unwrap()).unwrap();
    let init = Trainer::<f64>::new(&cfg).unwrap();
    assert_eq!(ck, Checkpoint::capture(&init.store, &out.hash));
    let echoed = RunConfig::from_json(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn two_runs_write_identical_files() {
    let cfg = tiny(LiftMode::Bevformer, 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train::train(&cfg, a.path()).unwrap();
    train::train(&cfg, b.path()).unwrap();
    for f in [train::METRICS_FILE, train::CHECKPOINT_FILE, "config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let rows = output::read_csv_rows(&a.path().join(train::METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.len() == 4));
}

#[test]
fn seed_override_changes_scene_and_init() {
    let base = tiny(LiftMode::Petr, 0);
    let cfg = with_seed(base.clone(), Some(99));
    assert_eq!((cfg.scene.seed, cfg.training.seed), (99, 99));
    assert_ne!(cfg.hash().unwrap(), base.hash().unwrap());
    assert_eq!(with_seed(base.clone(), None), base);
}

#[test]
fn diverging_run_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(LiftMode::Petr, 50);
    cfg.training.lr = 1e12;
    match train::train(&cfg, dir.path()) {
        Err(HarnessError::NonFiniteLoss { step, dump }) => {
            assert!(dump.exists());
            let body: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dump).unwrap()).unwrap();
            assert_eq!(body["step"], step);
            assert_eq!(body["config_hash"], cfg.hash().unwrap());
            let rows = output::read_csv_rows(&dir.path().join(train::METRICS_FILE)).unwrap();
            assert_eq!(rows.len(), step);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn gradcheck_reports_and_detects_plant() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::standard();
    let ok = gradcheck::gradcheck(&reg, &CheckSettings::default(), dir.path(), "h").unwrap();
    assert!(gradcheck::all_passed(&ok));
    assert_eq!(output::read_csv_rows(&dir.path().join(gradcheck::REPORT_FILE)).unwrap().len(), reg.len());
    let planted = CheckSettings {
        plant_scale: Some(2.0),
        ..CheckSettings::default()
    };
    let bad = gradcheck::gradcheck(&reg, &planted, dir.path(), "h").unwrap();
    assert!(bad.iter().all(|r| !r.passed));
    assert!(gradcheck::gradcheck(&Registry::empty(), &CheckSettings::default(), dir.path(), "h").is_err());
}

#[test]
fn bench_rows_and_rep_floor() {
    let cfg = RunConfig::default();
    let rows = bench::bench(&cfg, &[64, 128], 5).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.median_ms > 0.0));
    assert!(bench::ratio(&rows, bench::Mechanism::Dense, 64, 128).is_some());
    assert!(bench::bench(&cfg, &[64], 4).is_err());
}

#[test]
fn untrained_deform_points_sit_on_projected_anchors() {
    let cfg = tiny(LiftMode::Bevformer, 0);
    let t = Trainer::<f64>::new(&cfg).unwrap();
    let table = t.geometry.table.as_ref().unwrap();
    for cell in 0..table.cells {
        let layers = viz::deform_points(&t, cell).unwrap();
        assert_eq!(layers.len(), cfg.model.lift.layers);
        for pts in &layers {
            for p in pts {
                let e = table.image_point(cell, 0, p.view);
                assert!((p.u - e.u).abs() < 1e-9 && (p.v - e.v).abs() < 1e-9);
            }
            if !pts.is_empty() {
                assert!((pts.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
    assert!(viz::deform_points(&t, table.cells).is_err());
    let petr = Trainer::<f64>::new(&tiny(LiftMode::Petr, 0)).unwrap();
    assert!(viz::deform_points(&petr, 0).is_err());
}

#[test]
fn viz_and_scene_files_embed_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(LiftMode::Bevformer, 0);
    let hash = output::prepare(dir.path(), &cfg).unwrap();
    let t = Trainer::<f64>::new(&cfg).unwrap();
    let maps = viz::cluster_heatmaps(&t).unwrap();
    for p in viz::write_cluster_heatmaps(&maps, dir.path(), &hash).unwrap() {
        let b = fs::read(p).unwrap();
        assert!(b.starts_with(format!("P5\n# config {hash}\n32 32\n65535\n").as_bytes()));
    }
    let layers = viz::deform_points(&t, 0).unwrap();
    for p in viz::write_deform_points(&layers, dir.path(), &hash).unwrap() {
        assert!(fs::read_to_string(p).unwrap().starts_with(&format!("# config {hash}\nview,level,u,v,weight\n")));
    }
    let files = scene_gen::scene_gen(&cfg, dir.path(), &hash).unwrap();
    assert_eq!(files.len(), cfg.scene.cameras + 1);
    let gt = fs::read_to_string(dir.path().join("ground_truth.json")).unwrap();
    assert!(gt.contains(&hash));
}

#[test]
fn disabled_mvacon_has_no_cluster_maps() {
    let mut cfg = tiny(LiftMode::Petr, 0);
    cfg.model.mvacon.enabled = false;
    let t = Trainer::<f64>::new(&cfg).unwrap();
    assert!(viz::cluster_heatmaps(&t).is_err());
}
