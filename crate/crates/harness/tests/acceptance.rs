//! The eight acceptance criteria, run in order. Each prints one PASS/FAIL
//! line straight to stdout; the test fails if any criterion fails.

use std::fs;
use std::io::Write;
use std::time::{Duration, Instant};

use mvacon_core::bev::{build_bev_grid, project_anchors, BevConfig, ProjectionTable};
use mvacon_core::camera::{Camera, CameraRig, SceneRange};
use mvacon_core::cluster::{
    cluster_assign, compute_clusters, ClusterConfig, Clustering, ClusteringOp, FeatureMap, Mvacon, PacaAttention,
};
use mvacon_core::config::RunConfig;
use mvacon_core::head::{match_and_loss, Box3d, GtObject, HeadConfig, HeadOutput};
use mvacon_core::lift::{deformable_sample, LiftMode, SampleLayout, SpatialCrossAttention};
use mvacon_core::nn::{zero_params, LayerNorm};
use mvacon_core::oracle::{self, to_mat, LevelMap};
use mvacon_core::train::Trainer;
use mvacon_core::verify::{CheckSettings, Registry};
use mvacon_core::{Graph, ParamStore, Tensor};
use mvacon_harness::{bench, output, train, viz};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const OPS: [ClusteringOp; 3] = [ClusteringOp::Linear, ClusteringOp::Mlp, ClusteringOp::Conv];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

fn perturb(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, amount: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v += r.gen_range(-amount..amount);
        }
    }
}

fn map_on(g: &mut Graph<f64>, t: &Tensor<f64>) -> FeatureMap {
    let v = g.constant(t.clone()).unwrap();
    FeatureMap::new(g, v).unwrap()
}

/// Random token grid with `N ≤ 64`, `M ≤ 8`, `c ≤ 16`, heads dividing `c`.
struct Instance {
    hw: (usize, usize),
    c: usize,
    m: usize,
    heads: usize,
    tokens: Tensor<f64>,
}

fn instance(r: &mut ChaCha8Rng) -> Instance {
    let hw = (r.gen_range(1..=8), r.gen_range(1..=8));
    let heads = [1, 2, 4][r.gen_range(0..3)];
    let c = heads * r.gen_range(1..=16 / heads);
    let m = r.gen_range(1..=8);
    let scale = r.gen_range(0.1..8.0);
    let tokens = rand_tensor(r, &[hw.0 * hw.1, c], -scale, scale);
    Instance { hw, c, m, heads, tokens }
}

const IMG: (usize, usize) = (40, 30);
const LEVELS: [(usize, usize); 2] = [(8, 10), (4, 5)];

fn rig(views: usize) -> CameraRig<f64> {
    let range = SceneRange {
        x: [-12.0, 12.0],
        y: [-1.0, 4.0],
        z: [-12.0, 12.0],
        depth: [2.0, 18.0],
        depth_levels: 4,
    };
    let cams = [[0.0, 1.0, -6.0], [6.0, 1.0, 0.5], [-4.0, 1.5, -4.0]][..views]
        .iter()
        .map(|&eye| Camera::look_at(eye, [0.0, 1.0, 0.0], 20.0, IMG.0, IMG.1).unwrap())
        .collect();
    CameraRig::new(cams, range).unwrap()
}

fn table(nx: usize, pillars: usize, levels: &[(usize, usize)], views: usize) -> ProjectionTable<f64> {
    let cfg = BevConfig {
        nx,
        nz: nx,
        x_bounds: [-3.0, 3.0],
        z_bounds: [-3.0, 3.0],
        pillar_count: pillars,
        y_bounds: [0.0, 2.0],
    };
    project_anchors(&build_bev_grid::<f64>(&cfg).unwrap(), &rig(views), levels).unwrap()
}

fn c1_gradients() -> Outcome {
    let reg = Registry::standard();
    let names = reg.names();
    for required in [
        "tensor.", "assign_linear", "assign_mlp", "assign_conv", "paca_attend", "petr_lift", "deformable_sample",
        "bev_encoder", "head.decoder", "head.predict",
    ] {
        ensure(names.iter().any(|n| n.contains(required)), || format!("no registered case for {required}"))?;
    }
    let t0 = Instant::now();
    let results = reg.run(&CheckSettings::default()).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    ensure(failed.is_empty(), || format!("failing cases {failed:?}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("suite took {elapsed:?}"))?;
    let planted = CheckSettings {
        plant_scale: Some(2.0),
        ..CheckSettings::default()
    };
    let caught = reg.run(&planted).map_err(|e| e.to_string())?;
    ensure(caught.iter().all(|r| !r.passed), || "a planted x2 gradient went undetected".into())?;
    ensure(Registry::empty().run(&CheckSettings::default()).is_err(), || "empty registry accepted".into())?;
    Ok(format!(
        "{} cases, worst {} at {:.2e} (< 1e-4), {:.1?}",
        results.len(),
        worst.name,
        worst.report.max_rel_error,
        elapsed
    ))
}

fn c2_normalization() -> Outcome {
    let mut worst = 0.0f64;
    for (oi, op) in OPS.into_iter().enumerate() {
        let mut r = rng(1000 + oi as u64);
        for i in 0..1000 {
            let inst = instance(&mut r);
            let mut st = ParamStore::new(i);
            let cl = Clustering::new(&mut st, "c", op, inst.c, inst.m).unwrap();
            let paca = PacaAttention::new(&mut st, "p", inst.c, inst.heads).unwrap();
            perturb(&mut st, &mut r, 0.5);
            let mut g = Graph::new();
            let t = g.constant(inst.tokens.clone()).unwrap();
            let a = cluster_assign(&mut g, &st, &cl, t, Some(inst.hw)).unwrap();
            let am = to_mat(g.value(a));
            for j in 0..inst.m {
                worst = worst.max((am.iter().map(|row| row[j]).sum::<f64>() - 1.0).abs());
            }
            let ln = LayerNorm::new(&mut st, "ln", inst.c).unwrap();
            let (z, _) = compute_clusters(&mut g, &st, t, a, &ln).unwrap();
            let out = paca.attend_with_weights(&mut g, &st, t, z).unwrap();
            for w in out.weights {
                for row in to_mat(g.value(w)) {
                    worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("3 ops x 1000 instances, max |sum - 1| = {worst:.2e} (< 1e-9)"))
}

fn c3_identities() -> Outcome {
    let mut r = rng(3000);
    let mut worst = [0.0f64; 4];
    for i in 0..50 {
        let inst = instance(&mut r);
        let mut st = ParamStore::new(i);
        let paca = PacaAttention::new(&mut st, "p", inst.c, inst.heads).unwrap();
        perturb(&mut st, &mut r, 0.4);
        // M = 1: every token receives the same projected cluster value.
        let z1 = rand_tensor(&mut r, &[1, inst.c], -1.0, 1.0);
        let mut g = Graph::new();
        let t = g.constant(inst.tokens.clone()).unwrap();
        let zv = g.constant(z1.clone()).unwrap();
        let out = paca.attend_with_weights(&mut g, &st, t, zv).unwrap();
        let v = oracle::Affine::read(&st, &paca.attn.v).apply(&to_mat(&z1));
        let proj = oracle::Affine::read(&st, &paca.attn.o).apply(&v)[0].clone();
        for (row, src) in to_mat(g.value(out.out)).iter().zip(to_mat(&inst.tokens)) {
            for k in 0..inst.c {
                worst[0] = worst[0].max((row[k] - src[k] - proj[k]).abs());
            }
        }
        // Zeroed value path: the shortcut alone survives.
        zero_params(&mut st, &paca.value_path());
        let zm = rand_tensor(&mut r, &[inst.m, inst.c], -1.0, 1.0);
        let mut g = Graph::new();
        let t = g.constant(inst.tokens.clone()).unwrap();
        let zv = g.constant(zm).unwrap();
        let y = paca.attend(&mut g, &st, t, zv).unwrap();
        worst[1] = worst[1].max(g.value(y).max_abs_diff(&inst.tokens));
    }
    // Zero offsets with one sample per query reproduce the reference sample.
    let levels = [(8, 10)];
    let tb = table(4, 1, &levels, 3);
    for seed in 0..20 {
        let mut r = rng(3100 + seed);
        let c = r.gen_range(1..=16);
        let map = rand_tensor(&mut r, &[8, 10, c], -1.0, 1.0);
        let lm = LevelMap::from_tensor(&map);
        for view in 0..3 {
            let mut g = Graph::new();
            let maps = vec![map_on(&mut g, &map)];
            let ov = g.constant(Tensor::zeros(&[tb.cells, 2])).unwrap();
            let lv = g.constant(rand_tensor(&mut r, &[tb.cells, 1], -5.0, 5.0)).unwrap();
            let ds = deformable_sample(&mut g, &maps, &tb, view, ov, lv, 1).unwrap();
            let got = to_mat(g.value(ds.out));
            for q in 0..tb.cells {
                let e = tb.get(q, 0, view, 0);
                if e.visible {
                    let want = oracle::bilinear(&lm.tokens, lm.h, lm.w, e.u - 0.5, e.v - 0.5);
                    for (a, b) in got[q].iter().zip(&want) {
                        worst[2] = worst[2].max((a - b).abs());
                    }
                }
            }
        }
    }
    // One level: cross-level concatenation equals same-level attention.
    for (oi, op) in OPS.into_iter().enumerate() {
        let mut r = rng(3200 + oi as u64);
        let map = rand_tensor(&mut r, &[6, 5, 8], -1.0, 1.0);
        let run = |cross: bool| {
            let cfg = ClusterConfig {
                clusters: 4,
                heads: 2,
                clustering_op: op,
                cross_level: cross,
                layers: 1,
            };
            let mut st = ParamStore::new(oi as u64);
            let mv = Mvacon::new(&mut st, "mv", &cfg, 8, 1).unwrap();
            perturb(&mut st, &mut rng(9), 0.3);
            let mut g = Graph::new();
            let m = map_on(&mut g, &map);
            let (o, _) = mv.contextualize_view(&mut g, &st, &[m]).unwrap();
            g.value(o[0].var).clone()
        };
        worst[3] = worst[3].max(run(true).max_abs_diff(&run(false)));
    }
    let names = ["M=1 broadcast", "zeroed value path", "zero-offset sample", "L=1 collapse"];
    for (n, w) in names.iter().zip(worst) {
        ensure(w < 1e-12, || format!("{n}: {w:.2e}"))?;
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", "))
}

fn random_gt(r: &mut ChaCha8Rng, n: usize) -> Vec<GtObject<f64>> {
    (0..n)
        .map(|_| GtObject {
            class: r.gen_range(0..3),
            bbox: Box3d {
                center: [r.gen_range(-5.0..5.0), r.gen_range(0.0..2.0), r.gen_range(-5.0..5.0)],
                size: [r.gen_range(0.5..3.0), r.gen_range(0.5..3.0), r.gen_range(0.5..2.0)],
                yaw: r.gen_range(-3.0..3.0),
                velocity: [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)],
            },
        })
        .collect()
}

fn c4_oracles() -> Outcome {
    const CASES: u64 = 120;
    let mut worst = [0.0f64; 6];
    let mut r = rng(4000);
    for i in 0..CASES {
        let inst = instance(&mut r);
        let op = OPS[i as usize % 3];
        let mut st = ParamStore::new(i);
        let cl = Clustering::new(&mut st, "c", op, inst.c, inst.m).unwrap();
        let ln = LayerNorm::new(&mut st, "ln", inst.c).unwrap();
        let paca = PacaAttention::new(&mut st, "p", inst.c, inst.heads).unwrap();
        perturb(&mut st, &mut r, 0.4);
        let tm = to_mat(&inst.tokens);
        let mut g = Graph::new();
        let t = g.constant(inst.tokens.clone()).unwrap();
        let a = cluster_assign(&mut g, &st, &cl, t, Some(inst.hw)).unwrap();
        let want_a = oracle::cluster_assign(&st, &cl, &tm, inst.hw);
        worst[0] = worst[0].max(oracle::max_abs_diff(&to_mat(g.value(a)), &want_a));
        let (z, _) = compute_clusters(&mut g, &st, t, a, &ln).unwrap();
        let (gamma, beta) = (st.tensor(ln.gamma).data(), st.tensor(ln.beta).data());
        let want_z = oracle::compute_clusters(&tm, &want_a, gamma, beta);
        worst[1] = worst[1].max(oracle::max_abs_diff(&to_mat(g.value(z)), &want_z));
        let y = paca.attend(&mut g, &st, t, z).unwrap();
        let want_y = oracle::paca_attend(&st, &paca, &tm, &want_z);
        worst[2] = worst[2].max(oracle::max_abs_diff(&to_mat(g.value(y)), &want_y));
    }
    for i in 0..CASES {
        let mut r = rng(4100 + i);
        let views = r.gen_range(1..=3);
        let c = 2 * r.gen_range(1..=8);
        let layout = SampleLayout {
            levels: LEVELS.len(),
            pillars: r.gen_range(1..=2),
            points: r.gen_range(1..=2),
        };
        let tb = table(r.gen_range(2..=4), layout.pillars, &LEVELS, views);
        let k = layout.per_query();
        let pyrs: Vec<Vec<Tensor<f64>>> = (0..views)
            .map(|_| LEVELS.iter().map(|&(h, w)| rand_tensor(&mut r, &[h, w, c], -1.0, 1.0)).collect())
            .collect();
        let lms: Vec<Vec<LevelMap>> = pyrs.iter().map(|p| p.iter().map(LevelMap::from_tensor).collect()).collect();
        let off = rand_tensor(&mut r, &[tb.cells, 2 * k], -2.0, 2.0);
        let lg = rand_tensor(&mut r, &[tb.cells, k], -3.0, 3.0);
        let view = r.gen_range(0..views);
        let mut g = Graph::new();
        let maps: Vec<_> = pyrs[view].iter().map(|m| map_on(&mut g, m)).collect();
        let (ov, lv) = (g.constant(off.clone()).unwrap(), g.constant(lg.clone()).unwrap());
        let ds = deformable_sample(&mut g, &maps, &tb, view, ov, lv, layout.points).unwrap();
        let (want, hit) = oracle::deformable_sample(&lms[view], &tb, view, &to_mat(&off), &to_mat(&lg), layout.points);
        ensure(ds.hit == hit, || format!("deformable hit mask differs in case {i}"))?;
        worst[3] = worst[3].max(oracle::max_abs_diff(&to_mat(g.value(ds.out)), &want));
        let mut st = ParamStore::new(i);
        let sca = SpatialCrossAttention::new(&mut st, "sca", c, layout).unwrap();
        perturb(&mut st, &mut r, 0.4);
        let q = rand_tensor(&mut r, &[tb.cells, c], -1.0, 1.0);
        let mut g = Graph::new();
        let qv = g.constant(q.clone()).unwrap();
        let vs: Vec<Vec<_>> = pyrs.iter().map(|p| p.iter().map(|m| map_on(&mut g, m)).collect()).collect();
        let (out, _) = sca.forward(&mut g, &st, qv, &vs, &tb).unwrap();
        let want = oracle::spatial_cross_attention(&st, &sca, &to_mat(&q), &lms, &tb);
        worst[4] = worst[4].max(oracle::max_abs_diff(&to_mat(g.value(out)), &want));
    }
    for i in 0..CASES {
        let mut r = rng(4200 + i);
        let cfg = HeadConfig {
            queries: r.gen_range(3..=6),
            velocity: i % 2 == 0,
            ..HeadConfig::default()
        };
        let n = r.gen_range(0..=3);
        let gt = random_gt(&mut r, n);
        let logits = rand_tensor(&mut r, &[cfg.queries, cfg.classes + 1], -3.0, 3.0);
        let boxes = rand_tensor(&mut r, &[cfg.queries, cfg.box_dims()], -3.0, 3.0);
        let mut g = Graph::new();
        let out = HeadOutput {
            logits: g.constant(logits.clone()).unwrap(),
            boxes: g.constant(boxes.clone()).unwrap(),
        };
        let m = match_and_loss(&mut g, &out, &gt, &cfg).unwrap();
        let (want, _, _) = oracle::match_and_loss(&to_mat(&logits), &to_mat(&boxes), &gt, cfg.lambda_cls, cfg.lambda_box);
        worst[5] = worst[5].max((g.value(m.loss).data()[0] - want).abs());
    }
    let names = [
        "cluster_assign",
        "compute_clusters",
        "paca_attend",
        "deformable_sample",
        "spatial_cross_attention",
        "match_and_loss",
    ];
    for (n, w) in names.iter().zip(worst) {
        ensure(w < 1e-9, || format!("{n}: {w:.2e}"))?;
    }
    Ok(format!(
        "{CASES} instances each; worst {}",
        names
            .iter()
            .zip(worst)
            .map(|(n, w)| format!("{n} {w:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    ))
}

fn c5_complexity() -> Outcome {
    let t0 = Instant::now();
    let rows = bench::bench(&RunConfig::default(), &bench::SIZES, 7).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    ensure(rows.len() == 8, || format!("{} rows", rows.len()))?;
    let paca = bench::ratio(&rows, bench::Mechanism::Paca, 4096, 8192).unwrap();
    let dense = bench::ratio(&rows, bench::Mechanism::Dense, 4096, 8192).unwrap();
    ensure(paca <= 2.8, || format!("PaCa ratio {paca:.2} > 2.8"))?;
    ensure(dense >= 3.2, || format!("dense ratio {dense:.2} < 3.2"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "N 4096->8192 at M=100: PaCa x{paca:.2} (<= 2.8), dense x{dense:.2} (>= 3.2), {:.0?}",
        elapsed
    ))
}

struct Trained {
    mode: LiftMode,
    trainer: Trainer<f64>,
    dir: tempfile::TempDir,
}

fn c6_convergence(trained: &mut Vec<Trained>) -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for mode in [LiftMode::Petr, LiftMode::Bevformer] {
        let mut cfg = RunConfig::default();
        cfg.model.lift.mode = mode;
        ensure(
            cfg.scene.cameras == 6 && cfg.scene.objects == 3 && cfg.training.steps == 200 && cfg.model.mvacon.enabled,
            || "default config drifted from 6 cameras / 3 boxes / 200 steps / MvACon on".into(),
        )?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let t0 = Instant::now();
        let out = train::train(&cfg, dir.path()).map_err(|e| e.to_string())?;
        let elapsed = t0.elapsed();
        let ratio = train::loss_ratio(&out.records, 5, 20).unwrap();
        let errs = train::matched_center_errors(&out.trainer).map_err(|e| e.to_string())?;
        let max_err = errs.iter().copied().fold(0.0, f64::max);
        let (cx, cz) = cfg.model.bev.cell_size();
        let cell = cx.min(cz);
        if ratio > 0.5 {
            failures.push(format!("{mode:?} loss ratio {ratio:.3}"));
        }
        if errs.len() != cfg.scene.objects || max_err >= cell {
            failures.push(format!("{mode:?} center error {max_err:.3} m vs cell {cell} m"));
        }
        if elapsed > Duration::from_secs(600) {
            failures.push(format!("{mode:?} took {elapsed:?}"));
        }
        lines.push(format!(
            "{mode:?}: loss ratio {ratio:.3} (<= 0.5), max center error {max_err:.3} m (< {cell} m), {:.0?}",
            elapsed
        ));
        trained.push(Trained {
            mode,
            trainer: out.trainer,
            dir,
        });
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(lines.join("; "))
}

/// Mean heatmap value on object pixels over the mean on background pixels.
fn foreground_contrast(trainer: &Trainer<f64>, maps: &[viz::Heatmap]) -> Option<f64> {
    let ids = mvacon_core::scene::render(&trainer.scene).ok()?.ids;
    let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (m, id) in maps.iter().zip(&ids) {
        for (v, o) in m.values.iter().zip(id) {
            if o.is_some() {
                fg += v;
                nf += 1;
            } else {
                bg += v;
                nb += 1;
            }
        }
    }
    (nf > 0 && nb > 0 && bg > 0.0).then(|| (fg / nf as f64) / (bg / nb as f64))
}

fn c7_visualization(trained: &[Trained]) -> Outcome {
    let mut notes = Vec::new();
    for t in trained {
        let hash = t.trainer.cfg.hash().map_err(|e| e.to_string())?;
        let maps = viz::cluster_heatmaps(&t.trainer).map_err(|e| e.to_string())?;
        let files = viz::write_cluster_heatmaps(&maps, t.dir.path(), &hash).map_err(|e| e.to_string())?;
        ensure(maps.len() == t.trainer.scene.rig.len(), || "one heatmap per view".into())?;
        for (m, (f, cam)) in maps.iter().zip(files.iter().zip(&t.trainer.scene.rig.cameras)) {
            ensure((m.width, m.height) == (cam.width, cam.height), || {
                format!("heatmap {}x{} vs image {}x{}", m.width, m.height, cam.width, cam.height)
            })?;
            ensure(m.values.iter().all(|v| (0.0..=1.0).contains(v)), || "heatmap value outside [0,1]".into())?;
            let bytes = fs::read(f).map_err(|e| e.to_string())?;
            let header = format!("P5\n# config {hash}\n{} {}\n65535\n", cam.width, cam.height);
            ensure(bytes.starts_with(header.as_bytes()) && bytes.len() == header.len() + 2 * m.values.len(), || {
                format!("malformed {}", f.display())
            })?;
        }
        if let Some(x) = foreground_contrast(&t.trainer, &maps) {
            notes.push(format!("{:?} object/background heat {x:.2}", t.mode));
        }
        if t.mode != LiftMode::Bevformer {
            continue;
        }
        let layers = t.trainer.cfg.model.lift.layers;
        let table = t.trainer.geometry.table.as_ref().unwrap();
        let mut worst = 0.0f64;
        let mut hit_cells = 0;
        for cell in 0..table.cells {
            let pts = viz::deform_points(&t.trainer, cell).map_err(|e| e.to_string())?;
            ensure(pts.len() == layers, || format!("{} layers of points", pts.len()))?;
            if pts[0].is_empty() {
                continue;
            }
            hit_cells += 1;
            for layer in &pts {
                worst = worst.max((layer.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs());
            }
        }
        let bev = &t.trainer.cfg.model.bev;
        let centre = (bev.nx / 2) * bev.nz + bev.nz / 2;
        let pts = viz::deform_points(&t.trainer, centre).map_err(|e| e.to_string())?;
        let files = viz::write_deform_points(&pts, t.dir.path(), &hash).map_err(|e| e.to_string())?;
        ensure(files.len() == 6 && layers == 6, || format!("{} deform files for {layers} layers", files.len()))?;
        for f in &files {
            let rows = output::read_csv_rows(f).map_err(|e| e.to_string())?;
            let s: f64 = rows.iter().map(|r| r[4].parse::<f64>().unwrap()).sum();
            worst = worst.max((s - 1.0).abs());
        }
        ensure(worst < 1e-9, || format!("deform weights off by {worst:.2e}"))?;
        notes.push(format!(
            "{} deform files, weights sum to 1 within {worst:.1e} over {hit_cells} visible cells",
            files.len()
        ));
    }
    Ok(format!("heatmaps at image resolution in [0,1]; {}", notes.join("; ")))
}

fn c8_documentation() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let text = fs::read_to_string(path).map_err(|e| format!("README.md: {e}"))?;
    let lower = text.to_lowercase();
    for needle in ["NDS 52.8", "mAP 42.6", "LET-mAPL", "mAPH", "FPS", "memory", "criteria 1-7"] {
        ensure(text.contains(needle) || lower.contains(&needle.to_lowercase()), || {
            format!("README lacks {needle:?}")
        })?;
    }
    ensure(lower.contains("not reproducible"), || "README lacks the non-reproducibility statement".into())?;
    Ok("README states the unreproducible benchmark numbers and maps them to criteria 1-7".into())
}

fn report(n: usize, name: &str, outcome: &Outcome) {
    let line = match outcome {
        Ok(d) => format!("criterion {n} [{name}]: PASS: {d}\n"),
        Err(e) => format!("criterion {n} [{name}]: FAIL: {e}\n"),
    };
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let mut trained = Vec::new();
    let checks: Vec<(&str, Box<dyn FnOnce(&mut Vec<Trained>) -> Outcome>)> = vec![
        ("gradient suite", Box::new(|_| c1_gradients())),
        ("normalization", Box::new(|_| c2_normalization())),
        ("degenerate identities", Box::new(|_| c3_identities())),
        ("oracle equivalence", Box::new(|_| c4_oracles())),
        ("complexity benchmark", Box::new(|_| c5_complexity())),
        ("toy convergence", Box::new(c6_convergence)),
        ("visualization contracts", Box::new(|t: &mut Vec<Trained>| c7_visualization(t))),
        ("documentation", Box::new(|_| c8_documentation())),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let outcome = check(&mut trained);
        report(i + 1, name, &outcome);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
