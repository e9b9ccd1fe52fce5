use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvacon_core::config::RunConfig;
use mvacon_core::train::Trainer;
use mvacon_core::verify::{CheckSettings, Registry};
use mvacon_harness::{bench, gradcheck, output, scene_gen, train, viz, with_seed, HarnessError, Result};

#[derive(Parser)]
#[command(name = "mvacon", version, about = "Cluster-attention multi-view 3D detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing; falls back to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scene and initialization seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// SGD training with per-step metrics and a final checkpoint.
    Train(Common),
    /// Finite-difference check of every registered computation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Multiply analytic gradients by this factor (sanity check of the checker).
        #[arg(long)]
        plant: Option<f64>,
    },
    /// Cluster attention vs dense attention timing.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 7)]
        reps: usize,
    },
    /// Per-view cluster heatmaps as 16-bit PGM.
    VizClusters {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-encoder-layer deformable sampling points of one BEV cell.
    VizDeform {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// BEV cell index `i·nz + k`; defaults to the grid centre.
        #[arg(long)]
        cell: Option<usize>,
    },
    /// Renders the configured scene to PPM.
    SceneGen(Common),
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MVACON_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Usage(format!("MVACON_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::Usage(e.to_string()))
}

struct Setup {
    cfg: RunConfig,
    out: PathBuf,
}

fn resolve(c: &Common) -> Result<Setup> {
    let cfg = with_seed(output::load_config(c.config.as_deref())?, c.seed);
    cfg.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .ok_or_else(|| HarnessError::Usage("no output directory: pass --out or set \"output\" in the config".into()))?;
    Ok(Setup { cfg, out })
}

fn setup(c: &Common) -> Result<(RunConfig, PathBuf, String)> {
    let s = resolve(c)?;
    let hash = output::prepare(&s.out, &s.cfg)?;
    Ok((s.cfg, s.out, hash))
}

fn load_trained(cfg: &RunConfig, ck: Option<&Path>, hash: &str) -> Result<Trainer<f64>> {
    let (trainer, saved) = train::restore(cfg, ck)?;
    if let Some(s) = saved.filter(|s| s != hash) {
        eprintln!("warning: checkpoint was trained under config {s}, current config is {hash}");
    }
    Ok(trainer)
}

fn list(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::Train(c) => {
            let Setup { cfg, out: dir } = resolve(&c)?;
            let out = train::train(&cfg, &dir)?;
            if let Some(last) = out.records.last() {
                println!(
                    "{} steps: loss {:.4} -> {:.4}, box_err {:.3}, cls_acc {:.3}",
                    out.records.len(),
                    out.records[0].loss,
                    last.loss,
                    last.box_err,
                    last.cls_acc
                );
            }
            println!("config {} -> {}", out.hash, dir.display());
        }
        Command::Gradcheck { common, plant } => {
            let (_, out, hash) = setup(&common)?;
            let settings = CheckSettings {
                plant_scale: plant,
                ..CheckSettings::default()
            };
            let results = gradcheck::gradcheck(&Registry::standard(), &settings, &out, &hash)?;
            for r in &results {
                let status = if r.passed { "ok  " } else { "FAIL" };
                println!("{status} {:<36} {:.3e}", r.name, r.report.max_rel_error);
            }
            return Ok(gradcheck::all_passed(&results));
        }
        Command::Bench { common, reps } => {
            let (cfg, out, hash) = setup(&common)?;
            let rows = bench::bench(&cfg, &bench::SIZES, reps)?;
            bench::write_report(&rows, &out, &hash)?;
            for r in &rows {
                println!("{:<6} N={:<5} {:>10.3} ms", r.mechanism.name(), r.n, r.median_ms);
            }
        }
        Command::VizClusters { common, checkpoint } => {
            let (cfg, out, hash) = setup(&common)?;
            let trainer = load_trained(&cfg, checkpoint.as_deref(), &hash)?;
            let maps = viz::cluster_heatmaps(&trainer)?;
            list(&viz::write_cluster_heatmaps(&maps, &out, &hash)?);
        }
        Command::VizDeform {
            common,
            checkpoint,
            cell,
        } => {
            let (cfg, out, hash) = setup(&common)?;
            let trainer = load_trained(&cfg, checkpoint.as_deref(), &hash)?;
            let bev = &cfg.model.bev;
            let cell = cell.unwrap_or((bev.nx / 2) * bev.nz + bev.nz / 2);
            let layers = viz::deform_points(&trainer, cell)?;
            list(&viz::write_deform_points(&layers, &out, &hash)?);
        }
        Command::SceneGen(c) => {
            let (cfg, out, hash) = setup(&c)?;
            list(&scene_gen::scene_gen(&cfg, &out, &hash)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
