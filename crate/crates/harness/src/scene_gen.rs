//! `mvacon scene-gen`: renders the configured scene to PPM files.

use std::path::{Path, PathBuf};

use mvacon_core::config::RunConfig;
use mvacon_core::scene::{generate_scene, render, write_ppm};
use serde_json::json;

use crate::error::Result;
use crate::output;

/// Writes `view{v}.ppm` per camera and `ground_truth.json`.
pub fn scene_gen(cfg: &RunConfig, out: &Path, hash: &str) -> Result<Vec<PathBuf>> {
    let scene = generate_scene::<f64>(&cfg.scene, cfg.scene.seed)?;
    let views = render(&scene)?;
    let mut written = Vec::new();
    for (v, img) in views.images.iter().enumerate() {
        let mut buf = Vec::new();
        write_ppm(&mut buf, img, hash)?;
        let p = out.join(format!("view{v}.ppm"));
        output::write_file(&p, &buf)?;
        written.push(p);
    }
    let gt = json!({ "config_hash": hash, "seed": scene.seed, "objects": scene.ground_truth() });
    let p = out.join("ground_truth.json");
    output::write_file(&p, (serde_json::to_string_pretty(&gt)? + "\n").as_bytes())?;
    written.push(p);
    Ok(written)
}
