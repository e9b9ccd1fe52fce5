//! `mvacon train`: SGD on the synthetic scene with per-step metrics.

use std::fs;
use std::path::Path;

use mvacon_core::config::{Checkpoint, RunConfig};
use mvacon_core::head::decode_detections;
use mvacon_core::train::{StepRecord, Trainer};
use mvacon_core::{Error, Graph};
use serde_json::json;

use crate::error::{HarnessError, IoContext, Result};
use crate::output::{self, LineFile};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub trainer: Trainer<f64>,
    pub hash: String,
}

/// Runs `cfg.training.steps` updates, streaming one CSV row per step, then
/// writes the final parameters as a checkpoint.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let hash = output::prepare(out, cfg)?;
    let mut trainer = Trainer::<f64>::new(cfg)?;
    let mut csv = LineFile::csv(&out.join(METRICS_FILE), &hash, "step,loss,box_err,cls_acc")?;
    let mut records = Vec::with_capacity(cfg.training.steps);
    for step in 0..cfg.training.steps {
        match trainer.step(step) {
            Ok(r) => {
                csv.line(&format!("{},{},{},{}", r.step, r.loss, r.box_err, r.cls_acc))?;
                records.push(r);
            }
            Err(Error::NonFinite(msg)) => {
                let dump = out.join(format!("diagnostic_step{step}.json"));
                write_diagnostic(&dump, &trainer, &hash, step, &msg, records.last())?;
                return Err(HarnessError::NonFiniteLoss { step, dump });
            }
            Err(e) => return Err(e.into()),
        }
    }
    let ck = Checkpoint::capture(&trainer.store, &hash);
    output::write_file(&out.join(CHECKPOINT_FILE), ck.to_json()?.as_bytes())?;
    Ok(TrainOutcome { records, trainer, hash })
}

fn write_diagnostic(
    path: &Path,
    trainer: &Trainer<f64>,
    hash: &str,
    step: usize,
    msg: &str,
    last: Option<&StepRecord>,
) -> Result<()> {
    let params: Vec<_> = trainer
        .store
        .iter()
        .map(|p| {
            let d = p.tensor.data();
            let finite: Vec<f64> = d.iter().copied().filter(|x| x.is_finite()).collect();
            json!({
                "name": p.name,
                "shape": p.tensor.shape(),
                "non_finite": d.len() - finite.len(),
                "max_abs": finite.iter().fold(0.0f64, |m, x| m.max(x.abs())),
                "l2": finite.iter().map(|x| x * x).sum::<f64>().sqrt(),
            })
        })
        .collect();
    let body = json!({
        "config_hash": hash,
        "step": step,
        "error": msg,
        "lr": trainer.cfg.training.lr,
        "last_finite": last.map(|r| json!({"step": r.step, "loss": r.loss, "box_err": r.box_err, "cls_acc": r.cls_acc})),
        "params": params,
    });
    fs::write(path, serde_json::to_string_pretty(&body)? + "\n").at(path)
}

/// 3D distance between every ground-truth center and its matched query.
pub fn matched_center_errors(trainer: &Trainer<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (out, m) = trainer
        .detector
        .loss(&mut g, &trainer.store, &trainer.frames, &trainer.geometry, &trainer.gt)?;
    let dets = decode_detections(&g, &out.head)?;
    Ok(m.assignment
        .iter()
        .map(|&(q, j)| {
            let a = dets.detections[q].bbox.center;
            let b = trainer.gt[j].bbox.center;
            (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
        })
        .collect())
}

/// Mean loss of the last `tail` records over the mean of the first `head`.
pub fn loss_ratio(records: &[StepRecord], head: usize, tail: usize) -> Option<f64> {
    if records.len() < head.max(tail) || head == 0 || tail == 0 {
        return None;
    }
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    Some(mean(&records[records.len() - tail..]) / mean(&records[..head]))
}

/// Loads a checkpoint into a freshly built trainer for `cfg`.
pub fn restore(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Trainer<f64>, Option<String>)> {
    let mut trainer = Trainer::<f64>::new(cfg)?;
    let mut saved_hash = None;
    if let Some(p) = checkpoint {
        let ck = Checkpoint::from_json(&fs::read_to_string(p).at(p)?)?;
        ck.restore(&mut trainer.store)?;
        saved_hash = Some(ck.config_hash);
    }
    Ok((trainer, saved_hash))
}
