//! Plain-SGD training on one fixed synthetic scene.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::{decode_detections, match_metrics, GtObject};
use crate::model::{Detector, Geometry};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::scene::{generate_scene, render, Scene};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub box_err: f64,
    pub cls_acc: f64,
}

pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub store: ParamStore<T>,
    pub detector: Detector,
    pub scene: Scene<T>,
    pub geometry: Geometry<T>,
    /// One or two frames of per-view images.
    pub frames: Vec<Vec<Tensor<T>>>,
    pub gt: Vec<GtObject<T>>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let scene = generate_scene::<T>(&cfg.scene, cfg.scene.seed)?;
        let mut store = ParamStore::new(cfg.training.seed);
        let detector = Detector::new(&mut store, &cfg.model, 3)?;
        let geometry = detector.geometry(&scene.rig)?;
        let mut frames = vec![render(&scene)?.images];
        if cfg.model.head.velocity {
            frames.push(render(&scene.advanced(scene.dt))?.images);
        }
        let gt = scene.ground_truth();
        Ok(Self {
            cfg: cfg.clone(),
            store,
            detector,
            scene,
            geometry,
            frames,
            gt,
        })
    }

    /// Loss and metrics at the current parameters, without updating.
    pub fn evaluate(&self) -> Result<StepRecord> {
        let mut g = Graph::new();
        let (out, m) = self.detector.loss(&mut g, &self.store, &self.frames, &self.geometry, &self.gt)?;
        self.record(&g, &out.head, &m, 0)
    }

    fn record(
        &self,
        g: &Graph<T>,
        head: &crate::head::HeadOutput,
        m: &crate::head::MatchOutput,
        step: usize,
    ) -> Result<StepRecord> {
        let loss = g.value(m.loss).data()[0].to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {step}")));
        }
        let dets = decode_detections(g, head)?;
        let (box_err, cls_acc) = match_metrics(&dets, &self.gt, &m.assignment, self.cfg.model.head.classes);
        Ok(StepRecord {
            step,
            loss,
            box_err,
            cls_acc,
        })
    }

    /// One SGD update; the record holds the loss before the update.
    pub fn step(&mut self, step: usize) -> Result<StepRecord> {
        let mut g = Graph::new();
        let (out, m) = self.detector.loss(&mut g, &self.store, &self.frames, &self.geometry, &self.gt)?;
        let rec = self.record(&g, &out.head, &m, step)?;
        let grads = g.backward(m.loss)?;
        self.store.zero_grad();
        self.store.accumulate(&g, &grads);
        self.store.sgd_step(T::lit(self.cfg.training.lr));
        Ok(rec)
    }
}
