//! Full detector: backbone, optional contextualization, lifting, decoder
//! and heads.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ToyBackbone};
use crate::bev::{build_bev_grid, project_anchors, BevConfig, ProjectionTable};
use crate::camera::{frustum_volume, CameraRig};
use crate::cluster::{ClusterConfig, ClusteringOp, FeatureMap, Mvacon, ViewClusters};
use crate::error::{Error, Result};
use crate::head::{match_and_loss, BoxHeads, Decoder, GtObject, HeadConfig, HeadOutput, MatchOutput};
use crate::lift::{
    BevEncoder, CrossAttentionTrace, LiftConfig, LiftMode, LiftedKeysValues, PetrLift, SampleLayout,
};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// One module contextualizes the pyramids once per forward pass.
    Once,
    /// Each contextualized encoder layer owns a separate module.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MvaconConfig {
    pub enabled: bool,
    pub clusters: usize,
    pub heads: usize,
    pub clustering_op: ClusteringOp,
    pub cross_level: bool,
    /// Encoder layers that read contextualized maps.
    pub layers: usize,
}

impl Default for MvaconConfig {
    fn default() -> Self {
        let c = ClusterConfig::default();
        Self {
            enabled: true,
            clusters: c.clusters,
            heads: c.heads,
            clustering_op: c.clustering_op,
            cross_level: c.cross_level,
            layers: c.layers,
        }
    }
}

impl MvaconConfig {
    pub fn cluster(&self) -> ClusterConfig {
        ClusterConfig {
            clusters: self.clusters,
            heads: self.heads,
            clustering_op: self.clustering_op,
            cross_level: self.cross_level,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mvacon: MvaconConfig,
    pub lift: LiftConfig,
    pub head: HeadConfig,
    pub bev: BevConfig,
    pub backbone: BackboneConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.lift.validate()?;
        self.head.validate()?;
        self.bev.validate()?;
        if self.mvacon.enabled {
            self.mvacon.cluster().validate(self.backbone.channels)?;
            if self.lift.mode == LiftMode::Bevformer && self.mvacon.layers > self.lift.layers {
                return Err(Error::Config(format!(
                    "mvacon.layers {} exceeds {} encoder layers",
                    self.mvacon.layers, self.lift.layers
                )));
            }
        }
        Ok(())
    }

    pub fn placement(&self) -> Placement {
        if self.lift.mvacon_per_layer {
            Placement::PerLayer
        } else {
            Placement::Once
        }
    }
}

#[derive(Clone, Debug)]
pub enum Lifter {
    Petr(PetrLift),
    Bev(BevEncoder),
}

/// Rig-dependent constants: pyramid sizes, anchor projections or frustum
/// volumes.
#[derive(Clone, Debug)]
pub struct Geometry<T> {
    pub levels: Vec<(usize, usize)>,
    pub table: Option<ProjectionTable<T>>,
    pub volumes: Vec<Tensor<T>>,
    pub views: usize,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: ToyBackbone,
    pub mvacon: Vec<Mvacon>,
    pub lifter: Lifter,
    pub decoder: Decoder,
    pub heads: BoxHeads,
}

/// Graph handles of one frame's forward pass.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub pyramids: Vec<Vec<FeatureMap>>,
    /// Output of the first contextualization module, if enabled.
    pub contextualized: Option<Vec<Vec<FeatureMap>>>,
    pub clusters: Vec<ViewClusters>,
    pub kv: LiftedKeysValues,
    pub decoded: Var,
    pub traces: Vec<CrossAttentionTrace>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    pub frames: Vec<FrameOutput>,
}

/// Initial box centers: a square lattice over the middle half of the BEV
/// extent at mid pillar height.
pub fn reference_lattice<T: Scalar>(queries: usize, bev: &BevConfig) -> Tensor<T> {
    let n = (queries as f64).sqrt().ceil() as usize;
    let at = |b: [f64; 2], i: usize| {
        let (mid, half) = (0.5 * (b[0] + b[1]), 0.25 * (b[1] - b[0]));
        mid - half + (i as f64 + 0.5) * 2.0 * half / n as f64
    };
    let y = 0.5 * (bev.y_bounds[0] + bev.y_bounds[1]);
    let mut data = Vec::with_capacity(queries * 3);
    for q in 0..queries {
        data.extend_from_slice(&[at(bev.x_bounds, q / n), y, at(bev.z_bounds, q % n)].map(T::lit));
    }
    Tensor::from_fn(&[queries, 3], |i| data[i])
}

impl Detector {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, image_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.backbone.channels;
        let levels = cfg.backbone.levels;
        let backbone = ToyBackbone::new(store, "backbone", image_channels, &cfg.backbone)?;
        let count = match (cfg.mvacon.enabled, cfg.lift.mode, cfg.placement()) {
            (false, _, _) => 0,
            (true, LiftMode::Bevformer, Placement::PerLayer) => cfg.mvacon.layers,
            (true, _, _) => 1,
        };
        let cluster = cfg.mvacon.cluster();
        let mvacon = (0..count)
            .map(|i| Mvacon::new(store, &format!("mvacon{i}"), &cluster, c, levels))
            .collect::<Result<Vec<_>>>()?;
        let (lifter, kv_width) = match cfg.lift.mode {
            LiftMode::Petr => (
                Lifter::Petr(PetrLift::new(store, "petr", c, cfg.lift.d, cfg.lift.depth_levels)?),
                cfg.lift.d,
            ),
            LiftMode::Bevformer => {
                let layout = SampleLayout {
                    levels,
                    pillars: cfg.bev.pillar_count,
                    points: cfg.lift.sample_points,
                };
                let cells = cfg.bev.nx * cfg.bev.nz;
                (
                    Lifter::Bev(BevEncoder::new(store, "encoder", cells, c, cfg.lift.layers, layout)?),
                    c,
                )
            }
        };
        let decoder = Decoder::new(store, "decoder", cfg.head.queries, c, kv_width, cfg.head.layers)?;
        let heads = BoxHeads::new(store, "heads", c, &cfg.head, reference_lattice(cfg.head.queries, &cfg.bev))?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            mvacon,
            lifter,
            decoder,
            heads,
        })
    }

    pub fn geometry<T: Scalar>(&self, rig: &CameraRig<T>) -> Result<Geometry<T>> {
        let first = rig
            .cameras
            .first()
            .ok_or_else(|| Error::Config("rig has no cameras".into()))?;
        if rig.cameras.iter().any(|c| (c.width, c.height) != (first.width, first.height)) {
            return Err(Error::Config("all cameras must share one image size".into()));
        }
        let levels = self.backbone.level_sizes(first.height, first.width);
        let (table, volumes) = match self.lifter {
            Lifter::Bev(_) => {
                let grid = build_bev_grid::<T>(&self.cfg.bev)?;
                (Some(project_anchors(&grid, rig, &levels)?), Vec::new())
            }
            Lifter::Petr(ref p) => {
                let mut range = rig.range.clone();
                range.depth_levels = p.depth_levels;
                let (h, w) = levels[levels.len() - 1];
                let vols = rig
                    .cameras
                    .iter()
                    .map(|c| frustum_volume(c, h, w, &range))
                    .collect::<Result<Vec<_>>>()?;
                (None, vols)
            }
        };
        Ok(Geometry {
            levels,
            table,
            volumes,
            views: rig.len(),
        })
    }

    /// Runs one frame of `H×W×3` images (one per view) up to the decoder.
    pub fn forward_frame<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &[Tensor<T>],
        geom: &Geometry<T>,
    ) -> Result<FrameOutput> {
        if images.len() != geom.views {
            return Err(Error::Dimension(format!("{} images for {} views", images.len(), geom.views)));
        }
        let pyramids = images
            .iter()
            .map(|im| {
                let v = g.constant(im.clone())?;
                self.backbone.forward(g, store, v)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut clusters = Vec::new();
        let mut contextualized = None;
        let mut per_module = Vec::with_capacity(self.mvacon.len());
        for (i, m) in self.mvacon.iter().enumerate() {
            let mut out = Vec::with_capacity(pyramids.len());
            for p in &pyramids {
                let (o, trace) = m.contextualize_view(g, store, p)?;
                if i == 0 {
                    clusters.push(trace);
                }
                out.push(o);
            }
            per_module.push(out);
        }
        if let Some(first) = per_module.first() {
            contextualized = Some(first.clone());
        }
        let mut traces = Vec::new();
        let kv = match &self.lifter {
            Lifter::Petr(p) => {
                let src = contextualized.as_ref().unwrap_or(&pyramids);
                let last: Vec<FeatureMap> = src.iter().map(|v| v[v.len() - 1]).collect();
                p.lift(g, store, &last, &geom.volumes)?
            }
            Lifter::Bev(enc) => {
                let table = geom
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Config("BEV lifting needs a projection table".into()))?;
                let ctx_layers = if self.mvacon.is_empty() { 0 } else { self.cfg.mvacon.layers };
                let views_per_layer: Vec<Vec<Vec<FeatureMap>>> = (0..enc.layers.len())
                    .map(|i| {
                        if i >= ctx_layers {
                            pyramids.clone()
                        } else if per_module.len() == 1 {
                            per_module[0].clone()
                        } else {
                            per_module[i].clone()
                        }
                    })
                    .collect();
                let (kv, t) = enc.forward(g, store, &views_per_layer, table)?;
                traces = t;
                kv
            }
        };
        let (decoded, _) = self.decoder.decode(g, store, &kv)?;
        Ok(FrameOutput {
            pyramids,
            contextualized,
            clusters,
            kv,
            decoded,
            traces,
        })
    }

    /// `frames` holds one frame, or two when the velocity head is enabled.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frames: &[Vec<Tensor<T>>],
        geom: &Geometry<T>,
    ) -> Result<ForwardOutput> {
        let expected = if self.cfg.head.velocity { 2 } else { 1 };
        if frames.len() != expected {
            return Err(Error::Config(format!("expected {expected} frames, got {}", frames.len())));
        }
        let outs = frames
            .iter()
            .map(|f| self.forward_frame(g, store, f, geom))
            .collect::<Result<Vec<_>>>()?;
        let next = outs.get(1).map(|o| o.decoded);
        let head = self.heads.predict(g, store, outs[0].decoded, next)?;
        Ok(ForwardOutput { head, frames: outs })
    }

    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        frames: &[Vec<Tensor<T>>],
        geom: &Geometry<T>,
        gt: &[GtObject<T>],
    ) -> Result<(ForwardOutput, MatchOutput)> {
        let out = self.forward(g, store, frames, geom)?;
        let m = match_and_loss(g, &out.head, gt, &self.cfg.head)?;
        Ok((out, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_covers_middle_half() {
        let t = reference_lattice::<f64>(4, &BevConfig::default());
        assert_eq!(t.data(), &[-2.0, 1.5, -2.0, -2.0, 1.5, 2.0, 2.0, 1.5, -2.0, 2.0, 1.5, 2.0]);
    }

    #[test]
    fn too_many_mvacon_layers_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.lift.layers = 2;
        assert!(cfg.validate().is_err());
        cfg.mvacon.layers = 2;
        assert!(cfg.validate().is_ok());
    }
}
