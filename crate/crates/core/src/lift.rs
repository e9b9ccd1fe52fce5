//! 2D-to-3D feature lifting.
//!
//! Two routes produce the keys/values consumed by the detection decoder:
//! dense position-encoded tokens ([`PetrLift`]), and BEV queries refined by
//! deformable sampling around projected pillar anchors ([`BevEncoder`]).

use serde::{Deserialize, Serialize};

use crate::bev::ProjectionTable;
use crate::cluster::FeatureMap;
use crate::error::{dim_err, Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, Mlp};
use crate::param::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftMode {
    Petr,
    Bevformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftConfig {
    pub mode: LiftMode,
    /// Encoder layers (BEV route).
    pub layers: usize,
    /// Sampling points per reference (BEV route).
    pub sample_points: usize,
    /// Token width of the position-encoded route.
    pub d: usize,
    /// Depth bins of the frustum volume.
    #[serde(rename = "D")]
    pub depth_levels: usize,
    /// Give each of the first `mvacon.layers` encoder layers its own
    /// contextualization instead of sharing one computed before the encoder.
    pub mvacon_per_layer: bool,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            mode: LiftMode::Bevformer,
            layers: 6,
            sample_points: 4,
            d: 16,
            depth_levels: 4,
            mvacon_per_layer: false,
        }
    }
}

impl LiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.sample_points == 0 || self.d == 0 || self.depth_levels == 0 {
            return Err(Error::Config(
                "lift layers, sample_points, d and D must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Keys/values handed to the decoder: `count × width` tokens.
#[derive(Clone, Copy, Debug)]
pub struct LiftedKeysValues {
    pub tokens: Var,
    pub count: usize,
    pub width: usize,
}

/// Feature projection (linear) plus frustum-position projection (MLP),
/// summed element-wise.
#[derive(Clone, Debug)]
pub struct PetrLift {
    pub feat: Linear,
    pub pos: Mlp,
    pub depth_levels: usize,
    pub d: usize,
}

impl PetrLift {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        d: usize,
        depth_levels: usize,
    ) -> Result<Self> {
        Ok(Self {
            feat: Linear::new(store, &format!("{name}.feat"), c, d)?,
            pos: Mlp::new(store, &format!("{name}.pos"), 4 * depth_levels, d, d)?,
            depth_levels,
            d,
        })
    }

    /// Views are concatenated in order and flattened row-major.
    pub fn lift<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        views: &[FeatureMap],
        volumes: &[Tensor<T>],
    ) -> Result<LiftedKeysValues> {
        if views.len() != volumes.len() || views.is_empty() {
            return dim_err(format!("{} views but {} frustum volumes", views.len(), volumes.len()));
        }
        let mut parts = Vec::with_capacity(views.len());
        for (fm, vol) in views.iter().zip(volumes) {
            let &[vh, vw, ch] = vol.shape() else {
                return dim_err("frustum volume must be h×w×4D");
            };
            if (vh, vw) != (fm.h, fm.w) {
                return dim_err(format!("volume {vh}×{vw} vs map {}×{}", fm.h, fm.w));
            }
            if ch != 4 * self.depth_levels {
                return Err(Error::Config(format!(
                    "volume has {ch} channels, position MLP expects {}",
                    4 * self.depth_levels
                )));
            }
            let f = fm.flatten(g)?;
            let f = self.feat.forward(g, store, f)?;
            let p = g.constant(vol.reshape(&[vh * vw, ch])?)?;
            let p = self.pos.forward(g, store, p)?;
            parts.push(g.add(f, p)?);
        }
        let tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let count = g.shape(tokens)[0];
        Ok(LiftedKeysValues {
            tokens,
            count,
            width: self.d,
        })
    }
}

/// Result of deformable sampling of one view for every BEV query.
#[derive(Clone, Debug)]
pub struct DeformSample {
    /// `Q×c` weighted sums (zero rows for queries without a visible reference).
    pub out: Var,
    /// Whether each query has at least one visible reference in this view.
    pub hit: Vec<bool>,
    /// `Q×(L·P·S)` normalized weights, columns ordered (level, pillar, point).
    pub weights: Var,
}

/// Samples one view's pyramid around every query's projected pillar
/// anchors.
///
/// `offsets` is `Q×(L·P·S·2)` in feature pixels of the respective level,
/// columns ordered (level, pillar, point, uv); `logits` is `Q×(L·P·S)`.
/// Invisible references are masked out of the weight softmax.
pub fn deformable_sample<T: Scalar>(
    g: &mut Graph<T>,
    maps: &[FeatureMap],
    table: &ProjectionTable<T>,
    view: usize,
    offsets: Var,
    logits: Var,
    points: usize,
) -> Result<DeformSample> {
    let levels = maps.len();
    let pillars = table.pillars;
    let q = table.cells;
    let per_level = pillars * points;
    let k = levels * per_level;
    if levels != table.levels.len() {
        return dim_err(format!("{levels} maps vs {} table levels", table.levels.len()));
    }
    if g.shape(offsets) != [q, 2 * k] || g.shape(logits) != [q, k] {
        return dim_err(format!(
            "offsets {:?} / logits {:?} for {q} queries and {k} samples",
            g.shape(offsets),
            g.shape(logits)
        ));
    }
    let mut mask = vec![false; q * k];
    let mut hit = vec![false; q];
    for cell in 0..q {
        for l in 0..levels {
            for p in 0..pillars {
                let vis = table.get(cell, p, view, l).visible;
                hit[cell] |= vis;
                for s in 0..points {
                    mask[cell * k + l * per_level + p * points + s] = vis;
                }
            }
        }
    }
    let weights = g.masked_softmax_rows(logits, &mask)?;
    let half = T::lit(0.5);
    let mut out: Option<Var> = None;
    for (l, fm) in maps.iter().enumerate() {
        if (fm.h, fm.w) != table.levels[l] {
            return dim_err(format!("level {l} map {}×{} vs table {:?}", fm.h, fm.w, table.levels[l]));
        }
        let mut refs = Vec::with_capacity(q * per_level * 2);
        for cell in 0..q {
            for p in 0..pillars {
                let a = table.get(cell, p, view, l);
                for _ in 0..points {
                    refs.extend_from_slice(&[a.u - half, a.v - half]);
                }
            }
        }
        let refs = g.constant(Tensor::new(vec![q * per_level, 2], refs)?)?;
        let off = g.slice_cols(offsets, l * per_level * 2, per_level * 2)?;
        let off = g.reshape(off, &[q * per_level, 2])?;
        let coords = g.add(refs, off)?;
        let samples = g.sample_points(fm.var, coords)?;
        let wl = if levels == 1 { weights } else { g.slice_cols(weights, l * per_level, per_level)? };
        let part = g.group_weighted_sum(samples, wl)?;
        out = Some(match out {
            Some(acc) => g.add(acc, part)?,
            None => part,
        });
    }
    let out = out.ok_or_else(|| Error::Dimension("no pyramid levels".into()))?;
    Ok(DeformSample { out, hit, weights })
}

/// Layout of the sampling set per query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleLayout {
    pub levels: usize,
    pub pillars: usize,
    pub points: usize,
}

impl SampleLayout {
    pub fn per_query(&self) -> usize {
        self.levels * self.pillars * self.points
    }
}

/// Deformable cross-attention from BEV queries into every view.
#[derive(Clone, Debug)]
pub struct SpatialCrossAttention {
    pub norm: LayerNorm,
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub output: Linear,
    pub layout: SampleLayout,
}

/// Intermediate values of one cross-attention pass.
#[derive(Clone, Debug)]
pub struct CrossAttentionTrace {
    pub offsets: Var,
    pub per_view: Vec<DeformSample>,
    /// Number of views hitting each query.
    pub hits: Vec<usize>,
}

impl SpatialCrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, layout: SampleLayout) -> Result<Self> {
        let k = layout.per_query();
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), c)?,
            offsets: Linear::with_init(store, &format!("{name}.offsets"), c, 2 * k, Init::Zeros)?,
            weights: Linear::with_init(store, &format!("{name}.weights"), c, k, Init::Zeros)?,
            value: Linear::new(store, &format!("{name}.value"), c, c)?,
            output: Linear::new(store, &format!("{name}.output"), c, c)?,
            layout,
        })
    }

    /// `queries + hit_mask ⊙ W_o (Σ_views sample_v / hits)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        views: &[Vec<FeatureMap>],
        table: &ProjectionTable<T>,
    ) -> Result<(Var, CrossAttentionTrace)> {
        if views.len() != table.views {
            return dim_err(format!("{} views vs {} in projection table", views.len(), table.views));
        }
        let qn = self.norm.forward(g, store, queries)?;
        let offsets = self.offsets.forward(g, store, qn)?;
        let logits = self.weights.forward(g, store, qn)?;
        let mut total: Option<Var> = None;
        let mut hits = vec![0usize; table.cells];
        let mut per_view = Vec::with_capacity(views.len());
        for (v, pyramid) in views.iter().enumerate() {
            let values = pyramid
                .iter()
                .map(|fm| {
                    let t = fm.flatten(g)?;
                    let t = self.value.forward(g, store, t)?;
                    let var = g.reshape(t, &[fm.h, fm.w, self.value.d_out])?;
                    Ok(FeatureMap { var, c: self.value.d_out, ..*fm })
                })
                .collect::<Result<Vec<_>>>()?;
            let ds = deformable_sample(g, &values, table, v, offsets, logits, self.layout.points)?;
            hits.iter_mut().zip(&ds.hit).for_each(|(h, &b)| *h += usize::from(b));
            total = Some(match total {
                Some(acc) => g.add(acc, ds.out)?,
                None => ds.out,
            });
            per_view.push(ds);
        }
        let total = total.ok_or_else(|| Error::Dimension("no views".into()))?;
        let inv: Vec<T> = hits
            .iter()
            .map(|&h| if h == 0 { T::zero() } else { T::one() / T::from_usize_lossy(h) })
            .collect();
        let mean = g.scale_rows(total, inv)?;
        let update = self.output.forward(g, store, mean)?;
        let mask = hits.iter().map(|&h| if h > 0 { T::one() } else { T::zero() }).collect();
        let update = g.scale_rows(update, mask)?;
        let out = g.add(queries, update)?;
        Ok((
            out,
            CrossAttentionTrace {
                offsets,
                per_view,
                hits,
            },
        ))
    }

    pub fn value_path(&self) -> Vec<ParamId> {
        vec![self.value.weight, self.value.bias, self.output.weight, self.output.bias]
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub cross: SpatialCrossAttention,
    pub ffn: FeedForward,
}

/// Learned BEV query embeddings refined by stacked
/// {cross-attention, feed-forward} blocks, both residual.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    pub embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub width: usize,
    pub cells: usize,
}

impl BevEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cells: usize,
        width: usize,
        layers: usize,
        layout: SampleLayout,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let embed = store.add(format!("{name}.embed"), &[cells, width], Init::UniformFanIn)?;
        let layers = (0..layers)
            .map(|i| {
                Ok(EncoderLayer {
                    cross: SpatialCrossAttention::new(store, &format!("{name}.layer{i}.cross"), width, layout)?,
                    ffn: FeedForward::new(store, &format!("{name}.layer{i}.ffn"), width, 2 * width)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            layers,
            width,
            cells,
        })
    }

    /// `views_per_layer[i]` holds the pyramids (per view) read by layer `i`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        views_per_layer: &[Vec<Vec<FeatureMap>>],
        table: &ProjectionTable<T>,
    ) -> Result<(LiftedKeysValues, Vec<CrossAttentionTrace>)> {
        if views_per_layer.len() != self.layers.len() {
            return dim_err(format!(
                "{} pyramid sets for {} encoder layers",
                views_per_layer.len(),
                self.layers.len()
            ));
        }
        if table.cells != self.cells {
            return dim_err(format!("table has {} cells, encoder {}", table.cells, self.cells));
        }
        let mut q = g.param(store, self.embed);
        let mut traces = Vec::with_capacity(self.layers.len());
        for (layer, views) in self.layers.iter().zip(views_per_layer) {
            let (x, trace) = layer.cross.forward(g, store, q, views, table)?;
            q = layer.ffn.forward(g, store, x)?;
            traces.push(trace);
        }
        Ok((
            LiftedKeysValues {
                tokens: q,
                count: self.cells,
                width: self.width,
            },
            traces,
        ))
    }
}
