//! Patch-to-cluster attention over multi-view feature pyramids.
//!
//! For a map flattened to tokens `F` (`N×c`):
//!
//! ```text
//! C = softmax_over_tokens(Clustering(F))      N×M, columns sum to 1
//! z = LN(Cᵀ F)                                M×c
//! F' = softmax(Q Kᵀ / √(c/heads)) V + F       Q from F, K and V from z
//! ```
//!
//! With `cross_level` enabled every level of a view attends to the row-stack
//! of all its levels' clusters; otherwise each level only sees its own.
//! Clusters never mix across views.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{AttentionOutput, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringOp {
    /// One affine map `c → M`.
    Linear,
    /// `c → c`, ReLU, `c → M`.
    Mlp,
    /// 3×3 same-padding convolution `c → c` over the map, then a 1×1 map `c → M`.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub clusters: usize,
    pub heads: usize,
    pub clustering_op: ClusteringOp,
    pub cross_level: bool,
    pub layers: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            clusters: 100,
            heads: 8,
            clustering_op: ClusteringOp::Conv,
            cross_level: true,
            layers: 6,
        }
    }
}

impl ClusterConfig {
    /// Same-level-only variant.
    pub fn lite() -> Self {
        Self {
            cross_level: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::Config("clusters must be >= 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("mvacon layers must be >= 1".into()));
        }
        if self.heads == 0 || width % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide channel width {width}",
                self.heads
            )));
        }
        Ok(())
    }
}

/// A feature map recorded on a graph as an `h×w×c` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl FeatureMap {
    pub fn new<T: Scalar>(g: &Graph<T>, var: Var) -> Result<Self> {
        match *g.shape(var) {
            [h, w, c] => Ok(Self { var, h, w, c }),
            ref s => dim_err(format!("feature map must be h×w×c, got {s:?}")),
        }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    /// `N×c` token view.
    pub fn flatten<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.reshape(self.var, &[self.h * self.w, self.c])
    }
}

/// Learned clustering logits, one of the three operator families.
#[derive(Clone, Debug)]
pub enum Clustering {
    Linear(Linear),
    Mlp(Mlp),
    Conv { conv: Conv2d, proj: Linear },
}

impl Clustering {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        op: ClusteringOp,
        width: usize,
        clusters: usize,
    ) -> Result<Self> {
        Ok(match op {
            ClusteringOp::Linear => Self::Linear(Linear::new(store, name, width, clusters)?),
            ClusteringOp::Mlp => Self::Mlp(Mlp::new(store, name, width, width, clusters)?),
            ClusteringOp::Conv => Self::Conv {
                conv: Conv2d::new(store, &format!("{name}.conv"), width, width, 3, 1, 1)?,
                proj: Linear::new(store, &format!("{name}.proj"), width, clusters)?,
            },
        })
    }

    pub fn op(&self) -> ClusteringOp {
        match self {
            Self::Linear(_) => ClusteringOp::Linear,
            Self::Mlp(_) => ClusteringOp::Mlp,
            Self::Conv { .. } => ClusteringOp::Conv,
        }
    }

    /// `N×M` logits. The conv variant needs the `(h, w)` layout of the tokens.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        layout: Option<(usize, usize)>,
    ) -> Result<Var> {
        match self {
            Self::Linear(l) => l.forward(g, store, tokens),
            Self::Mlp(m) => m.forward(g, store, tokens),
            Self::Conv { conv, proj } => {
                let (h, w) = layout
                    .ok_or_else(|| Error::Config("conv clustering needs (h, w) layout".into()))?;
                let (n, c) = g.value(tokens).dims2()?;
                if n != h * w {
                    return Err(Error::Config(format!("layout {h}×{w} does not hold {n} tokens")));
                }
                let map = g.reshape(tokens, &[h, w, c])?;
                let y = conv.forward(g, store, map)?;
                let y = g.reshape(y, &[n, conv.c_out])?;
                proj.forward(g, store, y)
            }
        }
    }
}

/// Soft assignment of `N` tokens to `M` clusters; softmax runs over tokens,
/// so each column is a distribution over the map.
pub fn cluster_assign<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    clustering: &Clustering,
    tokens: Var,
    layout: Option<(usize, usize)>,
) -> Result<Var> {
    if g.value(tokens).dims2()?.0 == 0 {
        return dim_err("cluster_assign needs at least one token");
    }
    let logits = clustering.logits(g, store, tokens, layout)?;
    g.softmax(logits, 0)
}

/// `LN(Cᵀ F)`; also returns the pre-normalization product.
pub fn compute_clusters<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    tokens: Var,
    assignment: Var,
    norm: &LayerNorm,
) -> Result<(Var, Var)> {
    let (n, _) = g.value(tokens).dims2()?;
    let (n2, _) = g.value(assignment).dims2()?;
    if n != n2 {
        return dim_err(format!("assignment has {n2} rows for {n} tokens"));
    }
    let ct = g.transpose(assignment)?;
    let raw = g.matmul(ct, tokens)?;
    let z = norm.forward(g, store, raw)?;
    Ok((z, raw))
}

/// Token-to-cluster attention with the identity shortcut.
#[derive(Clone, Debug)]
pub struct PacaAttention {
    pub attn: MultiHeadAttention,
}

impl PacaAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, name, width, width, width, heads)?,
        })
    }

    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        clusters: Var,
    ) -> Result<Var> {
        Ok(self.attend_with_weights(g, store, tokens, clusters)?.out)
    }

    /// Like [`attend`](Self::attend) but also exposes per-head `N×M` weights.
    pub fn attend_with_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: Var,
        clusters: Var,
    ) -> Result<AttentionOutput> {
        let (_, c) = g.value(tokens).dims2()?;
        let (m, cz) = g.value(clusters).dims2()?;
        if m == 0 {
            return dim_err("paca_attend needs at least one cluster");
        }
        if c != cz {
            return dim_err(format!("token width {c} vs cluster width {cz}"));
        }
        let AttentionOutput { out, weights } = self.attn.forward(g, store, tokens, clusters)?;
        let out = g.add(out, tokens)?;
        Ok(AttentionOutput { out, weights })
    }

    /// Parameters whose zeroing turns the block into the identity.
    pub fn value_path(&self) -> Vec<crate::ParamId> {
        vec![
            self.attn.v.weight,
            self.attn.v.bias,
            self.attn.o.weight,
            self.attn.o.bias,
        ]
    }
}

/// Concrete assignment and clusters of one (view, level).
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet<T> {
    pub assignment: Tensor<T>,
    pub clusters: Tensor<T>,
    pub view: usize,
    pub level: usize,
}

/// Row-stacks cluster tensors of one view in ascending level order.
pub fn concat_levels<T: Scalar>(sets: &[ClusterSet<T>]) -> Result<Tensor<T>> {
    let Some(first) = sets.first() else {
        return dim_err("concat_levels: no cluster sets");
    };
    let (_, c) = first.clusters.dims2()?;
    let mut ordered: Vec<&ClusterSet<T>> = sets.iter().collect();
    ordered.sort_by_key(|s| s.level);
    let mut rows = 0;
    let mut data = Vec::new();
    for s in ordered {
        let (m, cs) = s.clusters.dims2()?;
        if cs != c {
            return dim_err(format!("cluster width {cs} vs {c}"));
        }
        if s.view != first.view {
            return dim_err("concat_levels: sets come from different views");
        }
        rows += m;
        data.extend_from_slice(s.clusters.data());
    }
    Tensor::new(vec![rows, c], data)
}

/// Contextualization parameters of one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelBlock {
    pub clustering: Clustering,
    pub norm: LayerNorm,
    pub paca: PacaAttention,
}

/// Graph handles produced while contextualizing one view.
#[derive(Clone, Debug, Default)]
pub struct ViewClusters {
    pub assignments: Vec<Var>,
    /// `Cᵀ F` before layer normalization.
    pub raw: Vec<Var>,
    pub clusters: Vec<Var>,
    /// Per level, per head attention weights.
    pub attention: Vec<Vec<Var>>,
}

/// One contextualization module over an `L`-level pyramid with unshared
/// per-level parameters.
#[derive(Clone, Debug)]
pub struct Mvacon {
    pub cfg: ClusterConfig,
    pub width: usize,
    pub levels: Vec<LevelBlock>,
}

impl Mvacon {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ClusterConfig,
        width: usize,
        num_levels: usize,
    ) -> Result<Self> {
        cfg.validate(width)?;
        if num_levels == 0 {
            return Err(Error::Config("mvacon needs at least one level".into()));
        }
        let levels = (0..num_levels)
            .map(|l| {
                let p = format!("{name}.level{l}");
                Ok(LevelBlock {
                    clustering: Clustering::new(store, &format!("{p}.cluster"), cfg.clustering_op, width, cfg.clusters)?,
                    norm: LayerNorm::new(store, &format!("{p}.norm"), width)?,
                    paca: PacaAttention::new(store, &format!("{p}.paca"), width, cfg.heads)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            width,
            levels,
        })
    }

    /// Contextualizes the pyramid of a single view. Output shapes equal
    /// input shapes.
    pub fn contextualize_view<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &[FeatureMap],
    ) -> Result<(Vec<FeatureMap>, ViewClusters)> {
        if pyramid.len() != self.levels.len() {
            return dim_err(format!(
                "pyramid has {} levels, module built for {}",
                pyramid.len(),
                self.levels.len()
            ));
        }
        let mut trace = ViewClusters::default();
        let mut tokens = Vec::with_capacity(pyramid.len());
        for (fm, block) in pyramid.iter().zip(&self.levels) {
            if fm.c != self.width {
                return dim_err(format!("map width {} vs module width {}", fm.c, self.width));
            }
            let t = fm.flatten(g)?;
            let assign = cluster_assign(g, store, &block.clustering, t, Some((fm.h, fm.w)))?;
            let (z, raw) = compute_clusters(g, store, t, assign, &block.norm)?;
            tokens.push(t);
            trace.assignments.push(assign);
            trace.raw.push(raw);
            trace.clusters.push(z);
        }
        let stacked = if self.cfg.cross_level && pyramid.len() > 1 {
            Some(g.concat_rows(&trace.clusters)?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(pyramid.len());
        for (l, (fm, block)) in pyramid.iter().zip(&self.levels).enumerate() {
            let kv = stacked.unwrap_or(trace.clusters[l]);
            let AttentionOutput { out: y, weights } = block.paca.attend_with_weights(g, store, tokens[l], kv)?;
            let y = g.reshape(y, &[fm.h, fm.w, fm.c])?;
            out.push(FeatureMap { var: y, ..*fm });
            trace.attention.push(weights);
        }
        Ok((out, trace))
    }

    /// Contextualizes every view independently, in view order.
    pub fn contextualize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        views: &[Vec<FeatureMap>],
    ) -> Result<Vec<Vec<FeatureMap>>> {
        views
            .iter()
            .map(|p| self.contextualize_view(g, store, p).map(|(o, _)| o))
            .collect()
    }

    /// Reads the concrete cluster sets of one contextualized view.
    pub fn cluster_sets<T: Scalar>(g: &Graph<T>, trace: &ViewClusters, view: usize) -> Vec<ClusterSet<T>> {
        trace
            .assignments
            .iter()
            .zip(&trace.clusters)
            .enumerate()
            .map(|(level, (&a, &z))| ClusterSet {
                assignment: g.value(a).clone(),
                clusters: g.value(z).clone(),
                view,
                level,
            })
            .collect()
    }

    pub fn value_paths(&self) -> Vec<crate::ParamId> {
        self.levels.iter().flat_map(|b| b.paca.value_path()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        ParamStore::new(7)
    }

    #[test]
    fn single_token_assignment_is_all_ones() {
        let mut s = store();
        for op in [ClusteringOp::Linear, ClusteringOp::Mlp, ClusteringOp::Conv] {
            let cl = Clustering::new(&mut s, &format!("{op:?}"), op, 4, 3).unwrap();
            let mut g = Graph::new();
            let f = g.constant(Tensor::from_fn(&[1, 4], |i| i as f64 - 1.3)).unwrap();
            let c = cluster_assign(&mut g, &s, &cl, f, Some((1, 1))).unwrap();
            assert_eq!(g.value(c).data(), &[1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn identical_tokens_give_uniform_columns() {
        let mut s = store();
        let cl = Clustering::new(&mut s, "c", ClusteringOp::Linear, 3, 2).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[5, 3], |i| [0.3, -1.0, 2.0][i % 3])).unwrap();
        let c = cluster_assign(&mut g, &s, &cl, f, None).unwrap();
        assert!(g.value(c).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn conv_without_layout_is_config_error() {
        let mut s = store();
        let cl = Clustering::new(&mut s, "c", ClusteringOp::Conv, 2, 2).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::ones(&[4, 2])).unwrap();
        assert!(matches!(cluster_assign(&mut g, &s, &cl, f, None), Err(Error::Config(_))));
    }

    #[test]
    fn concat_levels_orders_and_checks() {
        let set = |level, m, v: f64| ClusterSet {
            assignment: Tensor::ones(&[1, m]),
            clusters: Tensor::full(&[m, 2], v),
            view: 0,
            level,
        };
        let t = concat_levels(&[set(1, 2, 1.0), set(0, 1, 0.0)]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let mut bad = set(2, 1, 0.0);
        bad.clusters = Tensor::ones(&[1, 3]);
        assert!(concat_levels(&[set(0, 1, 0.0), bad]).is_err());
        let mut other_view = set(1, 1, 0.0);
        other_view.view = 1;
        assert!(concat_levels(&[set(0, 1, 0.0), other_view]).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ClusterConfig {
            heads: 3,
            ..ClusterConfig::default()
        };
        assert!(cfg.validate(16).is_err());
        assert!(ClusterConfig::default().validate(16).is_ok());
        let mut s = store();
        assert!(Mvacon::new(&mut s, "m", &cfg, 16, 1).is_err());
    }

    #[test]
    fn empty_or_mismatched_clusters_are_dimension_errors() {
        assert!(matches!(
            Tensor::<f64>::new(vec![0, 2], vec![]),
            Err(Error::Dimension(_))
        ));
        let mut s = store();
        let paca = PacaAttention::new(&mut s, "p", 2, 1).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::ones(&[3, 2])).unwrap();
        let z = g.constant(Tensor::ones(&[1, 3])).unwrap();
        assert!(matches!(paca.attend(&mut g, &s, f, z), Err(Error::Dimension(_))));
    }
}
