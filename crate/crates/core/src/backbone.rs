//! Small strided-convolution feature pyramid.

use serde::{Deserialize, Serialize};

use crate::cluster::FeatureMap;
use crate::error::{dim_err, Error, Result};
use crate::nn::Conv2d;
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: usize,
    /// Pyramid levels at strides 4, 8, 16, ...
    pub levels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { channels: 16, levels: 3 }
    }
}

/// A 4×4 stride-4 stem followed by 3×3 stride-2 blocks, each with ReLU.
#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub stem: Conv2d,
    pub blocks: Vec<Conv2d>,
}

impl ToyBackbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, cfg: &BackboneConfig) -> Result<Self> {
        if cfg.levels == 0 || cfg.channels == 0 {
            return Err(Error::Config("backbone needs >= 1 level and channel".into()));
        }
        let c = cfg.channels;
        Ok(Self {
            stem: Conv2d::new(store, &format!("{name}.stem"), c_in, c, 4, 4, 0)?,
            blocks: (1..cfg.levels)
                .map(|i| Conv2d::new(store, &format!("{name}.block{i}"), c, c, 3, 2, 1))
                .collect::<Result<Vec<_>>>()?,
        })
    }

    /// Feature-map sizes for an `h×w` image.
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut s = vec![self.stem.out_size(h, w)];
        for b in &self.blocks {
            let (ph, pw) = s[s.len() - 1];
            s.push(b.out_size(ph, pw));
        }
        s
    }

    /// `image` is `H×W×c_in`; returns finest level first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<Vec<FeatureMap>> {
        let &[h, w, _] = g.shape(image) else {
            return dim_err("backbone expects an H×W×C image");
        };
        if h < self.stem.kernel || w < self.stem.kernel {
            return dim_err(format!("image {h}×{w} smaller than the stem kernel"));
        }
        let x = self.stem.forward(g, store, image)?;
        let mut x = g.relu(x)?;
        let mut out = vec![FeatureMap::new(g, x)?];
        for b in &self.blocks {
            let y = b.forward(g, store, x)?;
            x = g.relu(y)?;
            out.push(FeatureMap::new(g, x)?);
        }
        Ok(out)
    }
}
