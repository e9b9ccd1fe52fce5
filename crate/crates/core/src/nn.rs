//! Parameterized building blocks recorded onto a [`Graph`].

use crate::error::{dim_err, Result};
use crate::param::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Layer-norm epsilon used across the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, Init::UniformFanIn)
    }

    pub fn with_init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), &[d_in, d_out], init)?,
            bias: store.add(format!("{name}.bias"), &[d_out], Init::Zeros)?,
            d_in,
            d_out,
        })
    }

    /// `x·W + b` for `x` of shape `[n, d_in]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

/// Two affine maps with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden)?,
            out: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.out.forward(g, store, h)
    }
}

/// 2-D convolution over an `h×w×c` map via patch unfolding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                &[kernel * kernel * c_in, c_out],
                Init::UniformFanIn,
            )?,
            bias: store.add(format!("{name}.bias"), &[c_out], Init::Zeros)?,
            kernel,
            stride,
            pad,
            c_in,
            c_out,
        })
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// `x` is `h×w×c_in`; the result is `ho×wo×c_out`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let &[h, w, c] = g.shape(x) else {
            return dim_err(format!("conv2d expects h×w×c, got {:?}", g.shape(x)));
        };
        if c != self.c_in {
            return dim_err(format!("conv2d: {c} input channels, expected {}", self.c_in));
        }
        let (ho, wo) = self.out_size(h, w);
        let cols = g.im2col(x, self.kernel, self.stride, self.pad)?;
        let wv = g.param(store, self.weight);
        let bv = g.param(store, self.bias);
        let y = g.matmul(cols, wv)?;
        let y = g.add_row(y, bv)?;
        g.reshape(y, &[ho, wo, self.c_out])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), &[width], Init::Ones)?,
            beta: store.add(format!("{name}.beta"), &[width], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value sources: `O(concat_h softmax(Q_h K_hᵀ / √(d/heads)) V_h)`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Attention output plus the per-head `n×m` weight matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        q_width: usize,
        kv_width: usize,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(crate::Error::Config(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), q_width, width)?,
            k: Linear::new(store, &format!("{name}.k"), kv_width, width)?,
            v: Linear::new(store, &format!("{name}.v"), kv_width, width)?,
            o: Linear::new(store, &format!("{name}.o"), width, q_width)?,
            heads,
            width,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys_values: Var,
    ) -> Result<AttentionOutput> {
        if g.value(keys_values).dims2()?.0 == 0 {
            return dim_err("attention over an empty key set");
        }
        let q = self.q.forward(g, store, queries)?;
        let k = self.k.forward(g, store, keys_values)?;
        let v = self.v.forward(g, store, keys_values)?;
        let dh = self.width / self.heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (merged, weights) = g.attention(q, k, v, self.heads, scale)?;
        let out = self.o.forward(g, store, merged)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Pre-norm feed-forward block with residual: `x + W₂ relu(W₁ LN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, hidden, width)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn zero_out<T: Scalar>(&self, store: &mut ParamStore<T>) {
        zero_params(store, &[self.mlp.out.weight, self.mlp.out.bias]);
    }
}

/// Sets every element of the listed parameters to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
    }
}
