//! Layers shared by the vision encoders and the language model.

use crate::error::Result;
use crate::params::{Binder, ParameterStore};
use crate::tensor::{AttentionSpec, Graph, Rng, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    rng.uniform_tensor([fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

/// `x·w (+ b)`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// Geometry of one pre-norm transformer block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

/// Inserts the weights of one pre-norm block under `prefix`.
pub fn init_block(
    store: &mut ParameterStore,
    prefix: &str,
    shape: BlockShape,
    rng: &mut Rng,
    frozen: bool,
) -> Result<()> {
    let d = shape.dim;
    let h = shape.mlp_hidden;
    for ln in ["ln1", "ln2"] {
        store.insert(format!("{prefix}.{ln}.gamma"), Tensor::full([d], 1.0), frozen)?;
        store.insert(format!("{prefix}.{ln}.beta"), Tensor::zeros([d]), frozen)?;
    }
    for w in ["q", "k", "v", "o"] {
        store.insert(format!("{prefix}.attn.w{w}"), fan_in_uniform(rng, d, d), frozen)?;
        store.insert(format!("{prefix}.attn.b{w}"), Tensor::zeros([d]), frozen)?;
    }
    store.insert(format!("{prefix}.mlp.fc1.weight"), fan_in_uniform(rng, d, h), frozen)?;
    store.insert(format!("{prefix}.mlp.fc1.bias"), Tensor::zeros([h]), frozen)?;
    store.insert(format!("{prefix}.mlp.fc2.weight"), fan_in_uniform(rng, h, d), frozen)?;
    store.insert(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros([d]), frozen)?;
    Ok(())
}

/// `h + MHSA(LN(h))` followed by `h + MLP(LN(h))` over `batch` sequences
/// stacked row-wise in `h`.
pub fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut Binder<'_, T>,
    prefix: &str,
    h: Var,
    heads: usize,
    batch: usize,
    causal: bool,
) -> Result<Var> {
    let mut p = |g: &mut Graph<T>, n: &str| params.get(g, &format!("{prefix}.{n}"));

    let (g1, b1) = (p(g, "ln1.gamma")?, p(g, "ln1.beta")?);
    let x = g.layer_norm(h, g1, b1, LN_EPS)?;
    let (wq, bq) = (p(g, "attn.wq")?, p(g, "attn.bq")?);
    let (wk, bk) = (p(g, "attn.wk")?, p(g, "attn.bk")?);
    let (wv, bv) = (p(g, "attn.wv")?, p(g, "attn.bv")?);
    let (wo, bo) = (p(g, "attn.wo")?, p(g, "attn.bo")?);
    let q = linear(g, x, wq, Some(bq))?;
    let k = linear(g, x, wk, Some(bk))?;
    let v = linear(g, x, wv, Some(bv))?;
    let a = g.attention(q, k, v, AttentionSpec { heads, batch, causal })?;
    let a = linear(g, a, wo, Some(bo))?;
    let h = g.add(h, a)?;

    let (g2, b2) = (p(g, "ln2.gamma")?, p(g, "ln2.beta")?);
    let x = g.layer_norm(h, g2, b2, LN_EPS)?;
    let (w1, c1) = (p(g, "mlp.fc1.weight")?, p(g, "mlp.fc1.bias")?);
    let (w2, c2) = (p(g, "mlp.fc2.weight")?, p(g, "mlp.fc2.bias")?);
    let x = linear(g, x, w1, Some(c1))?;
    let x = g.gelu(x)?;
    let x = linear(g, x, w2, Some(c2))?;
    g.add(h, x)
}
