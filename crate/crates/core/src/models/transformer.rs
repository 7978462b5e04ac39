use super::params::{Init, ParamSpec, ParamVars};
use super::Result;
use crate::tensor::{Tape, Var};

/// Tape handles for one pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub(crate) fn layer_specs(prefix: &str, dim: usize, ffn: usize) -> Vec<ParamSpec> {
    let p = |s: &str| format!("{prefix}.{s}");
    vec![
        ParamSpec::new(p("ln1.gain"), &[dim], Init::Ones),
        ParamSpec::new(p("ln1.bias"), &[dim], Init::Zeros),
        ParamSpec::new(p("attn.wq"), &[dim, dim], Init::FanIn),
        ParamSpec::new(p("attn.wk"), &[dim, dim], Init::FanIn),
        ParamSpec::new(p("attn.wv"), &[dim, dim], Init::FanIn),
        ParamSpec::new(p("attn.wo"), &[dim, dim], Init::FanIn),
        ParamSpec::new(p("attn.bo"), &[dim], Init::Zeros),
        ParamSpec::new(p("ln2.gain"), &[dim], Init::Ones),
        ParamSpec::new(p("ln2.bias"), &[dim], Init::Zeros),
        ParamSpec::new(p("ffn.w1"), &[dim, ffn], Init::FanIn),
        ParamSpec::new(p("ffn.b1"), &[ffn], Init::Zeros),
        ParamSpec::new(p("ffn.w2"), &[ffn, dim], Init::FanIn),
        ParamSpec::new(p("ffn.b2"), &[dim], Init::Zeros),
    ]
}

impl TransformerLayerVars {
    pub fn lookup(vars: &ParamVars, prefix: &str) -> Result<Self> {
        let g = |s: &str| vars.get(&format!("{prefix}.{s}"));
        Ok(Self {
            ln1_gain: g("ln1.gain")?,
            ln1_bias: g("ln1.bias")?,
            wq: g("attn.wq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            wo: g("attn.wo")?,
            bo: g("attn.bo")?,
            ln2_gain: g("ln2.gain")?,
            ln2_bias: g("ln2.bias")?,
            w1: g("ffn.w1")?,
            b1: g("ffn.b1")?,
            w2: g("ffn.w2")?,
            b2: g("ffn.b2")?,
        })
    }
}

/// Repeats a `[batch × seq × seq]` mask once per head, matching the
/// `[batch·heads × seq × seq]` score layout.
pub fn expand_mask_to_heads(mask: &[bool], batch: usize, seq: usize, heads: usize) -> Vec<bool> {
    let block = seq * seq;
    let mut out = Vec::with_capacity(batch * heads * block);
    for b in 0..batch {
        for _ in 0..heads {
            out.extend_from_slice(&mask[b * block..(b + 1) * block]);
        }
    }
    out
}

/// One pre-norm block over `x: [batch·seq × d]`:
/// `h = x + Wo·concat_h softmax(Q_h K_hᵀ/√d_Q) V_h + bo`, then
/// `out = h + W2·GELU(W1·LN2(h) + b1) + b2`, with Q, K, V projected from `LN1(x)`.
/// `head_mask` is `[batch·heads × seq × seq]`.
#[allow(clippy::too_many_arguments)]
pub fn transformer_layer_forward(
    tape: &mut Tape,
    x: Var,
    head_mask: &[bool],
    layer: &TransformerLayerVars,
    batch: usize,
    seq: usize,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let d_q = d / heads;
    let normed = tape.layer_norm(x, layer.ln1_gain, layer.ln1_bias, eps)?;
    let q = tape.matmul(normed, layer.wq)?;
    let k = tape.matmul(normed, layer.wk)?;
    let v = tape.matmul(normed, layer.wv)?;
    let q = tape.split_heads(q, batch, seq, heads)?;
    let k = tape.split_heads(k, batch, seq, heads)?;
    let v = tape.split_heads(v, batch, seq, heads)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d_q as f64).sqrt())?;
    let weights = tape.softmax_masked(scores, head_mask)?;
    let attended = tape.bmm(weights, v, false)?;
    let merged = tape.merge_heads(attended, batch, heads)?;
    let projected = tape.matmul(merged, layer.wo)?;
    let projected = tape.add_row(projected, layer.bo)?;
    let h = tape.add(x, projected)?;

    let normed = tape.layer_norm(h, layer.ln2_gain, layer.ln2_bias, eps)?;
    let inner = tape.matmul(normed, layer.w1)?;
    let inner = tape.add_row(inner, layer.b1)?;
    let inner = tape.gelu(inner)?;
    let out = tape.matmul(inner, layer.w2)?;
    let out = tape.add_row(out, layer.b2)?;
    Ok(tape.add(h, out)?)
}
