//! Frozen-capable backbones: a pre-norm graph transformer and a
//! message-passing GNN sharing one input pipeline (raw features ⊕ RWPE,
//! linear projection, degree embedding), a masked readout and a linear
//! prediction head.
//!
//! Backbones hold configuration and parameter values; a forward pass reads
//! parameters through [`ParamVars`], so the caller decides per pass which
//! tensors are trainable.

mod mpgnn;
mod params;
mod transformer;

pub use mpgnn::mpgnn_layer_forward;
pub use params::{Init, ParamSpec, ParamStore, ParamVars};
pub use transformer::{expand_mask_to_heads, transformer_layer_forward, TransformerLayerVars};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{with_rwpe, BatchedGraph, GraphError, GraphSample};
use crate::prompt::{apply_graph_prompt, extend_sequence, inject_prefix, BoundPrompt, TokenPlacement};
use crate::tensor::{AggregateMode, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Transformer,
    Mpgnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReadoutMode {
    Sum,
    Mean,
}

/// Architecture of a backbone. Everything here is covered by the checkpoint
/// fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Raw node-feature width before encodings are appended.
    pub raw_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub readout: ReadoutMode,
    pub aggregation: AggregateMode,
    pub rwpe_steps: usize,
    pub max_degree: usize,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Transformer,
            raw_dim: crate::graph::RAW_FEATURE_DIM,
            dim: 64,
            heads: 4,
            layers: 6,
            ffn_mult: 4,
            readout: ReadoutMode::Mean,
            aggregation: AggregateMode::Sum,
            rwpe_steps: 8,
            max_degree: 8,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Width of the projected input: raw features plus RWPE columns.
    pub fn input_dim(&self) -> usize {
        self.raw_dim + self.rwpe_steps
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 {
            return fail("backbone needs at least one layer".into());
        }
        if self.dim == 0 || self.raw_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.max_degree == 0 {
            return fail("max_degree must be at least 1".into());
        }
        if self.kind == BackboneKind::Transformer {
            if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
                return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
            }
            if self.ffn_mult == 0 {
                return fail("ffn_mult must be positive".into());
            }
        }
        if self.ln_eps <= 0.0 {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Every backbone parameter, without allocating values.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.dim;
        let mut specs = vec![
            ParamSpec::new("input.weight", &[self.input_dim(), d], Init::FanIn),
            ParamSpec::new("input.bias", &[d], Init::Zeros),
            ParamSpec::new("degree.table", &[self.max_degree + 1, d], Init::Small),
        ];
        for l in 0..self.layers {
            let prefix = format!("layers.{l}");
            match self.kind {
                BackboneKind::Transformer => specs.extend(transformer::layer_specs(&prefix, d, d * self.ffn_mult)),
                BackboneKind::Mpgnn => specs.extend(mpgnn::layer_specs(&prefix, d)),
            }
        }
        if self.kind == BackboneKind::Transformer {
            specs.push(ParamSpec::new("final_norm.gain", &[d], Init::Ones));
            specs.push(ParamSpec::new("final_norm.bias", &[d], Init::Zeros));
        }
        specs
    }
}

/// Output of [`Backbone::forward`].
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// `[batch × d]` graph embeddings.
    pub embeddings: Var,
    /// Hidden state after each layer, `[batch·seq_len × d]`.
    pub layer_outputs: Vec<Var>,
    pub seq_len: usize,
    /// Leading prefix positions per sample; node `i` of sample `b` sits at
    /// row `b·seq_len + prefix_slots + i`.
    pub prefix_slots: usize,
}

/// Backbone `f_θ`: configuration plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

impl Backbone {
    pub fn init(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_specs(&config.param_specs(), rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_specs(&config.param_specs())?;
        Ok(Self { config, params })
    }

    /// Appends the configured RWPE columns to a raw sample.
    pub fn encode(&self, g: &GraphSample) -> Result<GraphSample> {
        if g.feature_dim() != self.config.raw_dim {
            return Err(GraphError::FeatureWidth {
                expected: self.config.raw_dim,
                got: g.feature_dim(),
            }
            .into());
        }
        Ok(with_rwpe(g, self.config.rwpe_steps)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        batch: &BatchedGraph,
        prompt: Option<&BoundPrompt>,
    ) -> Result<BackboneOutput> {
        let cfg = &self.config;
        if batch.feature_dim != cfg.input_dim() {
            return Err(ModelError::Config(format!(
                "batch feature width {} does not match backbone input width {}",
                batch.feature_dim,
                cfg.input_dim()
            )));
        }
        let b = batch.batch_size;
        let n = batch.max_nodes;

        let mut x = tape.constant(batch.features.clone());
        if let Some(BoundPrompt {
            graph_token: Some(tok),
            placement: TokenPlacement::PreProjection,
            ..
        }) = prompt
        {
            x = apply_graph_prompt(tape, x, *tok, &batch.readout_mask)?;
        }
        let mut h = tape.matmul(x, vars.get("input.weight")?)?;
        h = tape.add_row(h, vars.get("input.bias")?)?;
        let degree_rows: Vec<Option<usize>> = batch
            .degrees
            .iter()
            .zip(&batch.node_mask)
            .map(|(&deg, &real)| real.then(|| deg.min(cfg.max_degree)))
            .collect();
        let deg = tape.gather_rows(vars.get("degree.table")?, &degree_rows)?;
        h = tape.add(h, deg)?;

        if let Some(BoundPrompt {
            graph_token: Some(tok),
            placement: TokenPlacement::PostProjection,
            ..
        }) = prompt
        {
            h = apply_graph_prompt(tape, h, *tok, &batch.readout_mask)?;
        }
        match prompt.and_then(|p| p.virtual_tokens) {
            Some(tokens) => {
                if batch.virtual_rows.is_empty() {
                    return Err(ModelError::Config(
                        "prompt carries virtual tokens but the batch has no virtual nodes".into(),
                    ));
                }
                h = tape.overwrite_rows(h, tokens, &batch.virtual_rows)?;
            }
            None if !batch.virtual_rows.is_empty() => {
                return Err(ModelError::Config(
                    "batch carries virtual nodes but no virtual tokens were supplied".into(),
                ));
            }
            None => {}
        }

        let mut layer_outputs = Vec::with_capacity(cfg.layers);
        let (seq, slots) = match cfg.kind {
            BackboneKind::Transformer => {
                let prefixed = prompt.filter(|p| !p.prefixes.is_empty());
                let slots = prefixed.map_or(0, |p| p.prefix_len);
                if let Some(p) = prefixed {
                    if let Some(&last) = p.prefixes.keys().next_back() {
                        if last >= cfg.layers {
                            return Err(ModelError::Config(format!(
                                "prefix for layer {last} but the backbone has {} layers",
                                cfg.layers
                            )));
                        }
                    }
                }
                let seq = slots + n;
                if slots > 0 {
                    h = extend_sequence(tape, h, b, n, slots)?;
                }
                let first_prompted = prefixed.and_then(|p| p.prefixes.keys().next().copied());
                let dormant = expand_mask_to_heads(&sequence_mask(batch, slots, false), b, seq, cfg.heads);
                let live = if slots > 0 {
                    expand_mask_to_heads(&sequence_mask(batch, slots, true), b, seq, cfg.heads)
                } else {
                    Vec::new()
                };
                for l in 0..cfg.layers {
                    if let Some(p) = prefixed {
                        if p.prefixes.contains_key(&l) {
                            h = inject_prefix(tape, h, p, l, b, seq)?;
                        }
                    }
                    let mask = match first_prompted {
                        Some(f) if l >= f => &live,
                        _ => &dormant,
                    };
                    let layer = TransformerLayerVars::lookup(vars, &format!("layers.{l}"))?;
                    h = transformer_layer_forward(tape, h, mask, &layer, b, seq, cfg.heads, cfg.ln_eps)?;
                    layer_outputs.push(h);
                }
                h = tape.layer_norm(
                    h,
                    vars.get("final_norm.gain")?,
                    vars.get("final_norm.bias")?,
                    cfg.ln_eps,
                )?;
                (seq, slots)
            }
            BackboneKind::Mpgnn => {
                if prompt.is_some_and(|p| !p.prefixes.is_empty()) {
                    return Err(ModelError::Config(
                        "prefix tokens need a transformer backbone; use virtual prompt nodes for message passing"
                            .into(),
                    ));
                }
                let neighbourhoods = batch.flat_neighbourhoods();
                for l in 0..cfg.layers {
                    h = mpgnn_layer_forward(
                        tape,
                        h,
                        &neighbourhoods,
                        vars.get(&format!("layers.{l}.theta.weight"))?,
                        vars.get(&format!("layers.{l}.theta.bias"))?,
                        cfg.aggregation,
                    )?;
                    layer_outputs.push(h);
                }
                (n, 0)
            }
        };

        let mut pooled = vec![false; b * seq];
        for s in 0..b {
            for i in 0..n {
                pooled[s * seq + slots + i] = batch.readout_mask[s * n + i];
            }
        }
        let embeddings = readout(tape, h, b, &pooled, &[], cfg.readout)?;
        Ok(BackboneOutput {
            embeddings,
            layer_outputs,
            seq_len: seq,
            prefix_slots: slots,
        })
    }
}

/// Attention mask over the `[slots + max_nodes]` sequence of each sample.
/// Prefix slots count as present only when `slots_live`; absent positions
/// attend to themselves alone and are never attended to.
pub fn sequence_mask(batch: &BatchedGraph, slots: usize, slots_live: bool) -> Vec<bool> {
    let n = batch.max_nodes;
    let seq = slots + n;
    let mut mask = vec![false; batch.batch_size * seq * seq];
    for b in 0..batch.batch_size {
        let present = |s: usize| {
            if s < slots {
                slots_live
            } else {
                batch.node_mask[b * n + s - slots]
            }
        };
        for i in 0..seq {
            let row = &mut mask[(b * seq + i) * seq..(b * seq + i + 1) * seq];
            if present(i) {
                for (j, m) in row.iter_mut().enumerate() {
                    *m = present(j);
                }
            } else {
                row[i] = true;
            }
        }
    }
    mask
}

/// Sum or mean over the rows of each of `groups` equal blocks where `mask`
/// is set and the row index is not in `exclude`.
pub fn readout(
    tape: &mut Tape,
    h: Var,
    groups: usize,
    mask: &[bool],
    exclude: &[usize],
    mode: ReadoutMode,
) -> Result<Var> {
    let mut keep = mask.to_vec();
    for &r in exclude {
        if let Some(m) = keep.get_mut(r) {
            *m = false;
        }
    }
    Ok(match mode {
        ReadoutMode::Sum => tape.masked_sum_rows(h, groups, &keep)?,
        ReadoutMode::Mean => tape.masked_mean_rows(h, groups, &keep)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub dim: usize,
    pub outputs: usize,
    /// Adds one GELU hidden layer of width `dim`.
    pub hidden: bool,
}

/// Prediction head `p_ψ`. Produces logits or values; link functions live in the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub params: ParamStore,
}

impl HeadConfig {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        if self.hidden {
            specs.push(ParamSpec::new("head.hidden.weight", &[self.dim, self.dim], Init::FanIn));
            specs.push(ParamSpec::new("head.hidden.bias", &[self.dim], Init::Zeros));
        }
        specs.push(ParamSpec::new("head.weight", &[self.dim, self.outputs], Init::FanIn));
        specs.push(ParamSpec::new("head.bias", &[self.outputs], Init::Zeros));
        specs
    }
}

impl Head {
    pub fn init(config: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.outputs == 0 {
            return Err(ModelError::Config("head needs at least one output".into()));
        }
        let params = ParamStore::from_specs(&config.param_specs(), rng);
        Ok(Self { config, params })
    }

    pub fn from_params(config: HeadConfig, params: ParamStore) -> Result<Self> {
        params.check_specs(&config.param_specs())?;
        Ok(Self { config, params })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, embeddings: Var) -> Result<Var> {
        let mut x = embeddings;
        if self.config.hidden {
            x = tape.matmul(x, vars.get("head.hidden.weight")?)?;
            x = tape.add_row(x, vars.get("head.hidden.bias")?)?;
            x = tape.gelu(x)?;
        }
        let out = tape.matmul(x, vars.get("head.weight")?)?;
        Ok(tape.add_row(out, vars.get("head.bias")?)?)
    }
}

/// Full prediction `p_ψ(f_θ(T_φ(G)))` for a batch: `[batch × t]`.
pub fn predict(
    tape: &mut Tape,
    vars: &ParamVars,
    backbone: &Backbone,
    head: &Head,
    batch: &BatchedGraph,
    prompt: Option<&BoundPrompt>,
) -> Result<Var> {
    let out = backbone.forward(tape, vars, batch, prompt)?;
    head.forward(tape, vars, out.embeddings)
}
