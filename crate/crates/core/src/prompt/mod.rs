//! Task-specific prompt parameters and the freeze partition.
//!
//! Three mechanisms are provided, all applied inside [`Backbone::forward`]:
//!
//! - a graph prompt token `p`, added to every original node row (after the
//!   input projection by default, or to the raw encoded input);
//! - per-layer prefix matrices `P^ℓ`, which overwrite `p_len` leading
//!   sequence positions right before each prompted layer ℓ. The positions are
//!   created once, in front of the first prompted layer, and take part in
//!   attention in both directions from that layer on; the readout never pools
//!   them;
//! - virtual prompt nodes for message passing: extra nodes joined to every
//!   original node whose post-projection embeddings are trainable tokens.
//!
//! [`Backbone::forward`]: crate::models::Backbone::forward

mod registry;

pub use registry::{count_params, FreezeRegistry, ParamCounts, TuningMode};

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{BackboneConfig, Init, ModelError, ParamSpec, ParamStore, ParamVars, Result};
use crate::tensor::{Tape, Var};

pub const GRAPH_TOKEN: &str = "prompt.graph_token";
pub const VIRTUAL_TOKENS: &str = "prompt.virtual";

pub fn prefix_name(layer: usize) -> String {
    format!("prompt.prefix.{layer}")
}

/// Where the graph prompt token is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenPlacement {
    /// Model width, after the input projection.
    #[default]
    PostProjection,
    /// Input width (raw features and encodings), before the projection.
    PreProjection,
}

/// Shape of a prompt set, independent of values.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptSpec {
    pub graph_token: bool,
    pub placement: TokenPlacement,
    pub prefix_len: usize,
    pub prompted_layers: BTreeSet<usize>,
    pub virtual_nodes: usize,
}

impl PromptSpec {
    /// The empty prompt: no token, no prefixes, no virtual nodes.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Prompt layout for a tuning regime. `layers` is the contiguous interval
    /// of prompted layers; `prompt_len` is the prefix length or the number of
    /// virtual nodes.
    pub fn for_mode(
        mode: TuningMode,
        prompt_len: usize,
        layers: impl IntoIterator<Item = usize>,
        placement: TokenPlacement,
    ) -> Self {
        let layers: BTreeSet<usize> = layers.into_iter().collect();
        match mode {
            TuningMode::Ft | TuningMode::Lightweight => Self::empty(),
            TuningMode::PrefixOnly => Self {
                prefix_len: prompt_len,
                prompted_layers: layers,
                placement,
                ..Self::empty()
            },
            TuningMode::Deepgpt => Self {
                graph_token: true,
                placement,
                prefix_len: prompt_len,
                prompted_layers: layers,
                virtual_nodes: 0,
            },
            TuningMode::VirtualNode => Self {
                virtual_nodes: prompt_len,
                ..Self::empty()
            },
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.graph_token && self.prompted_layers.is_empty() && self.virtual_nodes == 0
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if let Some(&last) = self.prompted_layers.iter().next_back() {
            if last >= backbone.layers {
                return Err(ModelError::Config(format!(
                    "prompted layer {last} outside 0..{}",
                    backbone.layers
                )));
            }
            if self.prefix_len == 0 {
                return Err(ModelError::Config("prompted layers need a positive prefix length".into()));
            }
            if backbone.kind != crate::models::BackboneKind::Transformer {
                return Err(ModelError::Config("prefix tokens need a transformer backbone".into()));
            }
        }
        Ok(())
    }

    pub fn param_specs(&self, backbone: &BackboneConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        if self.graph_token {
            let width = match self.placement {
                TokenPlacement::PostProjection => backbone.dim,
                TokenPlacement::PreProjection => backbone.input_dim(),
            };
            specs.push(ParamSpec::new(GRAPH_TOKEN, &[width], Init::Small));
        }
        for &l in &self.prompted_layers {
            specs.push(ParamSpec::new(prefix_name(l), &[self.prefix_len, backbone.dim], Init::Small));
        }
        if self.virtual_nodes > 0 {
            specs.push(ParamSpec::new(VIRTUAL_TOKENS, &[self.virtual_nodes, backbone.dim], Init::Small));
        }
        specs
    }
}

/// Prompt parameters `φ` with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub spec: PromptSpec,
    pub params: ParamStore,
}

/// Tape handles of a bound [`PromptSet`], consumed by the backbone forward.
#[derive(Debug, Clone, Default)]
pub struct BoundPrompt {
    pub graph_token: Option<Var>,
    pub placement: TokenPlacement,
    pub prefix_len: usize,
    pub prefixes: BTreeMap<usize, Var>,
    pub virtual_tokens: Option<Var>,
}

impl PromptSet {
    pub fn init(spec: PromptSpec, backbone: &BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate(backbone)?;
        let params = ParamStore::from_specs(&spec.param_specs(backbone), rng);
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: PromptSpec, backbone: &BackboneConfig, params: ParamStore) -> Result<Self> {
        spec.validate(backbone)?;
        params.check_specs(&spec.param_specs(backbone))?;
        Ok(Self { spec, params })
    }

    pub fn empty() -> Self {
        Self {
            spec: PromptSpec::empty(),
            params: ParamStore::new(),
        }
    }

    /// Records the prompt tensors on `tape` (also into `vars`, so gradients
    /// can be mapped back to names).
    pub fn bind(&self, tape: &mut Tape, vars: &mut ParamVars, trainable: bool) -> Result<BoundPrompt> {
        vars.bind(tape, &self.params, |_| trainable);
        let mut bound = BoundPrompt {
            placement: self.spec.placement,
            prefix_len: self.spec.prefix_len,
            ..BoundPrompt::default()
        };
        if self.spec.graph_token {
            bound.graph_token = Some(vars.get(GRAPH_TOKEN)?);
        }
        for &l in &self.spec.prompted_layers {
            bound.prefixes.insert(l, vars.get(&prefix_name(l))?);
        }
        if self.spec.virtual_nodes > 0 {
            bound.virtual_tokens = Some(vars.get(VIRTUAL_TOKENS)?);
        }
        Ok(bound)
    }
}

/// Adds the graph prompt token to every row selected by `node_mask`;
/// padding rows are untouched.
pub fn apply_graph_prompt(tape: &mut Tape, x: Var, token: Var, node_mask: &[bool]) -> Result<Var> {
    Ok(tape.add_row_where(x, token, node_mask)?)
}

/// Inserts `slots` zero rows in front of each sample's `max_nodes` rows.
pub fn extend_sequence(tape: &mut Tape, h: Var, batch: usize, max_nodes: usize, slots: usize) -> Result<Var> {
    let seq = slots + max_nodes;
    let index: Vec<Option<usize>> = (0..batch * seq)
        .map(|r| {
            let (b, s) = (r / seq, r % seq);
            (s >= slots).then(|| b * max_nodes + s - slots)
        })
        .collect();
    Ok(tape.gather_rows(h, &index)?)
}

/// Overwrites the leading `p_len` positions of each sample with `P^layer`.
/// `e` is `[batch·seq × d]` with the prefix slots already in place.
pub fn inject_prefix(
    tape: &mut Tape,
    e: Var,
    prompt: &BoundPrompt,
    layer: usize,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let p = *prompt
        .prefixes
        .get(&layer)
        .ok_or_else(|| ModelError::Config(format!("layer {layer} is not a prompted layer")))?;
    let targets: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| (0..prompt.prefix_len).map(move |i| (b * seq + i, i)))
        .collect();
    Ok(tape.overwrite_rows(e, p, &targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn graph_token_zero_is_identity_and_fills_zero_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2]));
        let mask = [true, true, false];
        let y = apply_graph_prompt(&mut tape, x, zero, &mask).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));

        let x0 = tape.constant(Tensor::zeros(&[3, 2]));
        let v = tape.constant(Tensor::vector(vec![0.5, -1.5]));
        let y = apply_graph_prompt(&mut tape, x0, v, &mask).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.0, 0.0]);
    }

    #[test]
    fn prefix_rows_are_replaced() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[4, 2], 7.0));
        let ext = extend_sequence(&mut tape, h, 2, 2, 1).unwrap();
        assert_eq!(tape.value(ext).data(), &[0.0, 0.0, 7.0, 7.0, 7.0, 7.0, 0.0, 0.0, 7.0, 7.0, 7.0, 7.0]);
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let mut bound = BoundPrompt {
            prefix_len: 1,
            ..BoundPrompt::default()
        };
        bound.prefixes.insert(3, p);
        let out = inject_prefix(&mut tape, ext, &bound, 3, 2, 3).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), &[1.0, 2.0]);
        assert_eq!(v.row(3), &[1.0, 2.0]);
        assert_eq!(v.row(1), &[7.0, 7.0]);
        assert!(inject_prefix(&mut tape, ext, &bound, 2, 2, 3).is_err());
    }

    #[test]
    fn spec_validation() {
        let cfg = BackboneConfig {
            layers: 3,
            ..BackboneConfig::default()
        };
        let spec = PromptSpec::for_mode(TuningMode::Deepgpt, 4, 1..=3, TokenPlacement::PostProjection);
        assert!(spec.validate(&cfg).is_err());
        let spec = PromptSpec::for_mode(TuningMode::Deepgpt, 0, 0..=1, TokenPlacement::PostProjection);
        assert!(spec.validate(&cfg).is_err());
        let spec = PromptSpec::for_mode(TuningMode::PrefixOnly, 4, 0..=2, TokenPlacement::PostProjection);
        assert!(spec.validate(&cfg).is_ok());
        assert!(!spec.graph_token);
        let specs = spec.param_specs(&cfg);
        assert_eq!(specs.len(), 3);
        assert!(specs.iter().all(|s| s.shape == vec![4, cfg.dim]));
        let pre = PromptSpec::for_mode(TuningMode::Deepgpt, 4, [], TokenPlacement::PreProjection);
        assert_eq!(pre.param_specs(&cfg)[0].shape, vec![cfg.input_dim()]);
    }
}
