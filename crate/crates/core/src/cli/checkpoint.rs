//! Binary checkpoint blobs.
//!
//! ```text
//! b"GPTLABCK" | u32 LE header length | JSON header | f64 LE tensor data
//! ```
//!
//! The header lists tensor names and shapes in storage order. A backbone
//! checkpoint holds θ; a prompt checkpoint holds only the head and prompt
//! parameters and loads against any backbone of the same width and depth.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_atomic, CliError, Result};
use crate::models::{Backbone, BackboneConfig, Head, HeadConfig, ParamSpec, ParamStore};
use crate::prompt::{PromptSet, PromptSpec, TuningMode};
use crate::tensor::Tensor;
use crate::training::{Objective, TunedModel};

const MAGIC: &[u8; 8] = b"GPTLABCK";
pub const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the backbone config's JSON form.
pub fn fingerprint(config: &BackboneConfig) -> String {
    let json = serde_json::to_vec(config).expect("backbone config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Where a prompt checkpoint came from: enough to rebuild its evaluation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldOrigin {
    /// Seed passed to cross-validation.
    pub seed: u64,
    pub folds: usize,
    pub fold: usize,
    pub samples: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptMeta {
    pub mode: TuningMode,
    pub dim: usize,
    pub layers: usize,
    pub spec: PromptSpec,
    pub head: HeadConfig,
    pub objective: Objective,
    pub origin: Option<FoldOrigin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "meta", rename_all = "snake_case")]
pub enum Payload {
    Backbone(BackboneConfig),
    Prompt(PromptMeta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    /// Fingerprint of the backbone config the tensors were trained with.
    fingerprint: String,
    payload: Payload,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub payload: Payload,
    pub params: ParamStore,
}

fn header_bytes(fingerprint: &str, payload: &Payload, tensors: Vec<TensorEntry>) -> Vec<u8> {
    let header = Header {
        version: FORMAT_VERSION,
        fingerprint: fingerprint.to_string(),
        payload: payload.clone(),
        tensors,
    };
    serde_json::to_vec(&header).expect("header serialises")
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let entries = self
            .params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = header_bytes(&self.fingerprint, &self.payload, entries);
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CliError::Checkpoint(format!("malformed checkpoint: {m}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(CliError::Checkpoint(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                header.version
            )));
        }
        let mut data = &bytes[12 + hlen..];
        let mut params = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            if params.contains(&e.name) {
                return Err(bad(&format!("duplicate tensor `{}`", e.name)));
            }
            params.insert(e.name, Tensor::new(e.shape, values).map_err(|e| bad(&e.to_string()))?);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            fingerprint: header.fingerprint,
            payload: header.payload,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// Encoded size of a checkpoint holding tensors of `specs`, without
/// materialising them.
pub fn planned_len(fingerprint: &str, payload: &Payload, specs: &[ParamSpec]) -> usize {
    let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let entries = sorted
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
        })
        .collect();
    let numel: usize = specs.iter().map(ParamSpec::numel).sum();
    12 + header_bytes(fingerprint, payload, entries).len() + 8 * numel
}

pub fn backbone_checkpoint(backbone: &Backbone) -> Checkpoint {
    Checkpoint {
        fingerprint: fingerprint(&backbone.config),
        payload: Payload::Backbone(backbone.config.clone()),
        params: backbone.params.clone(),
    }
}

pub fn save_backbone(path: impl AsRef<Path>, backbone: &Backbone) -> Result<()> {
    backbone_checkpoint(backbone).save(path)
}

/// Loads a backbone, rejecting it unless its fingerprint matches `expected`.
pub fn load_backbone(path: impl AsRef<Path>, expected: Option<&BackboneConfig>) -> Result<Backbone> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path)?;
    let Payload::Backbone(config) = ck.payload else {
        return Err(CliError::Checkpoint(format!("{} is a prompt checkpoint, not a backbone", path.display())));
    };
    if ck.fingerprint != fingerprint(&config) {
        return Err(CliError::Checkpoint(format!("{}: fingerprint does not match its own config", path.display())));
    }
    if let Some(want) = expected {
        if fingerprint(want) != ck.fingerprint {
            return Err(CliError::Checkpoint(format!(
                "{} was trained with a different backbone config (checkpoint: dim {} layers {} heads {} kind {:?}; config: dim {} layers {} heads {} kind {:?})",
                path.display(),
                config.dim,
                config.layers,
                config.heads,
                config.kind,
                want.dim,
                want.layers,
                want.heads,
                want.kind
            )));
        }
    }
    Backbone::from_params(config, ck.params).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Head and prompt parameters of `model`; θ is left out.
pub fn prompt_checkpoint(model: &TunedModel, objective: Objective, origin: Option<FoldOrigin>) -> Checkpoint {
    let mut params = ParamStore::new();
    for (n, t) in model.head.params.iter().chain(model.prompt.params.iter()) {
        params.insert(n.clone(), t.clone());
    }
    Checkpoint {
        fingerprint: fingerprint(&model.backbone.config),
        payload: Payload::Prompt(PromptMeta {
            mode: model.mode,
            dim: model.backbone.config.dim,
            layers: model.backbone.config.layers,
            spec: model.prompt.spec.clone(),
            head: model.head.config,
            objective,
            origin,
        }),
        params,
    }
}

pub fn save_prompt(
    path: impl AsRef<Path>,
    model: &TunedModel,
    objective: Objective,
    origin: Option<FoldOrigin>,
) -> Result<()> {
    prompt_checkpoint(model, objective, origin).save(path)
}

/// Attaches a prompt checkpoint to `backbone`. Width and depth must match.
pub fn load_prompt(path: impl AsRef<Path>, backbone: Backbone) -> Result<(TunedModel, PromptMeta)> {
    let path = path.as_ref();
    let ck = Checkpoint::load(path)?;
    let Payload::Prompt(meta) = ck.payload else {
        return Err(CliError::Checkpoint(format!("{} is a backbone checkpoint, not a prompt", path.display())));
    };
    let cfg = &backbone.config;
    if (meta.dim, meta.layers) != (cfg.dim, cfg.layers) {
        return Err(CliError::Checkpoint(format!(
            "{} needs a backbone with dim {} and {} layers, got dim {} and {} layers",
            path.display(),
            meta.dim,
            meta.layers,
            cfg.dim,
            cfg.layers
        )));
    }
    let ctx = |e: crate::models::ModelError| CliError::Checkpoint(format!("{}: {e}", path.display()));
    let (mut head_params, mut prompt_params) = (ParamStore::new(), ParamStore::new());
    for (n, t) in ck.params.iter() {
        let store = if n.starts_with("head.") { &mut head_params } else { &mut prompt_params };
        store.insert(n.clone(), t.clone());
    }
    let head = Head::from_params(meta.head, head_params).map_err(ctx)?;
    let prompt = PromptSet::from_params(meta.spec.clone(), cfg, prompt_params).map_err(ctx)?;
    let model = TunedModel {
        mode: meta.mode,
        backbone,
        head,
        prompt,
    };
    Ok((model, meta))
}
