use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::models::{ModelError, ParamSpec, Result};

/// Which parameter groups a tuning run updates.
///
/// | mode           | trainable                         |
/// |----------------|-----------------------------------|
/// | `ft`           | backbone and head                 |
/// | `lightweight`  | head                              |
/// | `prefix_only`  | prefixes and head                 |
/// | `deepgpt`      | graph token, prefixes and head    |
/// | `virtual_node` | virtual prompt tokens and head    |
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    Ft,
    Lightweight,
    PrefixOnly,
    Deepgpt,
    VirtualNode,
}

impl TuningMode {
    pub const ALL: [TuningMode; 5] = [
        TuningMode::Ft,
        TuningMode::Lightweight,
        TuningMode::PrefixOnly,
        TuningMode::Deepgpt,
        TuningMode::VirtualNode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TuningMode::Ft => "ft",
            TuningMode::Lightweight => "lightweight",
            TuningMode::PrefixOnly => "prefix_only",
            TuningMode::Deepgpt => "deepgpt",
            TuningMode::VirtualNode => "virtual_node",
        }
    }

    pub fn trains_backbone(self) -> bool {
        self == TuningMode::Ft
    }

    pub fn uses_prompt(self) -> bool {
        matches!(self, TuningMode::PrefixOnly | TuningMode::Deepgpt | TuningMode::VirtualNode)
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        TuningMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown tuning mode `{s}`")))
    }
}

/// Parameter totals for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCounts {
    pub frozen: usize,
    pub trainable: usize,
    /// `trainable / (frozen + trainable)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Entry {
    numel: usize,
    trainable: bool,
}

/// Every parameter of a run, marked frozen or trainable. Names are unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeRegistry {
    entries: BTreeMap<String, Entry>,
}

impl FreezeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, numel: usize, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(ModelError::Config(format!("parameter `{name}` registered twice")));
        }
        self.entries.insert(name.to_string(), Entry { numel, trainable });
        Ok(())
    }

    /// Partition of backbone, head and prompt parameters for `mode`.
    pub fn for_mode(
        mode: TuningMode,
        backbone: &[ParamSpec],
        head: &[ParamSpec],
        prompt: &[ParamSpec],
    ) -> Result<Self> {
        if !mode.uses_prompt() && !prompt.is_empty() {
            return Err(ModelError::Config(format!("mode {mode} takes no prompt parameters")));
        }
        let mut reg = Self::new();
        for s in backbone {
            reg.register(&s.name, s.numel(), mode.trains_backbone())?;
        }
        for s in head.iter().chain(prompt) {
            reg.register(&s.name, s.numel(), true)?;
        }
        Ok(reg)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.as_str())
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| !e.trainable).map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn count_params(registry: &FreezeRegistry) -> ParamCounts {
    let (mut frozen, mut trainable) = (0, 0);
    for e in registry.entries.values() {
        if e.trainable {
            trainable += e.numel;
        } else {
            frozen += e.numel;
        }
    }
    let total = frozen + trainable;
    let ratio = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
    ParamCounts { frozen, trainable, ratio }
}
