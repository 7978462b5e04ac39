use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{bce_loss, label_mask, mse_loss, rmse};
use super::metrics::mean_task_auroc;
use super::optim::{clip_global_norm, AdamW, OptimizerState};
use super::schedule::{Decay, Schedule};
use super::{Result, TrainingError};
use crate::graph::{batch, batch_with_virtual, BatchedGraph, DatasetSplit, GraphSample};
use crate::models::{Backbone, Head, HeadConfig, ParamVars};
use crate::prompt::{FreezeRegistry, PromptSet, PromptSpec, TokenPlacement, TuningMode};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Tape, Tensor, Var};

/// Settings of one tuning run; grids over `lr` and `weight_decay` live in the
/// experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub mode: TuningMode,
    /// Prefix length, or the number of virtual nodes in `virtual_node` mode.
    pub prompt_len: usize,
    /// Inclusive layer interval `[a, b]` that receives prefixes; all layers when absent.
    pub prompted_layers: Option<[usize; 2]>,
    pub token_placement: TokenPlacement,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: f64,
    pub decay: Decay,
    pub optimizer: AdamW,
    pub clip_norm: f64,
    pub head_hidden: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            mode: TuningMode::Deepgpt,
            prompt_len: 10,
            prompted_layers: None,
            token_placement: TokenPlacement::PostProjection,
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            warmup_epochs: 5.0,
            decay: Decay::Cosine,
            optimizer: AdamW::default(),
            clip_norm: 5.0,
            head_hidden: false,
        }
    }
}

impl TuningConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs as f64,
            decay: self.decay,
        }
    }

    pub fn prompt_spec(&self, layers: usize) -> PromptSpec {
        let [a, b] = self.prompted_layers.unwrap_or([0, layers.saturating_sub(1)]);
        PromptSpec::for_mode(self.mode, self.prompt_len, a..=b, self.token_placement)
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self, backbone: &Backbone) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainingError::Config("epochs and batch_size must be positive".into()));
        }
        if let Some([a, b]) = self.prompted_layers {
            if a > b {
                return Err(TrainingError::Config(format!("empty layer interval [{a}, {b}]")));
            }
        }
        if self.mode.uses_prompt() && self.prompt_len == 0 {
            return Err(TrainingError::Config(format!("mode {} needs prompt_len > 0", self.mode)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(TrainingError::Config("clip_norm must be positive".into()));
        }
        self.schedule().validate()?;
        self.optimizer.validate()?;
        self.prompt_spec(backbone.config.layers).validate(&backbone.config)?;
        Ok(())
    }
}

/// Learning problem implied by the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Binary cross-entropy, scored by mean per-task AUROC.
    Classification,
    /// Mean squared error, scored by RMSE.
    Regression,
}

impl Objective {
    pub fn metric_name(self) -> &'static str {
        match self {
            Objective::Classification => "auroc",
            Objective::Regression => "rmse",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Objective::Classification
    }

    fn loss(self, tape: &mut Tape, out: Var, labels: &Tensor) -> Result<Var> {
        match self {
            Objective::Classification => bce_loss(tape, out, labels, &label_mask(labels)),
            Objective::Regression => mse_loss(tape, out, labels),
        }
    }

    pub fn metric(self, preds: &Tensor, labels: &Tensor) -> Result<f64> {
        match self {
            Objective::Classification => mean_task_auroc(preds.data(), labels.data(), labels.cols()),
            Objective::Regression => rmse(preds.data(), labels.data()),
        }
    }
}

/// Backbone, head and prompt of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedModel {
    pub mode: TuningMode,
    pub backbone: Backbone,
    pub head: Head,
    pub prompt: PromptSet,
}

impl TunedModel {
    pub fn init(cfg: &TuningConfig, backbone: Backbone, outputs: usize, seed: u64) -> Result<Self> {
        cfg.validate(&backbone)?;
        let head_cfg = HeadConfig {
            dim: backbone.config.dim,
            outputs,
            hidden: cfg.head_hidden,
        };
        let head = Head::init(head_cfg, &mut stream(seed, "head", 0))?;
        let spec = cfg.prompt_spec(backbone.config.layers);
        let prompt = PromptSet::init(spec, &backbone.config, &mut stream(seed, "prompt", 0))?;
        Ok(Self {
            mode: cfg.mode,
            backbone,
            head,
            prompt,
        })
    }

    pub fn registry(&self) -> Result<FreezeRegistry> {
        let prompt_specs = self.prompt.spec.param_specs(&self.backbone.config);
        Ok(FreezeRegistry::for_mode(
            self.mode,
            &self.backbone.config.param_specs(),
            &self.head.config.param_specs(),
            &prompt_specs,
        )?)
    }

    fn batch(&self, graphs: &[&GraphSample]) -> Result<BatchedGraph> {
        let owned: Vec<GraphSample> = graphs.iter().map(|g| (*g).clone()).collect();
        let v = self.prompt.spec.virtual_nodes;
        Ok(if v > 0 { batch_with_virtual(&owned, v)? } else { batch(&owned)? })
    }

    /// Records the parameters and returns the head output for `batch`. With
    /// no registry every parameter is recorded as frozen.
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &mut ParamVars,
        batch: &BatchedGraph,
        registry: Option<&FreezeRegistry>,
    ) -> Result<Var> {
        let trainable = |name: &str| registry.is_some_and(|r| r.is_trainable(name));
        vars.bind(tape, &self.backbone.params, trainable);
        vars.bind(tape, &self.head.params, trainable);
        let bound = if self.prompt.spec.is_empty() {
            None
        } else {
            Some(self.prompt.bind(tape, vars, registry.is_some() && self.mode.uses_prompt())?)
        };
        let out = self.backbone.forward(tape, vars, batch, bound.as_ref())?;
        Ok(self.head.forward(tape, vars, out.embeddings)?)
    }

    /// Mean loss on encoded `graphs` and its gradient for every parameter
    /// `registry` marks trainable, keyed by name.
    pub fn loss_and_grads(
        &self,
        objective: Objective,
        graphs: &[&GraphSample],
        labels: &Tensor,
        registry: &FreezeRegistry,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let b = self.batch(graphs)?;
        let mut tape = Tape::new();
        let mut vars = ParamVars::new();
        let out = self.forward(&mut tape, &mut vars, &b, Some(registry))?;
        let loss = objective.loss(&mut tape, out, labels)?;
        Ok((tape.value(loss).item(), named_gradients(&tape, &vars, loss)?))
    }
}

fn named_gradients(tape: &Tape, vars: &ParamVars, loss: Var) -> Result<BTreeMap<String, Tensor>> {
    let mut grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, var) in vars.iter() {
        if let Some(g) = grads.remove(var) {
            named.insert(name.clone(), g);
        }
    }
    Ok(named)
}

/// Appends the backbone's encodings to every sample.
pub fn encode_all(backbone: &Backbone, graphs: &[GraphSample]) -> Result<Vec<GraphSample>> {
    Ok(graphs.iter().map(|g| backbone.encode(g)).collect::<std::result::Result<_, _>>()?)
}

fn labels_of(graphs: &[&GraphSample]) -> Result<Tensor> {
    let t = graphs.first().map_or(0, |g| g.label_arity());
    let mut data = Vec::with_capacity(graphs.len() * t);
    for g in graphs {
        match g.label() {
            Some(y) if y.len() == t => data.extend_from_slice(y),
            _ => return Err(TrainingError::Config("every sample needs a label of the same arity".into())),
        }
    }
    Ok(Tensor::new(vec![graphs.len(), t], data)?)
}

/// Head outputs for encoded `graphs`, `[n × t]`.
pub fn predict_all(model: &TunedModel, graphs: &[GraphSample], batch_size: usize) -> Result<Tensor> {
    let refs: Vec<&GraphSample> = graphs.iter().collect();
    let mut rows = Vec::new();
    let mut t = model.head.config.outputs;
    for chunk in refs.chunks(batch_size.max(1)) {
        let b = model.batch(chunk)?;
        let mut tape = Tape::new();
        let mut vars = ParamVars::new();
        let out = model.forward(&mut tape, &mut vars, &b, None)?;
        t = tape.value(out).cols();
        rows.extend_from_slice(tape.value(out).data());
    }
    Ok(Tensor::new(vec![graphs.len(), t], rows)?)
}

/// Metric of `model` on encoded `graphs`.
pub fn evaluate(model: &TunedModel, objective: Objective, graphs: &[GraphSample], batch_size: usize) -> Result<f64> {
    let preds = predict_all(model, graphs, batch_size)?;
    let refs: Vec<&GraphSample> = graphs.iter().collect();
    objective.metric(&preds, &labels_of(&refs)?)
}

/// Per-epoch history of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub train_loss: Vec<f64>,
    pub eval_metric: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// 1-based epoch with the best eval metric (first one on ties).
    pub epochs_to_best: usize,
}

impl RunRecord {
    pub fn final_metric(&self) -> f64 {
        self.eval_metric.last().copied().unwrap_or(f64::NAN)
    }
}

fn best_epoch(metric: &[f64], higher_is_better: bool) -> usize {
    let mut best = 0;
    for (i, &m) in metric.iter().enumerate() {
        let better = if higher_is_better { m > metric[best] } else { m < metric[best] };
        if better {
            best = i;
        }
    }
    best + 1
}

/// Source of head inputs during training: full forward passes, or cached
/// graph embeddings when nothing upstream of the head is trainable.
enum Inputs {
    Graphs,
    Cached { train: Tensor },
}

fn cache_embeddings(model: &TunedModel, graphs: &[&GraphSample], batch_size: usize) -> Result<Tensor> {
    let d = model.backbone.config.dim;
    let mut rows = Vec::with_capacity(graphs.len() * d);
    for chunk in graphs.chunks(batch_size.max(1)) {
        let b = model.batch(chunk)?;
        let mut tape = Tape::new();
        let mut vars = ParamVars::new();
        vars.bind(&mut tape, &model.backbone.params, |_| false);
        let out = model.backbone.forward(&mut tape, &vars, &b, None)?;
        rows.extend_from_slice(tape.value(out.embeddings).data());
    }
    Ok(Tensor::new(vec![graphs.len(), d], rows)?)
}

/// Trains `model` in place on encoded `train` graphs, evaluating on `eval`
/// after every epoch.
pub fn train_run(
    cfg: &TuningConfig,
    objective: Objective,
    model: &mut TunedModel,
    train: &[GraphSample],
    eval: &[GraphSample],
    seed: u64,
) -> Result<RunRecord> {
    cfg.validate(&model.backbone)?;
    if train.is_empty() || eval.is_empty() {
        return Err(TrainingError::Config("training and evaluation sets must be non-empty".into()));
    }
    let train_refs: Vec<&GraphSample> = train.iter().collect();
    let train_labels = labels_of(&train_refs)?;
    let outputs = train_labels.cols();
    if outputs != model.head.config.outputs {
        return Err(TrainingError::Config(format!(
            "labels have arity {outputs} but the head has {} outputs",
            model.head.config.outputs
        )));
    }
    let registry = model.registry()?;
    let trainable: BTreeMap<String, Vec<usize>> = model
        .backbone
        .params
        .iter()
        .chain(model.head.params.iter())
        .chain(model.prompt.params.iter())
        .filter(|(n, _)| registry.is_trainable(n))
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let mut opt = OptimizerState::new(cfg.optimizer, trainable.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
    let schedule = cfg.schedule();

    let inputs = if cfg.mode == TuningMode::Lightweight {
        Inputs::Cached {
            train: cache_embeddings(model, &train_refs, cfg.batch_size * 4)?,
        }
    } else {
        Inputs::Graphs
    };

    let steps = train.len().div_ceil(cfg.batch_size);
    let mut record = RunRecord {
        train_loss: Vec::with_capacity(cfg.epochs),
        eval_metric: Vec::with_capacity(cfg.epochs),
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        epochs_to_best: 0,
    };
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels = Tensor::new(
                vec![idx.len(), outputs],
                idx.iter().flat_map(|&i| train_labels.row(i).iter().copied()).collect(),
            )?;
            let (loss, mut named) = match &inputs {
                Inputs::Graphs => {
                    let members: Vec<&GraphSample> = idx.iter().map(|&i| train_refs[i]).collect();
                    model.loss_and_grads(objective, &members, &labels, &registry)?
                }
                Inputs::Cached { train: emb } => {
                    let d = emb.cols();
                    let rows = idx.iter().flat_map(|&i| emb.row(i).iter().copied()).collect();
                    let mut tape = Tape::new();
                    let mut vars = ParamVars::new();
                    let x = tape.constant(Tensor::new(vec![idx.len(), d], rows)?);
                    vars.bind(&mut tape, &model.head.params, |_| true);
                    let out = model.head.forward(&mut tape, &vars, x)?;
                    let loss = objective.loss(&mut tape, out, &labels)?;
                    (tape.value(loss).item(), named_gradients(&tape, &vars, loss)?)
                }
            };
            loss_sum += loss * idx.len() as f64;
            clip_global_norm(&mut named, cfg.clip_norm)?;
            let lr = schedule.lr_at(epoch as f64 + step as f64 / steps as f64);
            opt.step(
                &mut [&mut model.backbone.params, &mut model.head.params, &mut model.prompt.params],
                &named,
                lr,
            )?;
        }
        let metric = evaluate(model, objective, eval, cfg.batch_size * 4)?;
        record.train_loss.push(loss_sum / train.len() as f64);
        record.eval_metric.push(metric);
        record.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    record.epochs_to_best = best_epoch(&record.eval_metric, objective.higher_is_better());
    Ok(record)
}

/// Result of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub record: RunRecord,
    pub final_metric: f64,
    pub model: TunedModel,
}

/// Runs `cfg` on each of `folds` folds of the raw `graphs`. Folds run on up to
/// `threads` workers; results are in fold order and independent of `threads`.
pub fn cross_validate(
    cfg: &TuningConfig,
    objective: Objective,
    backbone: &Backbone,
    graphs: &[GraphSample],
    folds: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<FoldOutcome>> {
    cfg.validate(backbone)?;
    if folds < 2 || folds > graphs.len() {
        return Err(TrainingError::Config(format!(
            "cannot make {folds} folds from {} samples",
            graphs.len()
        )));
    }
    let encoded = encode_all(backbone, graphs)?;
    let outputs = labels_of(&encoded.iter().collect::<Vec<_>>())?.cols();
    let split = DatasetSplit::new(encoded.len(), folds, derive_seed(seed, "split", 0));
    let run = |fold: usize| -> Result<FoldOutcome> {
        let fold_seed = derive_seed(seed, "fold", fold as u64);
        let pick = |idx: Vec<usize>| idx.into_iter().map(|i| encoded[i].clone()).collect::<Vec<_>>();
        let train = pick(split.train_indices(fold));
        let eval = pick(split.eval_indices(fold));
        let mut model = TunedModel::init(cfg, backbone.clone(), outputs, fold_seed)?;
        let record = train_run(cfg, objective, &mut model, &train, &eval, fold_seed)?;
        Ok(FoldOutcome {
            fold,
            final_metric: record.final_metric(),
            record,
            model,
        })
    };
    if threads <= 1 {
        return (0..folds).map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainingError::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..folds).into_par_iter().map(run).collect())
}
