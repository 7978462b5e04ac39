use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_backbone, save_backbone, save_prompt, FoldOrigin};
use super::{read_csv, write_csv, Axis, CliError, ExperimentConfig, Result};
use crate::graph::{gen_downstream, gen_pretext, read_graph_file, write_graph_file, DatasetSplit, GraphSample, Task};
use crate::models::Backbone;
use crate::prompt::{count_params, TuningMode};
use crate::rng::{derive_seed, stream};
use crate::training::{cross_validate, encode_all, train_run, FoldOutcome, Objective, TunedModel, TuningConfig};

const RESULTS: &str = "results.csv";
const EPOCHS: &str = "epochs.csv";
const FOLDS: &str = "folds.csv";
const PROMPT_CKPT: &str = "prompt.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub folds: usize,
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { folds: 5, threads: 1 }
    }
}

/// Seed handed to cross-validation. Shared by every grid and ablation cell,
/// so cells see the same folds and head initialisations.
pub fn cv_seed(root: u64) -> u64 {
    derive_seed(root, "cv", 0)
}

pub fn objective_for(task: Task) -> Objective {
    if task.is_classification() {
        Objective::Classification
    } else {
        Objective::Regression
    }
}

fn check_samples(samples: &[GraphSample], raw_dim: usize, arity: usize, source: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: no samples", source.display())));
    }
    for (i, g) in samples.iter().enumerate() {
        if g.feature_dim() != raw_dim {
            return Err(CliError::Data(format!(
                "{}: sample {i} has {} feature columns, the backbone expects {raw_dim}",
                source.display(),
                g.feature_dim()
            )));
        }
        if g.label_arity() != arity {
            return Err(CliError::Data(format!(
                "{}: sample {i} has {} labels, the task needs {arity}",
                source.display(),
                g.label_arity()
            )));
        }
    }
    Ok(())
}

/// Reads `file` if given; otherwise generates, writes to `fallback` and reads
/// that back so every run consumes the graph file format.
fn dataset(
    file: Option<&Path>,
    fallback: &Path,
    generate: impl FnOnce() -> crate::graph::Result<Vec<GraphSample>>,
) -> Result<(Vec<GraphSample>, PathBuf)> {
    let path = match file {
        Some(p) => p.to_path_buf(),
        None => {
            if let Some(dir) = fallback.parent() {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            }
            write_graph_file(fallback, &generate()?)?;
            fallback.to_path_buf()
        }
    };
    let samples = read_graph_file(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((samples, path))
}

/// Downstream samples for `cfg`, generated into `out` unless `task.file` is set.
pub fn load_task(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<GraphSample>> {
    let t = &cfg.task;
    let [lo, hi] = t.size_range;
    let (samples, path) = dataset(t.file.as_deref(), &out.join("task.gptgraph"), || {
        gen_downstream(t.count, t.name, (lo, hi), derive_seed(cfg.seed, "task", 0))
    })?;
    check_samples(&samples, cfg.backbone.raw_dim, t.name.label_arity(), &path)?;
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_rmse: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub backbone: Backbone,
    pub checkpoint: PathBuf,
    pub rows: Vec<PretrainRow>,
    pub final_rmse: f64,
}

/// Trains backbone and a temporary head on the pretext regression; writes
/// `backbone.ckpt` and `pretrain.csv` under `out`.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainSummary> {
    cfg.validate()?;
    let p = &cfg.pretrain;
    let [lo, hi] = p.size_range;
    let (samples, path) = dataset(p.file.as_deref(), &out.join("pretext.gptgraph"), || {
        gen_pretext(p.count, (lo, hi), derive_seed(cfg.seed, "pretext", 0))
    })?;
    check_samples(&samples, cfg.backbone.raw_dim, 1, &path)?;
    if samples.len() < p.holdout_folds {
        return Err(CliError::Data(format!(
            "{}: {} samples cannot be split 1-in-{}",
            path.display(),
            samples.len(),
            p.holdout_folds
        )));
    }

    let backbone = Backbone::init(cfg.backbone.clone(), &mut stream(cfg.seed, "backbone", 0))?;
    let tcfg = p.tuning();
    let encoded = encode_all(&backbone, &samples)?;
    let split = DatasetSplit::new(encoded.len(), p.holdout_folds, derive_seed(cfg.seed, "holdout", 0));
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| encoded[i].clone()).collect::<Vec<_>>();
    let (train, eval) = (pick(split.train_indices(0)), pick(split.eval_indices(0)));

    let mut model = TunedModel::init(&tcfg, backbone, 1, derive_seed(cfg.seed, "pretrain", 0))?;
    let record = train_run(&tcfg, Objective::Regression, &mut model, &train, &eval, cfg.seed)?;
    let rows: Vec<PretrainRow> = (0..record.train_loss.len())
        .map(|e| PretrainRow {
            epoch: e + 1,
            train_loss: record.train_loss[e],
            eval_rmse: record.eval_metric[e],
            epoch_seconds: record.epoch_seconds[e],
        })
        .collect();
    let checkpoint = out.join("backbone.ckpt");
    save_backbone(&checkpoint, &model.backbone)?;
    write_csv(&out.join("pretrain.csv"), &rows)?;
    Ok(PretrainSummary {
        final_rmse: record.final_metric(),
        backbone: model.backbone,
        checkpoint,
        rows,
    })
}

/// One cell of a tuning grid: mean and spread over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub mode: TuningMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub prompt_len: usize,
    pub layer_start: Option<usize>,
    pub layer_end: Option<usize>,
    pub metric: String,
    pub params_trainable: usize,
    pub params_frozen: usize,
    pub mean: f64,
    /// Sample standard deviation over folds.
    pub std: f64,
    pub epochs_to_best_mean: f64,
    pub epoch_seconds_mean: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub mode: TuningMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub prompt_len: usize,
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub mode: TuningMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub prompt_len: usize,
    pub fold: usize,
    pub final_metric: f64,
    pub epochs_to_best: usize,
}

struct Cell {
    row: ResultRow,
    epochs: Vec<EpochRow>,
    folds: Vec<FoldRow>,
    outcomes: Vec<FoldOutcome>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn run_cell(
    tcfg: &TuningConfig,
    objective: Objective,
    backbone: &Backbone,
    graphs: &[GraphSample],
    seed: u64,
    opts: &RunOptions,
) -> Result<Cell> {
    let started = Instant::now();
    let outcomes = cross_validate(tcfg, objective, backbone, graphs, opts.folds, seed, opts.threads)?;
    let wall_seconds = started.elapsed().as_secs_f64();

    let counts = count_params(&outcomes[0].model.registry()?);
    let finals: Vec<f64> = outcomes.iter().map(|o| o.final_metric).collect();
    let to_best: Vec<f64> = outcomes.iter().map(|o| o.record.epochs_to_best as f64).collect();
    let seconds: Vec<f64> = outcomes.iter().flat_map(|o| o.record.epoch_seconds.iter().copied()).collect();
    let interval = tcfg
        .mode
        .uses_prompt()
        .then(|| tcfg.prompted_layers.unwrap_or([0, backbone.config.layers - 1]))
        .filter(|_| tcfg.mode != TuningMode::VirtualNode);
    let (lr, wd, plen) = (tcfg.lr, tcfg.optimizer.weight_decay, tcfg.prompt_len);
    let plen = if tcfg.mode.uses_prompt() { plen } else { 0 };
    let row = ResultRow {
        mode: tcfg.mode,
        lr,
        weight_decay: wd,
        prompt_len: plen,
        layer_start: interval.map(|i| i[0]),
        layer_end: interval.map(|i| i[1]),
        metric: objective.metric_name().to_string(),
        params_trainable: counts.trainable,
        params_frozen: counts.frozen,
        mean: mean(&finals),
        std: sample_std(&finals),
        epochs_to_best_mean: mean(&to_best),
        epoch_seconds_mean: mean(&seconds),
        wall_seconds,
    };
    let mut epochs = Vec::new();
    let mut folds = Vec::new();
    for o in &outcomes {
        let r = &o.record;
        for e in 0..r.train_loss.len() {
            epochs.push(EpochRow {
                mode: tcfg.mode,
                lr,
                weight_decay: wd,
                prompt_len: plen,
                fold: o.fold,
                epoch: e + 1,
                train_loss: r.train_loss[e],
                eval_metric: r.eval_metric[e],
                epoch_seconds: r.epoch_seconds[e],
            });
        }
        folds.push(FoldRow {
            mode: tcfg.mode,
            lr,
            weight_decay: wd,
            prompt_len: plen,
            fold: o.fold,
            final_metric: o.final_metric,
            epochs_to_best: r.epochs_to_best,
        });
    }
    Ok(Cell {
        row,
        epochs,
        folds,
        outcomes,
    })
}

fn better(objective: Objective, a: f64, b: f64) -> bool {
    if objective.higher_is_better() {
        a > b
    } else {
        a < b
    }
}

/// Writes a run directory: the three CSVs plus, unless the backbone itself
/// was tuned, the prompt checkpoint of the best cell's last fold.
fn write_run_dir(dir: &Path, cells: &[Cell], objective: Objective, seed: u64, samples: usize) -> Result<()> {
    let rows: Vec<ResultRow> = cells.iter().map(|c| c.row.clone()).collect();
    let epochs: Vec<EpochRow> = cells.iter().flat_map(|c| c.epochs.iter().cloned()).collect();
    let folds: Vec<FoldRow> = cells.iter().flat_map(|c| c.folds.iter().cloned()).collect();
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        if better(objective, c.row.mean, cells[best].row.mean) {
            best = i;
        }
    }
    let last = cells[best].outcomes.last().expect("at least two folds");
    if !last.model.mode.trains_backbone() {
        let origin = FoldOrigin {
            seed,
            folds: cells[best].outcomes.len(),
            fold: last.fold,
            samples,
            metric: last.final_metric,
        };
        save_prompt(dir.join(PROMPT_CKPT), &last.model, objective, Some(origin))?;
    }
    write_csv(&dir.join(EPOCHS), &epochs)?;
    write_csv(&dir.join(FOLDS), &folds)?;
    // results last: its presence marks the directory complete
    write_csv(&dir.join(RESULTS), &rows)
}

/// Cross-validates `cfg.tuning` over every `(lr, weight_decay)` grid cell
/// against the backbone checkpoint at `ckpt`.
pub fn cmd_tune(cfg: &ExperimentConfig, ckpt: &Path, out: &Path, opts: &RunOptions) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let backbone = load_backbone(ckpt, Some(&cfg.backbone))?;
    let graphs = load_task(cfg, out)?;
    let objective = objective_for(cfg.task.name);
    let cfgs: Vec<TuningConfig> = cfg
        .grid_cells()
        .into_iter()
        .map(|(lr, wd)| {
            let mut t = cfg.tuning.clone();
            t.lr = lr;
            t.optimizer.weight_decay = wd;
            t
        })
        .collect();
    for t in &cfgs {
        t.validate(&backbone)?;
    }
    check_folds(opts, graphs.len())?;
    let seed = cv_seed(cfg.seed);
    let cells = cfgs
        .iter()
        .map(|t| run_cell(t, objective, &backbone, &graphs, seed, opts))
        .collect::<Result<Vec<_>>>()?;
    write_run_dir(out, &cells, objective, seed, graphs.len())?;
    Ok(cells.into_iter().map(|c| c.row).collect())
}

fn check_folds(opts: &RunOptions, samples: usize) -> Result<()> {
    if opts.folds < 2 || opts.folds > samples {
        return Err(CliError::Config(format!("cannot make {} folds from {samples} samples", opts.folds)));
    }
    Ok(())
}

/// One ablation cell with its coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub axis: String,
    pub cell: String,
    pub dir: String,
    pub mode: TuningMode,
    pub prompt_len: usize,
    pub layer_start: Option<usize>,
    pub layer_end: Option<usize>,
    pub metric: String,
    pub params_trainable: usize,
    pub params_frozen: usize,
    pub mean: f64,
    pub std: f64,
    pub epochs_to_best_mean: f64,
    pub epoch_seconds_mean: f64,
    pub wall_seconds: f64,
}

/// Sweeps one axis with every other setting fixed at `cfg.tuning`. Each cell
/// is a complete run directory under `out/<axis>/`; the merged table is
/// `out/grid_<axis>.csv`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    out: &Path,
    axis: Axis,
    opts: &RunOptions,
) -> Result<Vec<GridRow>> {
    cfg.validate()?;
    let base = &cfg.tuning;
    let a = &cfg.ablation;
    let cells: Vec<(String, TuningConfig)> = match axis {
        Axis::Depth => a
            .depth
            .iter()
            .map(|&[s, e]| (format!("{s}-{e}"), TuningConfig { prompted_layers: Some([s, e]), ..base.clone() }))
            .collect(),
        Axis::Length => a
            .length
            .iter()
            .map(|&l| (l.to_string(), TuningConfig { prompt_len: l, ..base.clone() }))
            .collect(),
        Axis::Component => a
            .component
            .iter()
            .map(|&m| (m.name().to_string(), TuningConfig { mode: m, ..base.clone() }))
            .collect(),
    };
    if cells.is_empty() {
        return Err(CliError::Config(format!("ablation grid for axis `{}` is empty", axis.name())));
    }
    let prefix_modes = [TuningMode::PrefixOnly, TuningMode::Deepgpt];
    if axis == Axis::Depth && !prefix_modes.contains(&base.mode) {
        return Err(CliError::Config(format!("depth ablation needs a prefix mode, tuning.mode is {}", base.mode)));
    }
    if axis == Axis::Length && !base.mode.uses_prompt() {
        return Err(CliError::Config(format!("length ablation needs a prompt mode, tuning.mode is {}", base.mode)));
    }

    let backbone = load_backbone(ckpt, Some(&cfg.backbone))?;
    let graphs = load_task(cfg, out)?;
    let objective = objective_for(cfg.task.name);
    for (_, t) in &cells {
        t.validate(&backbone)?;
    }
    check_folds(opts, graphs.len())?;

    let seed = cv_seed(cfg.seed);
    let mut rows = Vec::with_capacity(cells.len());
    for (i, (label, t)) in cells.iter().enumerate() {
        let rel = format!("{}/cell_{i:02}", axis.name());
        let cell = run_cell(t, objective, &backbone, &graphs, seed, opts)?;
        let r = cell.row.clone();
        write_run_dir(&out.join(&rel), &[cell], objective, seed, graphs.len())?;
        rows.push(GridRow {
            axis: axis.name().to_string(),
            cell: label.clone(),
            dir: rel,
            mode: r.mode,
            prompt_len: r.prompt_len,
            layer_start: r.layer_start,
            layer_end: r.layer_end,
            metric: r.metric,
            params_trainable: r.params_trainable,
            params_frozen: r.params_frozen,
            mean: r.mean,
            std: r.std,
            epochs_to_best_mean: r.epochs_to_best_mean,
            epoch_seconds_mean: r.epoch_seconds_mean,
            wall_seconds: r.wall_seconds,
        });
    }
    write_csv(&out.join(format!("grid_{}.csv", axis.name())), &rows)?;
    Ok(rows)
}

/// Per-mode aggregate over run directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: TuningMode,
    pub runs: usize,
    pub metric: String,
    pub params_trainable: usize,
    pub mean: f64,
    pub std: f64,
    pub epochs_to_best_mean: f64,
    pub epoch_seconds_mean: f64,
    pub wall_seconds: f64,
}

/// Mean training curve of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub mode: TuningMode,
    pub epoch: usize,
    pub train_loss_mean: f64,
    pub eval_metric_mean: f64,
    pub epoch_seconds_mean: f64,
}

fn same_cell(e: &EpochRow, r: &ResultRow) -> bool {
    e.mode == r.mode && e.lr == r.lr && e.weight_decay == r.weight_decay && e.prompt_len == r.prompt_len
}

/// Aggregates the best cell of each mode in each run directory into
/// `summary.csv` and `convergence.csv` under `out`.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<Vec<SummaryRow>> {
    if runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let mut picked: BTreeMap<TuningMode, Vec<(ResultRow, Vec<EpochRow>)>> = BTreeMap::new();
    for dir in runs {
        for f in [RESULTS, EPOCHS] {
            if !dir.join(f).is_file() {
                return Err(CliError::Data(format!("incomplete run directory {}: missing {f}", dir.display())));
            }
        }
        let results: Vec<ResultRow> = read_csv(&dir.join(RESULTS))?;
        let epochs: Vec<EpochRow> = read_csv(&dir.join(EPOCHS))?;
        if results.is_empty() {
            return Err(CliError::Data(format!("incomplete run directory {}: no results", dir.display())));
        }
        let mut best: BTreeMap<TuningMode, &ResultRow> = BTreeMap::new();
        for r in &results {
            let higher = r.metric != "rmse";
            best.entry(r.mode)
                .and_modify(|b| {
                    if (higher && r.mean > b.mean) || (!higher && r.mean < b.mean) {
                        *b = r;
                    }
                })
                .or_insert(r);
        }
        for (mode, r) in best {
            let curve: Vec<EpochRow> = epochs.iter().filter(|e| same_cell(e, r)).cloned().collect();
            if curve.is_empty() {
                return Err(CliError::Data(format!(
                    "incomplete run directory {}: no epochs for {mode} lr={}",
                    dir.display(),
                    r.lr
                )));
            }
            picked.entry(mode).or_default().push((r.clone(), curve));
        }
    }

    let mut summary = Vec::new();
    let mut convergence = Vec::new();
    for (mode, entries) in &picked {
        let metric = entries[0].0.metric.clone();
        if entries.iter().any(|(r, _)| r.metric != metric) {
            return Err(CliError::Data(format!("runs of {mode} report different metrics")));
        }
        let col = |f: fn(&ResultRow) -> f64| mean(&entries.iter().map(|(r, _)| f(r)).collect::<Vec<_>>());
        summary.push(SummaryRow {
            mode: *mode,
            runs: entries.len(),
            metric,
            params_trainable: entries[0].0.params_trainable,
            mean: col(|r| r.mean),
            std: col(|r| r.std),
            epochs_to_best_mean: col(|r| r.epochs_to_best_mean),
            epoch_seconds_mean: col(|r| r.epoch_seconds_mean),
            wall_seconds: entries.iter().map(|(r, _)| r.wall_seconds).sum(),
        });
        let mut by_epoch: BTreeMap<usize, Vec<&EpochRow>> = BTreeMap::new();
        for e in entries.iter().flat_map(|(_, c)| c) {
            by_epoch.entry(e.epoch).or_default().push(e);
        }
        for (epoch, es) in by_epoch {
            let m = |f: fn(&EpochRow) -> f64| mean(&es.iter().map(|e| f(e)).collect::<Vec<_>>());
            convergence.push(ConvergenceRow {
                mode: *mode,
                epoch,
                train_loss_mean: m(|e| e.train_loss),
                eval_metric_mean: m(|e| e.eval_metric),
                epoch_seconds_mean: m(|e| e.epoch_seconds),
            });
        }
    }
    write_csv(&out.join("summary.csv"), &summary)?;
    write_csv(&out.join("convergence.csv"), &convergence)?;
    Ok(summary)
}
