#![allow(dead_code)]

use gpt_lab::graph::{batch, batch_with_virtual, GraphSample};
use gpt_lab::models::{predict, Backbone, Head, ParamStore, ParamVars};
use gpt_lab::prompt::PromptSet;
use gpt_lab::training::{bce_loss, label_mask};
use gpt_lab::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random simple graph with uniform features in [-1, 1].
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, p: f64, label: Option<Vec<f64>>) -> GraphSample {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(p) {
                edges.push((i, j));
            }
        }
    }
    GraphSample::new(uniform(rng, &[n, d]), edges, label).unwrap()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Row-major `[rows × cols]` matrix product.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i * inner + k] * b[k * cols + j];
            }
            out[i * cols + j] = s;
        }
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Fixed weights for reducing an output to a scalar; depends only on the shape.
pub fn probe_weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (0.37 * i as f64 + 0.2).sin()).collect()).unwrap()
}

/// `Σ out ⊙ w` with [`probe_weights`].
pub fn probe(tape: &mut Tape, out: Var) -> Var {
    let w = tape.constant(probe_weights(tape.shape(out)));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Largest relative error between reverse-mode gradients and central
/// differences with step `h`, over every entry of every input.
///
/// `f(tape, values, requires_grad)` records the inputs as leaves and returns
/// the scalar loss together with those leaves. The denominator is floored at
/// `1e-3` so entries with vanishing gradient are compared absolutely.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Tensor], bool) -> (Var, Vec<Var>),
{
    let mut tape = Tape::new();
    let (loss, leaves) = f(&mut tape, inputs, true);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let (l, _) = f(&mut t, xs, false);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(leaves[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for k in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[k] += h;
            let up = eval(&xs);
            xs[i].data_mut()[k] -= 2.0 * h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

/// [`gradcheck`] of the BCE loss of a full prompted forward with respect to
/// the head, the prompt and, when `train_backbone`, the backbone.
pub fn model_gradcheck(
    bb: &Backbone,
    head: &Head,
    prompt: &PromptSet,
    graphs: &[GraphSample],
    labels: &Tensor,
    train_backbone: bool,
) -> f64 {
    let encoded: Vec<GraphSample> = graphs.iter().map(|g| bb.encode(g).unwrap()).collect();
    let v = prompt.spec.virtual_nodes;
    let b = if v > 0 { batch_with_virtual(&encoded, v).unwrap() } else { batch(&encoded).unwrap() };
    let mut names = Vec::new();
    let mut inputs = Vec::new();
    let mut groups: Vec<&ParamStore> = vec![&head.params, &prompt.params];
    if train_backbone {
        groups.push(&bb.params);
    }
    for store in groups {
        for (n, t) in store.iter() {
            names.push(n.clone());
            inputs.push(t.clone());
        }
    }
    let mask = label_mask(labels);
    gradcheck(&inputs, 1e-5, |tape, xs, rg| {
        let (mut bbp, mut hp, mut pp) = (bb.params.clone(), head.params.clone(), prompt.params.clone());
        for (n, x) in names.iter().zip(xs) {
            for store in [&mut bbp, &mut hp, &mut pp] {
                if let Some(t) = store.get_mut(n) {
                    *t = x.clone();
                }
            }
        }
        let trains = |n: &str| rg && (train_backbone || !bb.params.contains(n));
        let mut vars = ParamVars::new();
        vars.bind(tape, &bbp, trains);
        vars.bind(tape, &hp, trains);
        let ps = PromptSet {
            spec: prompt.spec.clone(),
            params: pp,
        };
        let bound = ps.bind(tape, &mut vars, rg).unwrap();
        let bbm = Backbone {
            config: bb.config.clone(),
            params: bbp,
        };
        let hm = Head {
            config: head.config,
            params: hp,
        };
        let out = predict(tape, &vars, &bbm, &hm, &b, Some(&bound)).unwrap();
        let loss = bce_loss(tape, out, labels, &mask).unwrap();
        let leaves = names.iter().map(|n| vars.get(n).unwrap()).collect();
        (loss, leaves)
    })
}

/// Replaces every tensor in `store` with uniform noise in [-scale, scale].
pub fn randomise(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        let shape = t.shape().to_vec();
        let mut u = uniform(&mut r, &shape);
        u.data_mut().iter_mut().for_each(|v| *v *= scale);
        *t = u;
    }
}

/// AUROC by enumerating every positive/negative pair; ties count one half.
pub fn auroc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1.0 && yj == 0.0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision by walking ranks: sample `j` ranks above `i` when its
/// score is higher, or equal with a smaller index.
pub fn ap_rank_walk(scores: &[f64], labels: &[f64]) -> f64 {
    let above = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let n = scores.len();
    let mut total = 0.0;
    let mut pos = 0.0;
    for i in (0..n).filter(|&i| labels[i] == 1.0) {
        pos += 1.0;
        let rank = 1 + (0..n).filter(|&j| above(j, i)).count();
        let hits = 1 + (0..n).filter(|&j| labels[j] == 1.0 && above(j, i)).count();
        total += hits as f64 / rank as f64;
    }
    total / pos
}

/// Random scored instance with both classes; about half the instances have
/// heavily tied scores.
pub fn metric_instance(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = r.gen_range(2..80);
    let ties = r.gen_bool(0.5);
    loop {
        let labels: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let pos = labels.iter().filter(|&&y| y == 1.0).count();
        if pos == 0 || pos == n {
            continue;
        }
        let scores = (0..n)
            .map(|_| {
                let s: f64 = r.gen_range(-3.0..3.0);
                if ties {
                    (s * 2.0).round() / 2.0
                } else {
                    s
                }
            })
            .collect();
        return (scores, labels);
    }
}

/// CSV rows as strings with every wall-clock column (header containing
/// `seconds`) removed.
pub fn csv_without_timing(path: &std::path::Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    let rows: Vec<Vec<String>> = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    let keep: Vec<bool> = rows[0].iter().map(|h| !h.contains("seconds")).collect();
    rows.into_iter()
        .map(|row| row.into_iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| v).collect())
        .collect()
}

/// Small but complete experiment config for CLI runs.
pub fn smoke_config(extra: &str) -> String {
    format!(
        r#"
seed = 7

[backbone]
dim = 8
heads = 2
layers = 2
ffn_mult = 2
rwpe_steps = 3
max_degree = 4

[pretrain]
count = 60
size_range = [5, 9]
epochs = 2
batch_size = 16
lr = 0.003
warmup_epochs = 0.5

[task]
name = "motif-presence"
count = 30
size_range = [6, 9]

[tuning]
mode = "deepgpt"
prompt_len = 2
epochs = 2
batch_size = 8
lr = 0.01
warmup_epochs = 0.5
{extra}
"#
    )
}
