//! Task heads trained on frozen embeddings.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::encoder::{ForwardCtx, Linear, Mlp, ModelError};
use crate::magdata::{MultimodalGraph, Split};
use crate::numerics::{AdamW, AdamWConfig, ParamStore, Seed, StreamRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Hidden width of the node-classification head; `None` for a linear head.
    pub hidden: Option<usize>,
    /// Hidden width of the pair-scoring head.
    pub link_hidden: usize,
    /// Full-batch optimizer steps.
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Sampled non-edges each test edge is ranked against.
    pub mrr_negatives: usize,
    /// Z-score embedding columns before the head.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            link_hidden: 64,
            epochs: 300,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 0,
            mrr_negatives: 100,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Linear(Linear),
    Mlp(Mlp),
}

impl Head {
    fn new(store: &mut ParamStore, inp: usize, hidden: Option<usize>, out: usize, rng: &mut StreamRng) -> Result<Self, ModelError> {
        Ok(match hidden {
            Some(h) => Head::Mlp(Mlp::new(store, "head", inp, h, out, rng)?),
            None => Head::Linear(Linear::new(store, "head", inp, out, rng)?),
        })
    }

    fn forward(&self, tape: &mut Tape, ctx: &ForwardCtx, x: Var) -> Result<Var, ModelError> {
        match self {
            Head::Linear(l) => l.forward(tape, ctx, x),
            Head::Mlp(m) => m.forward(tape, ctx, x),
        }
    }
}

/// Column statistics; the identity when standardization is off.
#[derive(Clone, Debug)]
struct Scaler {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Scaler {
    fn fit(x: &Tensor, rows: &[usize], on: bool) -> Self {
        let d = x.cols();
        if !on || rows.is_empty() {
            return Self { mean: vec![0.0; d], inv_std: vec![1.0; d] };
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for &i in rows {
            var.iter_mut().zip(x.row(i)).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let inv_std = var.iter().map(|v| if v.sqrt() > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Self { mean, inv_std }
    }

    fn rows(&self, x: &Tensor, rows: &[usize]) -> Tensor {
        let mut out = x.select_rows(rows);
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        out
    }
}

/// A trained classification head together with its input scaling.
#[derive(Clone, Debug)]
pub struct Classifier {
    store: ParamStore,
    head: Head,
    scaler: Scaler,
}

impl Classifier {
    pub fn logits(&self, x: &Tensor, rows: &[usize]) -> Result<Tensor, TrainError> {
        let mut tape = Tape::new();
        let ctx = ForwardCtx::eval(&mut tape, &self.store)?;
        let xv = tape.constant(self.scaler.rows(x, rows))?;
        let out = self.head.forward(&mut tape, &ctx, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per row, lowest index on ties.
    pub fn predict(&self, x: &Tensor, rows: &[usize]) -> Result<Vec<usize>, TrainError> {
        let z = self.logits(x, rows)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_probe(cfg: &ProbeConfig) -> Result<(), TrainError> {
    if cfg.epochs == 0 || !(cfg.lr > 0.0 && cfg.lr.is_finite()) || !(cfg.weight_decay >= 0.0) {
        return Err(TrainError::Config(format!("probe epochs {} lr {} wd {}", cfg.epochs, cfg.lr, cfg.weight_decay)));
    }
    Ok(())
}

/// Full-batch cross-entropy training of a head on `rows` of `x`.
pub fn train_classifier(
    x: &Tensor,
    labels: &[usize],
    num_classes: usize,
    rows: &[usize],
    cfg: &ProbeConfig,
) -> Result<Classifier, TrainError> {
    check_probe(cfg)?;
    if rows.is_empty() {
        return Err(TrainError::Missing("no training rows for the probe".into()));
    }
    if let Some(&c) = rows.iter().map(|&i| &labels[i]).find(|&&c| c >= num_classes) {
        return Err(TrainError::Config(format!("label {c} with {num_classes} classes")));
    }
    let mut rng = Seed(cfg.seed).stream("probe/init");
    let mut store = ParamStore::new();
    let head = Head::new(&mut store, x.cols(), cfg.hidden, num_classes, &mut rng)?;
    let scaler = Scaler::fit(x, rows, cfg.standardize);
    let xs = scaler.rows(x, rows);
    let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &store);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let ctx = ForwardCtx::eval(&mut tape, &store)?;
        let xv = tape.constant(xs.clone())?;
        let z = head.forward(&mut tape, &ctx, xv)?;
        let lp = tape.log_softmax(z, 1)?;
        let picked = tape.pick(lp, &y)?;
        let m = tape.mean(picked)?;
        let loss = tape.scale(m, -1.0)?;
        let grads = tape.backward(loss)?;
        store.zero_grad();
        tape.accumulate_param_grads(&grads, &mut store);
        opt.step(&mut store)?;
    }
    Ok(Classifier { store, head, scaler })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1; a class with no true or predicted
/// members scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    if num_classes == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t != c).count() as f64;
        let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p != c && t == c).count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            total += 2.0 * precision * recall / (precision + recall);
        }
    }
    total / num_classes as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_macro_f1: f64,
    pub num_train: usize,
    pub num_test: usize,
}

/// Trains on the graph's train split and scores its test split.
pub fn node_classification_probe(emb: &Tensor, g: &MultimodalGraph, cfg: &ProbeConfig) -> Result<ClassificationReport, TrainError> {
    let labels = g.labels().ok_or_else(|| TrainError::Missing("graph has no node labels".into()))?;
    if g.node_splits().is_none() {
        return Err(TrainError::Missing("graph has no node splits".into()));
    }
    if emb.rows() != g.num_nodes() {
        return Err(TrainError::Config(format!("{} embedding rows for {} nodes", emb.rows(), g.num_nodes())));
    }
    let (train, test) = (g.nodes_in_split(Split::Train), g.nodes_in_split(Split::Test));
    if test.is_empty() {
        return Err(TrainError::Missing("test split is empty".into()));
    }
    let clf = train_classifier(emb, &labels.values, labels.num_classes, &train, cfg)?;
    let truth = |rows: &[usize]| rows.iter().map(|&i| labels.values[i]).collect::<Vec<_>>();
    let train_pred = clf.predict(emb, &train)?;
    let test_pred = clf.predict(emb, &test)?;
    let test_truth = truth(&test);
    Ok(ClassificationReport {
        train_accuracy: accuracy(&train_pred, &truth(&train)),
        test_accuracy: accuracy(&test_pred, &test_truth),
        test_macro_f1: macro_f1(&test_pred, &test_truth, labels.num_classes),
        num_train: train.len(),
        num_test: test.len(),
    })
}

/// Mean reciprocal rank of each positive among its negatives; a negative
/// scoring equal to the positive ranks ahead of it.
pub fn mrr(pos: &[f64], negs: &[Vec<f64>]) -> f64 {
    if pos.is_empty() {
        return 0.0;
    }
    let total: f64 = pos
        .iter()
        .zip(negs)
        .map(|(&p, ns)| 1.0 / (1 + ns.iter().filter(|&&n| n >= p).count()) as f64)
        .sum();
    total / pos.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub mrr: f64,
    pub num_test: usize,
    pub negatives_per_positive: usize,
    pub final_train_loss: f64,
}

fn pair_rows(x: &Tensor, pairs: &[(usize, usize)]) -> Tensor {
    let d = x.cols();
    let mut data = Vec::with_capacity(pairs.len() * 2 * d);
    for &(u, v) in pairs {
        data.extend_from_slice(x.row(u));
        data.extend_from_slice(x.row(v));
    }
    Tensor::matrix(pairs.len(), 2 * d, data).expect("sized")
}

/// Up to `k` distinct `w ≠ u` with `(u, w)` not an edge.
fn corrupt_tails(g: &MultimodalGraph, u: usize, k: usize, rng: &mut StreamRng) -> Vec<usize> {
    let n = g.num_nodes();
    let free = n - 1 - g.neighbors(u).len();
    if k >= free {
        let mut all: Vec<usize> = (0..n).filter(|&w| w != u && !g.has_edge(u, w)).collect();
        all.shuffle(rng);
        return all;
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let w = rng.random_range(0..n);
        if w != u && !g.has_edge(u, w) && seen.insert(w) {
            out.push(w);
        }
    }
    out
}

/// Pair-scoring head on concatenated endpoint embeddings, trained by binary
/// cross-entropy on train-split edges against as many sampled non-edges and
/// ranked on test-split edges.
pub fn link_prediction_probe(emb: &Tensor, g: &MultimodalGraph, cfg: &ProbeConfig) -> Result<LinkReport, TrainError> {
    check_probe(cfg)?;
    let splits = g.edge_splits().ok_or_else(|| TrainError::Missing("graph has no edge splits".into()))?;
    if emb.rows() != g.num_nodes() {
        return Err(TrainError::Config(format!("{} embedding rows for {} nodes", emb.rows(), g.num_nodes())));
    }
    let pick = |s: Split| -> Vec<(usize, usize)> {
        g.edges().iter().zip(splits).filter(|(_, &x)| x == s).map(|(&e, _)| e).collect()
    };
    let (train, test) = (pick(Split::Train), pick(Split::Test));
    if train.is_empty() || test.is_empty() {
        return Err(TrainError::Missing("link probe needs train and test edges".into()));
    }
    let all: Vec<usize> = (0..g.num_nodes()).collect();
    let scaler = Scaler::fit(emb, &all, cfg.standardize);
    let x = scaler.rows(emb, &all);

    let mut rng = Seed(cfg.seed).stream("probe/link");
    let mut store = ParamStore::new();
    let head = Mlp::new(&mut store, "pair", 2 * x.cols(), cfg.link_hidden, 1, &mut rng)?;
    let negs: Vec<(usize, usize)> = train
        .iter()
        .filter_map(|&(u, _)| corrupt_tails(g, u, 1, &mut rng).first().map(|&w| (u, w)))
        .collect();
    let pos_x = pair_rows(&x, &train);
    let neg_x = pair_rows(&x, &negs);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &store);
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let ctx = ForwardCtx::eval(&mut tape, &store)?;
        let (pv, nv) = (tape.constant(pos_x.clone())?, tape.constant(neg_x.clone())?);
        let sp = head.forward(&mut tape, &ctx, pv)?;
        let sn = head.forward(&mut tape, &ctx, nv)?;
        let sn = tape.scale(sn, -1.0)?;
        let (lp, ln) = (tape.log_sigmoid(sp)?, tape.log_sigmoid(sn)?);
        let (mp, mn) = (tape.mean(lp)?, tape.mean(ln)?);
        let s = tape.add(mp, mn)?;
        let loss = tape.scale(s, -1.0)?;
        last = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        store.zero_grad();
        tape.accumulate_param_grads(&grads, &mut store);
        opt.step(&mut store)?;
    }

    let score = |pairs: &[(usize, usize)]| -> Result<Vec<f64>, TrainError> {
        let mut tape = Tape::new();
        let ctx = ForwardCtx::eval(&mut tape, &store)?;
        let v = tape.constant(pair_rows(&x, pairs))?;
        let s = head.forward(&mut tape, &ctx, v)?;
        Ok(tape.value(s).data().to_vec())
    };
    let mut eval_rng = Seed(cfg.seed).stream("probe/mrr");
    let pos = score(&test)?;
    let mut neg_scores = Vec::with_capacity(test.len());
    for &(u, _) in &test {
        let tails = corrupt_tails(g, u, cfg.mrr_negatives, &mut eval_rng);
        let pairs: Vec<(usize, usize)> = tails.into_iter().map(|w| (u, w)).collect();
        neg_scores.push(if pairs.is_empty() { Vec::new() } else { score(&pairs)? });
    }
    Ok(LinkReport {
        mrr: mrr(&pos, &neg_scores),
        num_test: test.len(),
        negatives_per_positive: cfg.mrr_negatives,
        final_train_loss: last,
    })
}
