//! N-way K-shot evaluation with cosine prototypes.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numerics::{Seed, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotTask {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_task: usize,
    /// Classes to draw from; `None` means every class present.
    pub classes: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for FewShotTask {
    fn default() -> Self {
        Self { n_way: 5, k_shot: 5, n_query: 10, n_task: 10, classes: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub mean: f64,
    /// Population standard deviation over repetitions.
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Repetition `r` draws its classes and instances from
/// `Seed(task.seed).child("fewshot", r)`. Sampled classes are ordered by id;
/// a query goes to the prototype of highest cosine similarity, the lowest
/// position among equals.
pub fn fewshot_eval(emb: &Tensor, labels: &[usize], task: &FewShotTask) -> Result<FewShotResult, EvalError> {
    if labels.len() != emb.rows() {
        return Err(EvalError::Insufficient(format!("{} labels for {} embeddings", labels.len(), emb.rows())));
    }
    if task.n_way == 0 || task.k_shot == 0 || task.n_query == 0 || task.n_task == 0 {
        return Err(EvalError::Insufficient(format!("degenerate task {task:?}")));
    }
    let max_class = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); max_class];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let pool: Vec<usize> = match &task.classes {
        Some(c) => c.clone(),
        None => (0..max_class).collect(),
    };
    let need = task.k_shot + task.n_query;
    let eligible: Vec<usize> = pool.into_iter().filter(|&c| members.get(c).is_some_and(|m| m.len() >= need)).collect();
    if eligible.len() < task.n_way {
        return Err(EvalError::Insufficient(format!(
            "{} classes have {need} instances, {}-way tasks need {}",
            eligible.len(),
            task.n_way,
            task.n_way
        )));
    }

    let mut accuracies = Vec::with_capacity(task.n_task);
    for rep in 0..task.n_task {
        let seed = Seed(task.seed).child("fewshot", rep as u64);
        let mut rng = seed.stream("classes");
        let mut classes: Vec<usize> = index::sample(&mut rng, eligible.len(), task.n_way).into_iter().map(|i| eligible[i]).collect();
        classes.sort_unstable();
        let mut supports = Vec::with_capacity(task.n_way);
        let mut queries = Vec::new();
        let mut rng = seed.stream("instances");
        for (pos, &c) in classes.iter().enumerate() {
            let pick: Vec<usize> = index::sample(&mut rng, members[c].len(), need).into_iter().map(|i| members[c][i]).collect();
            queries.extend(pick[task.k_shot..].iter().map(|&i| (i, pos)));
            supports.push(pick[..task.k_shot].to_vec());
        }
        accuracies.push(episode_accuracy(emb, &supports, &queries));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    Ok(FewShotResult { mean, std, accuracies })
}

/// Accuracy of one episode: prototype `p` is the mean of rows `supports[p]`,
/// each `(row, p)` query is scored against the prototypes by cosine.
pub fn episode_accuracy(emb: &Tensor, supports: &[Vec<usize>], queries: &[(usize, usize)]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let d = emb.cols();
    let prototypes: Vec<Vec<f64>> = supports
        .iter()
        .map(|rows| {
            let mut proto = vec![0.0; d];
            for &i in rows {
                proto.iter_mut().zip(emb.row(i)).for_each(|(p, v)| *p += v / rows.len() as f64);
            }
            proto
        })
        .collect();
    let correct = queries
        .iter()
        .filter(|&&(i, truth)| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (pos, p) in prototypes.iter().enumerate() {
                let s = cosine(emb.row(i), p);
                if s > best.0 {
                    best = (s, pos);
                }
            }
            best.1 == truth
        })
        .count();
    correct as f64 / queries.len() as f64
}
