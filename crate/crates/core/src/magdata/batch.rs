//! Ego-subgraph mini-batches.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, MultimodalGraph};
use crate::numerics::{MessageEdges, Seed, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoConfig {
    pub hops: usize,
    pub edge_holdout_p: f64,
    pub sample_negatives: bool,
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self { hops: 2, edge_holdout_p: 0.15, sample_negatives: true }
    }
}

/// An induced ego subgraph with local ids `0..nodes.len()`.
///
/// Centers come first in `nodes`, followed by the rest in BFS order.
#[derive(Clone, Debug)]
pub struct EgoBatch {
    pub nodes: Vec<usize>,
    pub centers: Vec<usize>,
    pub features: Vec<Tensor>,
    /// Subgraph edges left visible to message passing, `(u, v)` with `u < v`.
    pub visible: Vec<(usize, usize)>,
    /// Subgraph edges hidden from message passing.
    pub held_out: Vec<(usize, usize)>,
    /// Structural positives: held-out plus visible edges.
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub message_edges: Arc<MessageEdges>,
}

impl EgoBatch {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn pair(u: usize, v: usize) -> (usize, usize) {
    (u.min(v), u.max(v))
}

pub fn sample_ego_batch(
    g: &MultimodalGraph,
    centers: &[usize],
    cfg: &EgoConfig,
    seed: Seed,
) -> Result<EgoBatch, DataError> {
    if let Some(&c) = centers.iter().find(|&&c| c >= g.num_nodes()) {
        return Err(DataError::Contract(format!("center {c} outside 0..{}", g.num_nodes())));
    }
    if !(0.0..=1.0).contains(&cfg.edge_holdout_p) {
        return Err(DataError::Contract(format!("edge_holdout_p = {}", cfg.edge_holdout_p)));
    }

    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut nodes = Vec::new();
    let mut frontier = Vec::new();
    for &c in centers {
        if !local.contains_key(&c) {
            local.insert(c, nodes.len());
            nodes.push(c);
            frontier.push(c);
        }
    }
    let center_ids: Vec<usize> = centers.iter().map(|c| local[c]).collect();
    for _ in 0..cfg.hops {
        let mut next = Vec::new();
        for &u in &frontier {
            for &v in g.neighbors(u) {
                if !local.contains_key(&v) {
                    local.insert(v, nodes.len());
                    nodes.push(v);
                    next.push(v);
                }
            }
        }
        frontier = next;
    }

    let mut sub_edges = Vec::new();
    for (lu, &u) in nodes.iter().enumerate() {
        for &v in g.neighbors(u) {
            if let Some(&lv) = local.get(&v) {
                if lu < lv {
                    sub_edges.push((lu, lv));
                }
            }
        }
    }
    sub_edges.sort_unstable();

    let mut rng = seed.stream("ego/holdout");
    let (mut visible, mut held_out) = (Vec::new(), Vec::new());
    for &e in &sub_edges {
        if cfg.edge_holdout_p > 0.0 && rng.random_bool(cfg.edge_holdout_p) {
            held_out.push(e);
        } else {
            visible.push(e);
        }
    }
    let mut positives = held_out.clone();
    positives.extend_from_slice(&visible);

    let negatives = if cfg.sample_negatives {
        sample_non_edges(nodes.len(), &sub_edges, positives.len(), seed)
    } else {
        Vec::new()
    };

    let n = nodes.len();
    let pairs = visible.iter().flat_map(|&(u, v)| [(u, v), (v, u)]).chain((0..n).map(|i| (i, i)));
    let message_edges = Arc::new(MessageEdges::new(n, pairs));
    let features = g.features().iter().map(|x| x.select_rows(&nodes)).collect();
    Ok(EgoBatch { nodes, centers: center_ids, features, visible, held_out, positives, negatives, message_edges })
}

/// `want` distinct local non-adjacent pairs, uniformly without replacement.
///
/// Returns every available non-edge, with a warning, when fewer exist.
fn sample_non_edges(n: usize, edges: &[(usize, usize)], want: usize, seed: Seed) -> Vec<(usize, usize)> {
    let edge_set: HashSet<(usize, usize)> = edges.iter().copied().collect();
    let total = n * n.saturating_sub(1) / 2;
    let available = total - edge_set.len();
    let mut rng = seed.stream("ego/negatives");
    if want == 0 {
        return Vec::new();
    }
    if 2 * want >= available {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|p| !edge_set.contains(p))
            .collect();
        if want > available {
            log::warn!("ego batch has {available} non-edges for {want} positives; using all of them");
            return all;
        }
        all.shuffle(&mut rng);
        all.truncate(want);
        return all;
    }
    let mut chosen = HashSet::with_capacity(want);
    let mut out = Vec::with_capacity(want);
    while out.len() < want {
        let s = index::sample(&mut rng, n, 2);
        let p = pair(s.index(0), s.index(1));
        if !edge_set.contains(&p) && chosen.insert(p) {
            out.push(p);
        }
    }
    out
}
