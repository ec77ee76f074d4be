//! Synthetic graph generators.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Modality, MultimodalGraph, Split};
use crate::numerics::{Seed, StreamRng, Tensor};

/// Stochastic block model with block-dependent feature means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmSpec {
    pub block_sizes: Vec<usize>,
    pub p_in: f64,
    pub p_out: f64,
    pub modalities: Vec<Modality>,
    pub anchor: usize,
    /// Standard deviation of the per-block mean vectors.
    pub mean_scale: f64,
    /// Standard deviation of per-node noise around the block mean.
    pub sigma: f64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        Self {
            block_sizes: vec![50; 4],
            p_in: 0.1,
            p_out: 0.01,
            modalities: vec![Modality::new("text", 16), Modality::new("image", 24)],
            anchor: 0,
            mean_scale: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynergyMode {
    /// y_i = a_i XOR b_i.
    Within,
    /// y_i = a_i XOR (majority b over the neighbours of i).
    Neighbor,
}

/// Planted XOR synergy: modality "text" carries bit a, "image" carries bit b,
/// the label needs both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynergySpec {
    pub num_nodes: usize,
    pub edge_prob: f64,
    pub sigma: f64,
    pub unique_dims: (usize, usize),
    pub mode: SynergyMode,
}

impl Default for SynergySpec {
    fn default() -> Self {
        Self { num_nodes: 2000, edge_prob: 0.001, sigma: 0.1, unique_dims: (7, 7), mode: SynergyMode::Within }
    }
}

fn check_prob(name: &str, p: f64) -> Result<(), DataError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(DataError::Contract(format!("{name} = {p} is not a probability")))
    }
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// Shuffled 60/20/20 train/val/test assignment of `items`.
fn split_items(items: &mut [usize], rng: &mut StreamRng, out: &mut [Split]) {
    items.shuffle(rng);
    let n = items.len();
    let n_train = n * 6 / 10;
    let n_val = n * 2 / 10;
    for (k, &i) in items.iter().enumerate() {
        out[i] = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

fn edge_splits(m: usize, rng: &mut StreamRng) -> Vec<Split> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    let mut out = vec![Split::Train; m];
    let n_train = m * 8 / 10;
    let n_val = m / 10;
    for (k, &e) in idx.iter().enumerate() {
        if k >= n_train + n_val {
            out[e] = Split::Test;
        } else if k >= n_train {
            out[e] = Split::Val;
        }
    }
    out
}

pub fn gen_sbm_mag(spec: &SbmSpec, seed: Seed) -> Result<MultimodalGraph, DataError> {
    check_prob("p_in", spec.p_in)?;
    check_prob("p_out", spec.p_out)?;
    let block: Vec<usize> = spec
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect();
    let n = block.len();

    let mut rng = seed.stream("sbm/edges");
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block[u] == block[v] { spec.p_in } else { spec.p_out };
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }

    let mut rng = seed.stream("sbm/features");
    let mut features = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let means: Vec<Vec<f64>> = (0..spec.block_sizes.len())
            .map(|_| (0..m.dim).map(|_| spec.mean_scale * gaussian(&mut rng)).collect())
            .collect();
        let mut data = Vec::with_capacity(n * m.dim);
        for &b in &block {
            for mu in &means[b] {
                data.push(mu + spec.sigma * gaussian(&mut rng));
            }
        }
        features.push(Tensor::matrix(n, m.dim, data).expect("sized"));
    }

    let mut rng = seed.stream("sbm/splits");
    let mut splits = vec![Split::Unassigned; n];
    split_items(&mut (0..n).collect::<Vec<_>>(), &mut rng, &mut splits);
    let es = edge_splits(edges.len(), &mut rng);

    MultimodalGraph::new(n, edges, spec.modalities.clone(), spec.anchor, features)?
        .with_labels(block, spec.block_sizes.len().max(1))?
        .with_node_splits(splits)?
        .with_edge_splits(es)
}

pub fn gen_synergy_mag(spec: &SynergySpec, seed: Seed) -> Result<MultimodalGraph, DataError> {
    check_prob("edge_prob", spec.edge_prob)?;
    let n = spec.num_nodes;

    // Exactly balanced (a, b) cells so that neither bit alone says anything about y.
    let mut rng = seed.stream("synergy/bits");
    let mut cells: Vec<usize> = (0..n).map(|i| i % 4).collect();
    cells.shuffle(&mut rng);
    let a: Vec<usize> = cells.iter().map(|c| c >> 1).collect();
    let b: Vec<usize> = cells.iter().map(|c| c & 1).collect();

    let mut rng = seed.stream("synergy/edges");
    let mut edges = Vec::new();
    let mut degree = vec![0usize; n];
    let mut adjacency = vec![Vec::new(); n];
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(spec.edge_prob) {
                edges.push((u, v));
                degree[u] += 1;
                degree[v] += 1;
                adjacency[u].push(v);
                adjacency[v].push(u);
            }
        }
    }

    let labels: Vec<usize> = match spec.mode {
        SynergyMode::Within => (0..n).map(|i| a[i] ^ b[i]).collect(),
        SynergyMode::Neighbor => {
            if let Some(i) = degree.iter().position(|&d| d == 0) {
                return Err(DataError::Generation(format!(
                    "neighbour synergy needs every node connected; node {i} is isolated"
                )));
            }
            (0..n)
                .map(|i| {
                    let ones = adjacency[i].iter().filter(|&&j| b[j] == 1).count();
                    let zeros = adjacency[i].len() - ones;
                    let major = match ones.cmp(&zeros) {
                        std::cmp::Ordering::Greater => 1,
                        std::cmp::Ordering::Less => 0,
                        std::cmp::Ordering::Equal => b[i],
                    };
                    a[i] ^ major
                })
                .collect()
        }
    };

    let mut rng = seed.stream("synergy/features");
    let planted = |bits: &[usize], unique: usize, rng: &mut StreamRng| {
        let mut data = Vec::with_capacity(n * (unique + 1));
        for &bit in bits {
            data.push(if bit == 1 { 1.0 } else { -1.0 } + spec.sigma * gaussian(rng));
            data.extend((0..unique).map(|_| gaussian(rng)));
        }
        Tensor::matrix(n, unique + 1, data).expect("sized")
    };
    let xa = planted(&a, spec.unique_dims.0, &mut rng);
    let xb = planted(&b, spec.unique_dims.1, &mut rng);

    // Stratify the node split by cell so every split keeps the cells balanced.
    let mut rng = seed.stream("synergy/splits");
    let mut splits = vec![Split::Unassigned; n];
    for c in 0..4 {
        let mut members: Vec<usize> = (0..n).filter(|&i| cells[i] == c).collect();
        split_items(&mut members, &mut rng, &mut splits);
    }
    let es = edge_splits(edges.len(), &mut rng);

    let modalities = vec![Modality::new("text", spec.unique_dims.0 + 1), Modality::new("image", spec.unique_dims.1 + 1)];
    MultimodalGraph::new(n, edges, modalities, 0, vec![xa, xb])?
        .with_labels(labels, 2)?
        .with_node_splits(splits)?
        .with_edge_splits(es)
}
