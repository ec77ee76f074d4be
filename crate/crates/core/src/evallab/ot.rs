//! Token distributions and exact optimal transport between them.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numerics::Tensor;

/// Probability weights on codebook tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    /// Token indices, ascending and distinct.
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
}

impl DiscreteDistribution {
    /// Sorts and merges `(token, weight)` pairs; weights must be
    /// non-negative and sum to 1 within 1e-12.
    pub fn new(pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self, EvalError> {
        let mut pairs: Vec<(usize, f64)> = pairs.into_iter().collect();
        if let Some(&(t, w)) = pairs.iter().find(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(EvalError::Distribution(format!("token {t} has weight {w}")));
        }
        pairs.sort_by_key(|p| p.0);
        let mut support: Vec<usize> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (t, w) in pairs {
            if support.last() == Some(&t) {
                *weights.last_mut().expect("parallel") += w;
            } else {
                support.push(t);
                weights.push(w);
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(EvalError::Distribution(format!("weights sum to {total}")));
        }
        Ok(Self { support, weights })
    }

    pub fn point(token: usize) -> Self {
        Self { support: vec![token], weights: vec![1.0] }
    }

    pub fn weight(&self, token: usize) -> f64 {
        self.support.binary_search(&token).map_or(0.0, |i| self.weights[i])
    }
}

/// The empirical distribution of token assignments: weight of `c` is the
/// share of rows assigned to `c`.
pub fn pushforward(indices: &[usize]) -> Result<DiscreteDistribution, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::Distribution("no assignments".into()));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let n = indices.len();
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < n {
        let j = sorted[i..].iter().position(|&t| t != sorted[i]).map_or(n, |k| i + k);
        pairs.push((sorted[i], (j - i) as f64 / n as f64));
        i = j;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    // Counts over n can round to a sum a few ulps from 1; renormalise the largest weight.
    if let Some(p) = pairs.iter_mut().max_by(|a, b| a.1.total_cmp(&b.1)) {
        p.1 += 1.0 - total;
    }
    DiscreteDistribution::new(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub cost: f64,
    /// `(source token, target token, mass)` for every arc carrying flow.
    pub flows: Vec<(usize, usize, f64)>,
}

fn euclid(tokens: &Tensor, a: usize, b: usize) -> f64 {
    tokens.row(a).iter().zip(tokens.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

const EPS: f64 = 1e-15;

/// Minimum-cost transport from `p` to `q` with Euclidean token distances,
/// by successive shortest augmenting paths.
pub fn transport(p: &DiscreteDistribution, q: &DiscreteDistribution, tokens: &Tensor) -> Result<TransportPlan, EvalError> {
    let c = tokens.rows();
    for d in [p, q] {
        if let Some(&t) = d.support.iter().find(|&&t| t >= c) {
            return Err(EvalError::Distribution(format!("token {t} outside a codebook of {c}")));
        }
        if d.support.len() != d.weights.len() {
            return Err(EvalError::Distribution("support and weights differ in length".into()));
        }
    }
    let (sp, sq): (f64, f64) = (p.weights.iter().sum(), q.weights.iter().sum());
    if (sp - sq).abs() > 1e-9 {
        return Err(EvalError::Distribution(format!("total masses {sp} and {sq} differ")));
    }
    let (m, n) = (p.support.len(), q.support.len());
    let cost: Vec<Vec<f64>> = p.support.iter().map(|&a| q.support.iter().map(|&b| euclid(tokens, a, b)).collect()).collect();
    let mut supply = p.weights.clone();
    let mut demand = q.weights.clone();
    let mut flow = vec![vec![0.0; n]; m];

    // Node ids: source m + n, sinks are demand nodes m..m + n reached via the
    // virtual sink; supply nodes 0..m.
    let v = m + n;
    let mut pot = vec![0.0; v];
    loop {
        if supply.iter().all(|&s| s <= EPS) || demand.iter().all(|&d| d <= EPS) {
            break;
        }
        // Dijkstra from every supply node with remaining mass (a virtual
        // source with zero-cost arcs), on reduced costs.
        let mut dist = vec![f64::INFINITY; v];
        let mut prev = vec![usize::MAX; v];
        let mut done = vec![false; v];
        for i in 0..m {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            for k in 0..v {
                if !done[k] && dist[k].is_finite() && (u == usize::MAX || dist[k] < dist[u]) {
                    u = k;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..n {
                    let w = m + j;
                    let rc = (cost[u][j] + pot[u] - pot[w]).max(0.0);
                    if dist[u] + rc < dist[w] {
                        dist[w] = dist[u] + rc;
                        prev[w] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[i][j] > EPS {
                        let rc = (-cost[i][j] + pot[u] - pot[i]).max(0.0);
                        if dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = u;
                        }
                    }
                }
            }
        }
        // Closest demand node that still needs mass.
        let Some(end) = (0..n).filter(|&j| demand[j] > EPS && dist[m + j].is_finite()).min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]).then(a.cmp(&b))) else {
            break;
        };
        let t = m + end;
        let cut = dist[t];
        for k in 0..v {
            pot[k] += dist[k].min(cut);
        }
        // Bottleneck along the path.
        let mut amount = demand[end];
        let mut w = t;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u >= m {
                amount = amount.min(flow[w][u - m]);
            }
            w = u;
        }
        let start = w;
        amount = amount.min(supply[start]);
        let mut w = t;
        while prev[w] != usize::MAX {
            let u = prev[w];
            if u < m {
                flow[u][w - m] += amount;
            } else {
                flow[w][u - m] -= amount;
                if flow[w][u - m] <= EPS {
                    flow[w][u - m] = 0.0;
                }
            }
            w = u;
        }
        supply[start] -= amount;
        demand[end] -= amount;
        if supply[start] <= EPS {
            supply[start] = 0.0;
        }
        if demand[end] <= EPS {
            demand[end] = 0.0;
        }
    }

    for (i, row) in flow.iter().enumerate() {
        let out: f64 = row.iter().sum();
        if (out - p.weights[i]).abs() > 1e-9 {
            return Err(EvalError::Distribution(format!("plan misses source marginal by {}", out - p.weights[i])));
        }
    }
    for j in 0..n {
        let inflow: f64 = flow.iter().map(|r| r[j]).sum();
        if (inflow - q.weights[j]).abs() > 1e-9 {
            return Err(EvalError::Distribution(format!("plan misses target marginal by {}", inflow - q.weights[j])));
        }
    }
    let mut total = 0.0;
    let mut flows = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if flow[i][j] > 0.0 {
                total += flow[i][j] * cost[i][j];
                flows.push((p.support[i], q.support[j], flow[i][j]));
            }
        }
    }
    Ok(TransportPlan { cost: total, flows })
}

/// Exact Wasserstein-1 distance between token distributions under the
/// Euclidean metric on `tokens` rows.
pub fn wasserstein1(p: &DiscreteDistribution, q: &DiscreteDistribution, tokens: &Tensor) -> Result<f64, EvalError> {
    Ok(transport(p, q, tokens)?.cost)
}
