use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::magdata::{gen_sbm_mag, Modality, SbmSpec};
use crate::model::{ModelConfig, PlanetModel};
use crate::numerics::{Seed, Tensor};

fn random_tokens(c: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = Seed(seed).stream("tokens");
    Tensor::matrix(c, d, (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_dist(rng: &mut impl Rng, c: usize, k: usize) -> DiscreteDistribution {
    let support = rand::seq::index::sample(rng, c, k).into_vec();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|r| r / total).collect();
    let s: f64 = w.iter().sum();
    w[0] += 1.0 - s;
    DiscreteDistribution::new(support.into_iter().zip(w)).unwrap()
}

/// Minimum cost over every basic feasible solution of the transport polytope.
fn lp_vertex_oracle(p: &[f64], q: &[f64], cost: &[Vec<f64>]) -> f64 {
    let (m, n) = (p.len(), q.len());
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let r = m + n - 1;
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << cells.len()) {
        if mask.count_ones() as usize != r {
            continue;
        }
        let basis: Vec<(usize, usize)> = (0..cells.len()).filter(|b| mask >> b & 1 == 1).map(|b| cells[b]).collect();
        // Rows: m supply equations then n demand equations; last column is the rhs.
        let mut a = vec![vec![0.0; r + 1]; m + n];
        for (k, &(i, j)) in basis.iter().enumerate() {
            a[i][k] = 1.0;
            a[m + j][k] = 1.0;
        }
        for i in 0..m {
            a[i][r] = p[i];
        }
        for j in 0..n {
            a[m + j][r] = q[j];
        }
        let mut row = 0;
        let mut pivots = Vec::new();
        for col in 0..r {
            let Some(piv) = (row..m + n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())) else { break };
            if a[piv][col].abs() < 1e-12 {
                continue;
            }
            a.swap(row, piv);
            let lead = a[row][col];
            a[row].iter_mut().for_each(|v| *v /= lead);
            for other in 0..m + n {
                if other != row && a[other][col] != 0.0 {
                    let f = a[other][col];
                    let pivot_row = a[row].clone();
                    a[other].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
                }
            }
            pivots.push(col);
            row += 1;
        }
        if pivots.len() < r || a[row..].iter().any(|rw| rw[r].abs() > 1e-12) {
            continue;
        }
        let x: Vec<f64> = (0..r).map(|k| a[k][r]).collect();
        if x.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let c: f64 = basis.iter().zip(&x).map(|(&(i, j), v)| cost[i][j] * v).sum();
        best = best.min(c);
    }
    best
}

fn dist_between(tokens: &Tensor, a: usize, b: usize) -> f64 {
    tokens.row(a).iter().zip(tokens.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn pushforward_counts_assignments() {
    let d = pushforward(&[0, 0, 1, 2]).unwrap();
    assert_eq!(d.support, vec![0, 1, 2]);
    assert_eq!(d.weights, vec![0.5, 0.25, 0.25]);
    assert_eq!(pushforward(&[0; 7]).unwrap(), DiscreteDistribution::point(0));
    assert!(pushforward(&[]).is_err());
}

proptest! {
    #[test]
    fn pushforward_is_a_probability_vector(idx in prop::collection::vec(0usize..20, 1..300)) {
        let d = pushforward(&idx).unwrap();
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(d.weights.iter().all(|&w| w > 0.0));
        prop_assert!(d.support.windows(2).all(|w| w[0] < w[1]));
        for &t in &d.support {
            let count = idx.iter().filter(|&&i| i == t).count();
            prop_assert!((d.weight(t) - count as f64 / idx.len() as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn distribution_rejects_bad_weights() {
    assert!(DiscreteDistribution::new([(0, 0.5), (1, 0.4)]).is_err());
    assert!(DiscreteDistribution::new([(0, 1.5), (1, -0.5)]).is_err());
    assert!(DiscreteDistribution::new([(0, f64::NAN)]).is_err());
    let merged = DiscreteDistribution::new([(3, 0.25), (1, 0.5), (3, 0.25)]).unwrap();
    assert_eq!(merged.support, vec![1, 3]);
    assert_eq!(merged.weights, vec![0.5, 0.5]);
}

#[test]
fn w1_of_identical_and_point_masses() {
    let tokens = random_tokens(8, 5, 1);
    let mut rng = Seed(2).stream("d");
    let p = random_dist(&mut rng, 8, 4);
    assert_eq!(wasserstein1(&p, &p, &tokens).unwrap(), 0.0);
    for (u, v) in [(0, 3), (5, 2), (7, 7)] {
        let w = wasserstein1(&DiscreteDistribution::point(u), &DiscreteDistribution::point(v), &tokens).unwrap();
        assert!((w - dist_between(&tokens, u, v)).abs() <= 1e-12);
    }
}

#[test]
fn w1_rejects_mass_mismatch_and_foreign_tokens() {
    let tokens = random_tokens(4, 3, 1);
    let p = DiscreteDistribution { support: vec![0, 1], weights: vec![0.5, 0.5] };
    let q = DiscreteDistribution { support: vec![2], weights: vec![1.0 + 1e-6] };
    assert!(matches!(wasserstein1(&p, &q, &tokens), Err(EvalError::Distribution(_))));
    assert!(wasserstein1(&p, &DiscreteDistribution::point(9), &tokens).is_err());
}

#[test]
fn w1_matches_lp_vertex_oracle() {
    let tokens = random_tokens(6, 3, 3);
    let mut rng = Seed(4).stream("cases");
    for case in 0..300 {
        let (m, n) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let p = random_dist(&mut rng, 6, m);
        let q = random_dist(&mut rng, 6, n);
        let cost: Vec<Vec<f64>> =
            p.support.iter().map(|&a| q.support.iter().map(|&b| dist_between(&tokens, a, b)).collect()).collect();
        let oracle = lp_vertex_oracle(&p.weights, &q.weights, &cost);
        let plan = transport(&p, &q, &tokens).unwrap();
        assert!((plan.cost - oracle).abs() <= 1e-9, "case {case}: {} vs {oracle}", plan.cost);
        for (i, &t) in p.support.iter().enumerate() {
            let out: f64 = plan.flows.iter().filter(|f| f.0 == t).map(|f| f.2).sum();
            assert!((out - p.weights[i]).abs() <= 1e-9);
        }
        for (j, &t) in q.support.iter().enumerate() {
            let inflow: f64 = plan.flows.iter().filter(|f| f.1 == t).map(|f| f.2).sum();
            assert!((inflow - q.weights[j]).abs() <= 1e-9);
        }
        assert!(plan.flows.iter().all(|f| f.2 > 0.0));
    }
}

#[test]
fn hand_set_three_point_case() {
    // Tokens on a line at 0, 1, 3.
    let tokens = Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
    let p = DiscreteDistribution::new([(0, 0.5), (1, 0.3), (2, 0.2)]).unwrap();
    let q = DiscreteDistribution::new([(0, 0.2), (1, 0.2), (2, 0.6)]).unwrap();
    // On a line W1 is the integral of |F_p − F_q|: 0.3·1 + 0.4·2.
    let w = wasserstein1(&p, &q, &tokens).unwrap();
    assert!((w - 1.1).abs() <= 1e-12, "{w}");
}

#[test]
fn w1_metric_axioms() {
    let tokens = random_tokens(10, 4, 5);
    let mut rng = Seed(6).stream("triples");
    for _ in 0..100 {
        let k = |rng: &mut _| rand::Rng::random_range(rng, 1..=6);
        let (ka, kb, kc) = (k(&mut rng), k(&mut rng), k(&mut rng));
        let a = random_dist(&mut rng, 10, ka);
        let b = random_dist(&mut rng, 10, kb);
        let c = random_dist(&mut rng, 10, kc);
        let ab = wasserstein1(&a, &b, &tokens).unwrap();
        let ba = wasserstein1(&b, &a, &tokens).unwrap();
        let bc = wasserstein1(&b, &c, &tokens).unwrap();
        let ac = wasserstein1(&a, &c, &tokens).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
        assert!(ac <= ab + bc + 1e-9);
        assert!(ab >= 0.0);
        if a != b {
            assert!(ab > 0.0);
        }
        assert_eq!(wasserstein1(&a, &a, &tokens).unwrap(), 0.0);
    }
}

fn labelled(points: &[[f64; 2]], labels: &[usize]) -> (Tensor, Vec<usize>) {
    (Tensor::matrix(points.len(), 2, points.iter().flatten().copied().collect()).unwrap(), labels.to_vec())
}

#[test]
fn orthogonal_prototypes_classify_perfectly() {
    let (emb, labels) = labelled(&[[1.0, 0.0]; 4].iter().chain(&[[0.0, 1.0]; 4]).copied().collect::<Vec<_>>(), &[0, 0, 0, 0, 1, 1, 1, 1]);
    let task = FewShotTask { n_way: 2, k_shot: 2, n_query: 2, n_task: 5, classes: None, seed: 3 };
    let r = fewshot_eval(&emb, &labels, &task).unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.std, 0.0);
}

#[test]
fn identical_embeddings_fall_back_to_first_prototype() {
    let n_way = 4;
    let labels: Vec<usize> = (0..40).map(|i| i % 5).collect();
    let emb = Tensor::matrix(40, 3, vec![0.7; 120]).unwrap();
    let task = FewShotTask { n_way, k_shot: 3, n_query: 4, n_task: 20, classes: None, seed: 1 };
    let r = fewshot_eval(&emb, &labels, &task).unwrap();
    // Every query ties on all prototypes and goes to the first, which is right for one class in n_way.
    assert!(r.accuracies.iter().all(|&a| a == 1.0 / n_way as f64));
}

fn angle_oracle(emb: &Tensor, supports: &[usize; 2], queries: &[(usize, usize)]) -> f64 {
    let angle = |i: usize| emb.row(i)[1].atan2(emb.row(i)[0]);
    let gap = |a: f64, b: f64| {
        let d = (a - b).rem_euclid(std::f64::consts::TAU);
        d.min(std::f64::consts::TAU - d)
    };
    let hits = queries
        .iter()
        .filter(|&&(q, truth)| {
            let g0 = gap(angle(q), angle(supports[0]));
            let g1 = gap(angle(q), angle(supports[1]));
            (if g1 < g0 { 1 } else { 0 }) == truth
        })
        .count();
    hits as f64 / queries.len() as f64
}

#[test]
fn two_way_one_shot_matches_brute_force() {
    let points = [[1.0, 0.2], [0.3, 1.0], [0.9, -0.5], [2.0, 1.1], [-0.4, 1.0], [-1.0, -0.2], [0.1, -1.0], [-0.6, 0.7]];
    let labels = [0, 0, 0, 0, 1, 1, 1, 1];
    let (emb, labels) = labelled(&points, &labels);
    let class0: Vec<usize> = (0..4).collect();
    let class1: Vec<usize> = (4..8).collect();
    let mut seen = Vec::new();
    for &s0 in &class0 {
        for &s1 in &class1 {
            let queries: Vec<(usize, usize)> =
                class0.iter().filter(|&&i| i != s0).map(|&i| (i, 0)).chain(class1.iter().filter(|&&i| i != s1).map(|&i| (i, 1))).collect();
            let ours = episode_accuracy(&emb, &[vec![s0], vec![s1]], &queries);
            assert_eq!(ours, angle_oracle(&emb, &[s0, s1], &queries), "supports {s0}, {s1}");
            seen.push(ours);
        }
    }
    let task = FewShotTask { n_way: 2, k_shot: 1, n_query: 3, n_task: 30, classes: None, seed: 9 };
    let r = fewshot_eval(&emb, &labels, &task).unwrap();
    assert!(r.accuracies.iter().all(|a| seen.contains(a)));
}

#[test]
fn fewshot_is_deterministic_and_checks_pool() {
    let mut rng = Seed(1).stream("emb");
    let emb = Tensor::matrix(60, 4, (0..240).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..60).map(|i| i % 6).collect();
    let task = FewShotTask { n_way: 3, k_shot: 2, n_query: 3, n_task: 10, classes: None, seed: 4 };
    assert_eq!(fewshot_eval(&emb, &labels, &task).unwrap(), fewshot_eval(&emb, &labels, &task).unwrap());
    let other = FewShotTask { seed: 5, ..task.clone() };
    assert_ne!(fewshot_eval(&emb, &labels, &task).unwrap().accuracies, fewshot_eval(&emb, &labels, &other).unwrap().accuracies);
    let big = FewShotTask { k_shot: 5, n_query: 6, ..task.clone() };
    assert!(matches!(fewshot_eval(&emb, &labels, &big), Err(EvalError::Insufficient(_))));
    let pool = FewShotTask { classes: Some(vec![0, 1]), ..task };
    assert!(matches!(fewshot_eval(&emb, &labels, &pool), Err(EvalError::Insufficient(_))));
}

#[test]
fn untrained_alignment_report_is_finite() {
    let spec = SbmSpec {
        block_sizes: vec![15, 15],
        modalities: vec![Modality::new("text", 6), Modality::new("image", 5), Modality::new("audio", 4)],
        ..Default::default()
    };
    let g = gen_sbm_mag(&spec, Seed(2)).unwrap();
    let model = PlanetModel::new(ModelConfig::desk(g.modalities().to_vec(), 0), Seed(1)).unwrap();
    let r = alignment_report(&model, &g).unwrap();
    assert_eq!(r.anchor, "text");
    assert_eq!(r.modalities.len(), 3);
    assert!(r.terms("text").unwrap().w1_to_anchor.is_none());
    for t in &r.modalities[1..] {
        assert!(t.w1_to_anchor.unwrap().is_finite() && t.w1_to_anchor.unwrap() >= 0.0);
    }
    assert!(r.modalities.iter().all(|t| t.residual.is_finite() && t.tokens_used >= 1));
}
