use rand::Rng;

use super::*;
use crate::gradcheck::{check_params, Tolerance};
use crate::numerics::Seed;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Seed(seed).stream("ndr-test");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn codebook(c: usize, d: usize, seed: u64) -> (ParamStore, Codebook) {
    let mut store = ParamStore::new();
    let cb = Codebook::new(&mut store, "cb", c, d, 0.93, 0.25, &mut Seed(seed).stream("init")).unwrap();
    (store, cb)
}

fn quantize_values(store: &ParamStore, cb: &Codebook, h: &Tensor) -> (Tensor, Vec<usize>) {
    let mut tape = Tape::new();
    let ctx = ForwardCtx::eval(&mut tape, store).unwrap();
    let hv = tape.constant(h.clone()).unwrap();
    let r = cb.quantize(&mut tape, &ctx, hv).unwrap();
    (tape.value(r.quantized).clone(), r.indices)
}

#[test]
fn exact_token_maps_to_itself() {
    let (store, cb) = codebook(6, 4, 1);
    let s = store.value(cb.tokens).clone();
    let h = Tensor::from_rows(&[s.row(3).to_vec()]).unwrap();
    let (q, idx) = quantize_values(&store, &cb, &h);
    assert_eq!(idx, vec![3]);
    assert_eq!(q.row(0), s.row(3));
}

#[test]
fn equidistant_input_takes_lowest_index() {
    let (mut store, cb) = codebook(2, 2, 2);
    store.value_mut(cb.tokens).data_mut().copy_from_slice(&[1.0, 0.0, -1.0, 0.0]);
    let (_, idx) = quantize_values(&store, &cb, &Tensor::from_rows(&[vec![0.0, 0.7]]).unwrap());
    assert_eq!(idx, vec![0]);
}

#[test]
fn quantize_matches_brute_force_oracle() {
    let (store, cb) = codebook(16, 5, 3);
    let h = random(64, 5, 4);
    let s = store.value(cb.tokens).clone();
    let (q, idx) = quantize_values(&store, &cb, &h);
    for i in 0..64 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..16 {
            let mut d = 0.0;
            for c in 0..5 {
                d += (s.at(j, c) - h.at(i, c)).powi(2);
            }
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        assert_eq!(idx[i], best);
        assert_eq!(q.row(i), s.row(best));
    }
}

fn gk(rows_t: &Tensor, rows_m: &Tensor, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(rows_t.clone()).unwrap();
    let b = tape.constant(rows_m.clone()).unwrap();
    let l = general_knowledge_loss(&mut tape, &[a, b], 0, tau).unwrap();
    tape.value(l).item()
}

#[test]
fn single_node_alignment_loss_is_zero() {
    assert_eq!(gk(&random(1, 3, 1), &random(1, 3, 2), 0.93), 0.0);
}

#[test]
fn orthogonal_pair_closed_form() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let expect = -2.0 * (1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((gk(&x, &x, 1.0) - expect).abs() <= 1e-9);
    assert!((expect - 0.6265).abs() < 1e-4);
}

#[test]
fn orthogonal_n_closed_form() {
    let n = 4;
    let x = Tensor::matrix(n, n, (0..n * n).map(|k| if k % (n + 1) == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
    let e = 1f64.exp();
    let expect = -2.0 * (e / (e + n as f64 - 1.0)).ln();
    assert!((gk(&x, &x, 1.0) - expect).abs() <= 1e-9);
}

#[test]
fn alignment_loss_is_scale_invariant() {
    let (a, b) = (random(5, 3, 7), random(5, 3, 8));
    let scaled = Tensor::matrix(5, 3, a.data().iter().map(|v| v * 10.0).collect()).unwrap();
    assert!((gk(&a, &b, 0.93) - gk(&scaled, &b, 0.93)).abs() < 1e-12);
}

#[test]
fn zero_rows_stay_finite() {
    assert!(gk(&Tensor::zeros(&[3, 2]), &random(3, 2, 1), 0.93).is_finite());
}

fn vq(h: &Tensor, s: &Tensor) -> f64 {
    let (mut store, cb) = codebook(s.rows(), s.cols(), 0);
    *store.value_mut(cb.tokens) = s.clone();
    let mut tape = Tape::new();
    let ctx = ForwardCtx::eval(&mut tape, &store).unwrap();
    let hv = tape.constant(h.clone()).unwrap();
    let r = cb.quantize(&mut tape, &ctx, hv).unwrap();
    let l = vq_loss(&mut tape, &[hv], &[r], 0.25).unwrap();
    tape.value(l).item()
}

#[test]
fn vq_loss_examples() {
    let s = Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0]]).unwrap();
    assert_eq!(vq(&Tensor::from_rows(&[vec![5.0, 5.0]]).unwrap(), &s), 0.0);
    assert!((vq(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &s) - 1.25).abs() <= 1e-12);
}

#[test]
fn vq_gradients_route_through_stop_gradients() {
    let (mut store, cb) = codebook(3, 2, 5);
    let h_id = store.register("h", random(4, 2, 6)).unwrap();
    let n = 4.0;
    let mut tape = Tape::new();
    let ctx = ForwardCtx::eval(&mut tape, &store).unwrap();
    let h = ctx.var(h_id);
    let r = cb.quantize(&mut tape, &ctx, h).unwrap();
    let idx = r.indices.clone();
    let l = vq_loss(&mut tape, &[h], &[r], 0.25).unwrap();
    let g = tape.backward(l).unwrap();
    let (hv, sv) = (store.value(h_id).clone(), store.value(cb.tokens).clone());
    let gh = g.get(h).unwrap();
    let gs = g.get(ctx.var(cb.tokens)).unwrap();
    let mut expect_s = Tensor::zeros(&[3, 2]);
    for i in 0..4 {
        for c in 0..2 {
            let diff = hv.at(i, c) - sv.at(idx[i], c);
            assert!((gh.at(i, c) - 2.0 * diff / n).abs() < 1e-12);
            let cur = expect_s.at(idx[i], c);
            expect_s.set(idx[i], c, cur - 2.0 * 0.25 * diff / n);
        }
    }
    assert!(gs.max_abs_diff(&expect_s) < 1e-12);

    // Finite differences with the stop-gradients frozen.
    let report = check_params(
        &store,
        |tape, ctx| {
            let h = ctx.var(h_id);
            let r = cb.quantize(tape, ctx, h)?;
            vq_loss(tape, &[h], &[r], 0.25)
        },
        Tolerance::default(),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.mismatches);
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let (store, cb) = codebook(4, 3, 9);
    let mut tape = Tape::new();
    let ctx = ForwardCtx::eval(&mut tape, &store).unwrap();
    let h = tape.leaf(random(5, 3, 10)).unwrap();
    let r = cb.quantize(&mut tape, &ctx, h).unwrap();
    let w = random(5, 3, 11);
    let wv = tape.constant(w.clone()).unwrap();
    let p = tape.mul(r.quantized, wv).unwrap();
    let l = tape.sum(p).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(h).unwrap(), &w);
    assert!(g.get(ctx.var(cb.tokens)).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn report_examples() {
    let r = codebook_report(&[2, 2, 0, 0]);
    assert!((r.perplexity - 2.0).abs() < 1e-12);
    assert_eq!(r.dead, 2);
    assert!((codebook_report(&[3; 8]).perplexity - 8.0).abs() < 1e-12);
    let one = codebook_report(&[0, 9, 0]);
    assert_eq!((one.perplexity, one.dead), (1.0, 2));
}

#[test]
fn usage_counts_every_quantized_row() {
    let (_, mut cb) = codebook(4, 2, 1);
    cb.record_usage(&[0, 1, 1, 3]);
    cb.record_usage(&[3]);
    assert_eq!(cb.usage(), &[1, 2, 0, 2]);
    cb.reset_usage();
    assert_eq!(cb.usage().iter().sum::<u64>(), 0);
}

mod props {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantized_rows_are_codebook_rows(seed in 0u64..1000, n in 1usize..20, c in 1usize..10) {
            let (store, cb) = codebook(c, 3, seed);
            let s = store.value(cb.tokens).clone();
            let (q, idx) = quantize_values(&store, &cb, &random(n, 3, seed + 1));
            for i in 0..n {
                prop_assert_eq!(q.row(i), s.row(idx[i]));
            }
        }

        #[test]
        fn alignment_loss_is_permutation_invariant(seed in 0u64..1000, n in 2usize..8) {
            let (a, b) = (random(n, 3, seed), random(n, 3, seed + 7));
            let mut rng = Seed(seed).stream("perm");
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let (pa, pb) = (a.select_rows(&perm), b.select_rows(&perm));
            prop_assert!((gk(&a, &b, 0.93) - gk(&pa, &pb, 0.93)).abs() < 1e-12);
        }

        #[test]
        fn vq_loss_nonnegative_and_zero_only_on_tokens(seed in 0u64..1000) {
            let s = random(4, 2, seed);
            let h = random(3, 2, seed + 1);
            prop_assert!(vq(&h, &s) > 0.0);
            prop_assert_eq!(vq(&s.select_rows(&[2, 0, 3]), &s), 0.0);
        }
    }
}
