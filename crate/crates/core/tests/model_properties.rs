//! Properties of the coverage layer, the full forward pass and the losses.

mod common;

use std::cell::Cell;

use covnat::autodiff::Graph;
use covnat::data::{Batch, Padded, SentencePair};
use covnat::losses::{objective, sca_loss};
use covnat::model::{check_coverage_invariants, coverage_vector, NatModel};
use covnat::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain loop version of `C[t, i] = min(Σ_{t' < t} A[t', i], 1)` for one `[T, S]` matrix.
pub fn coverage_oracle(a: &[f64], t: usize, s: usize) -> Vec<f64> {
    let mut c = vec![0.0; t * s];
    for i in 0..s {
        let mut acc = 0.0;
        for ti in 0..t {
            c[ti * s + i] = if acc < 1.0 { acc } else { 1.0 };
            acc += a[ti * s + i];
        }
    }
    c
}

fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.0..1.0f64).powi(3)).collect();
        let z: f64 = raw.iter().sum::<f64>().max(1e-12);
        out.extend(raw.iter().map(|v| v / z));
    }
    out
}

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, max: usize) -> Vec<usize> {
    let len = rng.gen_range(1..=max);
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize) -> Batch {
    let pairs: Vec<SentencePair> = (0..rows)
        .map(|_| SentencePair {
            source: random_sentence(rng, 12, 7),
            target: random_sentence(rng, 12, 9),
        })
        .collect();
    Batch::from_pairs(&pairs, (0..rows).collect()).unwrap()
}

fn set_lambda(model: &mut NatModel, value: f64) {
    let id = model.lambda_id().unwrap();
    model.params.get_mut(id).value.data_mut()[0] = value;
}

/// Coverage attention with an injected coverage matrix, using `H⁰` as the query states.
fn attention_probe(model: &NatModel, batch: &Batch, coverage: &Tensor) -> Tensor {
    let mut g = Graph::inference();
    let ps = &model.params;
    let enc = model.encode(&mut g, ps, &batch.src).unwrap();
    let width = batch.tgt.width;
    let (h0, _) = model.decode_hidden(&mut g, ps, &enc, &batch.tgt.mask, width).unwrap();
    let c = g.constant(coverage.clone());
    let a = model.coverage_attention(&mut g, ps, h0, c, &enc).unwrap();
    g.value(a).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coverage_vector_equals_loop_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, t, s) = (rng.gen_range(1..=3), rng.gen_range(1..=12), rng.gen_range(1..=6));
        let a = random_rows(&mut rng, b * t, s);
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[b, t, s], a.clone()).unwrap());
        let c = coverage_vector(&mut g, av).unwrap();
        let got = g.value(c).data();
        for bi in 0..b {
            let want = coverage_oracle(&a[bi * t * s..(bi + 1) * t * s], t, s);
            for (x, y) in got[bi * t * s..(bi + 1) * t * s].iter().zip(&want) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn recorded_iterations_satisfy_coverage_invariants(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = common::tiny_model(true, seed);
        set_lambda(&mut model, rng.gen_range(-3.0..3.0));
        let rows = rng.gen_range(1..=4);
        let batch = random_batch(&mut rng, rows);
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &model.params, &batch.src, &batch.tgt.lengths, 4, true).unwrap();
        let states = out.states.unwrap();
        prop_assert_eq!(states.len(), 4);
        for st in &states {
            prop_assert!(check_coverage_invariants(&st.attention, &st.coverage, &batch.src.mask, 1e-9).is_ok());
        }
    }

    #[test]
    fn fewer_iterations_prefix_match_longer_runs(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::tiny_model(true, seed);
        let batch = random_batch(&mut rng, 2);
        let run = |k| {
            let mut g = Graph::inference();
            model.forward(&mut g, &model.params, &batch.src, &batch.tgt.lengths, k, true).unwrap().states.unwrap()
        };
        let (short, long) = (run(3), run(5));
        prop_assert_eq!(&short[..], &long[..3]);
    }

    #[test]
    fn zero_lambda_ignores_coverage(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = common::tiny_model(true, seed);
        set_lambda(&mut model, 0.0);
        let batch = random_batch(&mut rng, 2);
        let shape = [2, batch.tgt.width, batch.src.width];
        let n: usize = shape.iter().product();
        let c1 = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let c2 = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let (a1, a2) = (attention_probe(&model, &batch, &c1), attention_probe(&model, &batch, &c2));
        prop_assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        // Full coverage removes the bias just as λ = 0 does.
        set_lambda(&mut model, 1.7);
        let full = attention_probe(&model, &batch, &Tensor::full(&shape, 1.0));
        prop_assert!(full.data().iter().zip(a1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn raising_coverage_lowers_attention(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = common::tiny_model(true, seed);
        set_lambda(&mut model, rng.gen_range(0.1..3.0));
        let batch = Batch::from_pairs(
            &[SentencePair { source: random_sentence(&mut rng, 12, 6), target: random_sentence(&mut rng, 12, 6) }],
            vec![0],
        ).unwrap();
        let (t, s) = (batch.tgt.width, batch.src.width);
        prop_assume!(s >= 2);
        let j = rng.gen_range(0..s);
        let base: Vec<f64> = (0..t * s).map(|_| rng.gen_range(0.0..0.5)).collect();
        let mut raised = base.clone();
        for ti in 0..t {
            raised[ti * s + j] += 0.4;
        }
        let a = attention_probe(&model, &batch, &Tensor::new(&[1, t, s], base).unwrap());
        let b = attention_probe(&model, &batch, &Tensor::new(&[1, t, s], raised).unwrap());
        for ti in 0..t {
            prop_assert!(b.data()[ti * s + j] < a.data()[ti * s + j]);
        }
    }

    #[test]
    fn sca_is_invariant_to_position_permutations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, n, t) = (9, 4, rng.gen_range(1..=6), rng.gen_range(1..=6));
        let table = Tensor::new(&[v, d], (0..v * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let ws = Tensor::new(&[d, d], (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let src: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
        let logits: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let eval = |src: &[usize], logits: &[f64]| {
            let mut g = Graph::inference();
            let (tv, wv) = (g.constant(table.clone()), g.constant(ws.clone()));
            let lv = g.constant(Tensor::new(&[1, t, v], logits.to_vec()).unwrap());
            let padded = Padded::new(&[src]).unwrap();
            let loss = sca_loss(&mut g, tv, wv, &padded, lv, &vec![1.0; t]).unwrap();
            g.value(loss).item()
        };
        let base = eval(&src, &logits);
        prop_assert!(base >= 0.0);
        let mut src_perm = src.clone();
        src_perm.reverse();
        let mut rows: Vec<&[f64]> = logits.chunks(v).collect();
        rows.rotate_left(t / 2);
        let logits_perm: Vec<f64> = rows.concat();
        prop_assert_eq!(eval(&src_perm, &logits_perm).to_bits(), base.to_bits());
    }

    #[test]
    fn objective_is_linear_in_loss_weights(seed in 0u64..10_000, alpha in 0.0f64..2.0, beta in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::tiny_model(true, seed);
        let batch = random_batch(&mut rng, 2);
        let clamped = Cell::new(0);
        let mut g = Graph::inference();
        let terms = objective(&mut g, &model, &model.params, &batch, alpha, Some(beta), 3, &clamped).unwrap();
        let (mle, len, sca, total) = terms.values(&g);
        let mut g0 = Graph::inference();
        let zero = objective(&mut g0, &model, &model.params, &batch, 0.0, Some(0.0), 3, &clamped).unwrap();
        let expected = zero.values(&g0).3 + alpha * len + beta * sca.unwrap();
        prop_assert!((total - expected).abs() <= 1e-12 * total.abs().max(1.0));
        prop_assert_eq!(zero.values(&g0).3, mle);
    }
}

#[test]
fn coverage_oracle_hand_case() {
    let a = [0.5, 0.5, 0.6, 0.4, 0.7, 0.3];
    let c = coverage_oracle(&a, 3, 2);
    let want = [0.0, 0.0, 0.5, 0.5, 1.0, 0.9];
    for (x, y) in c.iter().zip(want) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn lambda_receives_gradient_on_random_batches() {
    let mut zeros = 0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = common::tiny_model(true, seed);
        let batch = random_batch(&mut rng, 3);
        let mut g = Graph::new();
        let terms = objective(&mut g, &model, &model.params, &batch, 0.1, None, 3, &Cell::new(0)).unwrap();
        g.backward(terms.total).unwrap();
        g.accumulate_param_grads(&mut model.params);
        let id = model.lambda_id().unwrap();
        if model.params.get(id).grad[0] == 0.0 {
            zeros += 1;
        }
    }
    assert!(zeros <= 1, "{zeros} zero gradients");
}

#[test]
fn padded_encoder_states_get_no_gradient() {
    let model = common::tiny_model(true, 11);
    let batch = common::toy_batch();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &model.params, &batch.src, &batch.tgt.lengths, 3, false).unwrap();
    let loss = covnat::losses::mle_loss(&mut g, out.logits, &batch.tgt.ids, &batch.tgt.mask).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(out.encoder.states).unwrap();
    let d = model.config.d_model;
    let width = batch.src.width;
    let mut seen_nonzero = false;
    for (pos, &m) in batch.src.mask.iter().enumerate() {
        let row = &grad[pos * d..(pos + 1) * d];
        if m == 0.0 {
            assert!(row.iter().all(|&x| x == 0.0), "pad position {pos} of width {width}");
        } else {
            seen_nonzero |= row.iter().any(|&x| x != 0.0);
        }
    }
    assert!(seen_nonzero);
}

#[test]
fn identical_rows_and_repeated_runs_are_bit_identical() {
    let model = common::tiny_model(true, 5);
    let src = Padded::new(&[vec![4, 5, 6], vec![4, 5, 6]]).unwrap();
    let logits = || {
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &model.params, &src, &[4, 4], 3, false).unwrap();
        g.value(out.logits).clone()
    };
    let (a, b) = (logits(), logits());
    assert_eq!(a, b);
    let half = a.len() / 2;
    assert_eq!(a.data()[..half], a.data()[half..]);
}

#[test]
fn single_source_token_gets_all_attention() {
    let model = common::tiny_model(true, 2);
    let src = Padded::new(&[vec![7]]).unwrap();
    let mut g = Graph::inference();
    let enc = model.encode(&mut g, &model.params, &src).unwrap();
    let (_, a0) = model.decode_hidden(&mut g, &model.params, &enc, &[1.0; 6], 6).unwrap();
    assert_eq!(g.shape(a0), &[1, 6, 1]);
    assert!(g.value(a0).data().iter().all(|&x| x == 1.0));
}
