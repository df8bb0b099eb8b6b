mod common;

use common::gradcheck::{all_ops, check, project, random_tensor};
use l2tlab::tensor::{Graph, Reduction, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let eye = Tensor::eye(2);
    let mut g = Graph::new();
    let a = g.leaf(&eye, false);
    let b = g.leaf(&eye, false);
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &eye);

    let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let y = t(&[2, 1], &[0.0, 1.0]);
    let xv = g.leaf(&x, false);
    let yv = g.leaf(&y, false);
    let z = g.matmul(xv, yv).unwrap();
    assert_eq!(g.value(z).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(&a, false), g.leaf(&b, false));
    assert!(matches!(g.matmul(av, bv), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn matmul_5x7_by_7x3_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let a = random_tensor(&mut rng, &[5, 7]);
    let b = random_tensor(&mut rng, &[7, 3]);
    let err = check(&[a, b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 1)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_examples() {
    let x = t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]);
    let mut g = Graph::new();
    let xv = g.leaf(&x, false);
    let y = g.softmax_rows(xv).unwrap();
    let y = g.value(y);
    for v in &y.data()[..3] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!((y.at(1, 0) - 1.0).abs() < 1e-12);
    assert!(y.at(1, 1).abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    // uniform logits over 7 tokens
    let logits = Tensor::zeros(&[1, 7]);
    let mut g = Graph::new();
    let l = g.leaf(&logits, false);
    let loss = g.cross_entropy_masked(l, &[3], &[true], Reduction::Sum).unwrap();
    assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    assert!((g.value(loss).item() - 1.945910).abs() < 1e-6);

    // 3 * e^-20 ~ 6.2e-9; with 7 tokens the residue would be 1.24e-8
    let mut confident = Tensor::zeros(&[1, 4]);
    confident.data_mut()[2] = 20.0;
    let c = g.leaf(&confident, false);
    let loss = g.cross_entropy_masked(c, &[2], &[true], Reduction::Sum).unwrap();
    assert!(g.value(loss).item() < 1e-8);

    assert_eq!(
        g.cross_entropy_masked(c, &[2], &[false], Reduction::Sum).unwrap_err(),
        TensorError::EmptyMask
    );
    assert!(matches!(
        g.cross_entropy_masked(c, &[9], &[true], Reduction::Sum),
        Err(TensorError::IndexOutOfVocab { id: 9, vocab: 4 })
    ));
}

/// Per-position scalar evaluation of -log softmax, independent of the graph.
fn brute_nll(row: &[f64], y: usize) -> f64 {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    -(row[y].exp() / z).ln()
}

#[test]
fn token_mean_is_sum_over_three() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random_tensor(&mut rng, &[5, 6]);
    let targets = [1, 4, 0, 5, 2];
    let mask = [true, false, true, true, false];
    let expected: f64 = [0, 2, 3].iter().map(|&i| brute_nll(logits.row(i), targets[i])).sum::<f64>() / 3.0;
    let mut g = Graph::new();
    let l = g.leaf(&logits, false);
    let mean = g.cross_entropy_masked(l, &targets, &mask, Reduction::TokenMean).unwrap();
    let sum = g.cross_entropy_masked(l, &targets, &mask, Reduction::Sum).unwrap();
    assert!((g.value(mean).item() - expected).abs() < 1e-12);
    assert!((g.value(sum).item() - 3.0 * expected).abs() < 1e-12);
}

#[test]
fn backward_trivial_cases() {
    let x = t(&[3], &[0.3, -1.0, 2.0]);
    let mut g = Graph::new();
    let xv = g.leaf(&x, true);
    let s = g.sum(xv).unwrap();
    assert_eq!(g.backward(s).unwrap().get(xv).data(), &[1.0, 1.0, 1.0]);

    let x = t(&[2], &[1.0, 2.0]);
    let mut g = Graph::new();
    let xv = g.leaf(&x, true);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(xv).data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_and_zeroes_unreached() {
    let x = t(&[2], &[1.0, 2.0]);
    let unused = t(&[3], &[1.0, 2.0, 3.0]);
    let mut g = Graph::new();
    let xv = g.leaf(&x, true);
    let uv = g.leaf(&unused, true);
    let doubled = g.scale(xv, 2.0).unwrap();
    assert!(matches!(g.backward(doubled), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum(doubled).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(uv).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn every_op_passes_gradcheck_over_twenty_seeds() {
    for seed in 0..20 {
        for (op, err) in all_ops(seed) {
            assert!(err < 1e-4, "seed {seed}: {op} rel err {err}");
        }
    }
}

#[test]
fn attention_weights_are_causal_and_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random_tensor(&mut rng, &[6, 8]);
    let k = random_tensor(&mut rng, &[6, 8]);
    let v = random_tensor(&mut rng, &[6, 8]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(&q, false), g.leaf(&k, false), g.leaf(&v, false));
    let out = g.causal_self_attention(qv, kv, vv, 2).unwrap();
    let w = g.attention_weights(out).unwrap();
    assert_eq!(w.shape(), &[2, 6, 6]);
    for row in w.data().chunks(6).enumerate() {
        let (r, vals) = row;
        let i = r % 6;
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(vals[i + 1..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn packed_attention_matches_separate_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = random_tensor(&mut rng, &[7, 8]);
    let k = random_tensor(&mut rng, &[7, 8]);
    let v = random_tensor(&mut rng, &[7, 8]);
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.leaf(&q, false), g.leaf(&k, false), g.leaf(&v, false));
    let packed = g.packed_causal_attention(qv, kv, vv, 2, &[3, 4]).unwrap();
    let mut expected = Vec::new();
    for (start, len) in [(0, 3), (3, 4)] {
        let qs = g.slice_rows(qv, start, len).unwrap();
        let ks = g.slice_rows(kv, start, len).unwrap();
        let vs = g.slice_rows(vv, start, len).unwrap();
        let o = g.causal_self_attention(qs, ks, vs, 2).unwrap();
        expected.extend_from_slice(g.value(o).data());
        assert_eq!(
            g.segment_attention_weights(packed, usize::from(start > 0)).unwrap(),
            g.attention_weights(o).unwrap()
        );
    }
    assert_eq!(g.value(packed).data(), &expected[..]);
    assert!(g.packed_causal_attention(qv, kv, vv, 2, &[3, 3]).is_err());
}

#[test]
fn non_finite_output_is_an_error() {
    let x = t(&[1, 2], &[f64::MAX, f64::MAX]);
    let mut g = Graph::new();
    let xv = g.leaf(&x, false);
    assert!(matches!(g.scale(xv, 10.0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let q = random_tensor(&mut rng, &[7, 8]);
        let w = random_tensor(&mut rng, &[8, 8]);
        let mut g = Graph::new();
        let (qv, wv) = (g.leaf(&q, true), g.leaf(&w, true));
        let p = g.matmul(qv, wv).unwrap();
        let a = g.causal_self_attention(p, p, p, 4).unwrap();
        let s = g.gelu(a).unwrap();
        let l = project(&mut g, s, 4);
        let grads = g.backward(l).unwrap();
        (grads.get(qv).into_data(), grads.get(wv).into_data())
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), spread in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[rows, cols]).map(|v| v * spread);
        let mut g = Graph::new();
        let xv = g.leaf(&x, false);
        let y = g.softmax_rows(xv).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_mask_sum_equals_per_token_brute_force(t in 1usize..8, v in 2usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random_tensor(&mut rng, &[t, v]).map(|x| 3.0 * x);
        let targets: Vec<usize> = (0..t).map(|i| (seed as usize + 7 * i) % v).collect();
        let expected: f64 = (0..t).map(|i| brute_nll(logits.row(i), targets[i])).sum();
        let mut g = Graph::new();
        let l = g.leaf(&logits, false);
        let loss = g.cross_entropy_masked(l, &targets, &vec![true; t], Reduction::Sum).unwrap();
        prop_assert!((g.value(loss).item() - expected).abs() < 1e-10);
    }
}

#[test]
fn whole_decoder_passes_gradcheck() {
    for seed in 0..3 {
        let err = common::gradcheck::full_model(seed);
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
    }
}
