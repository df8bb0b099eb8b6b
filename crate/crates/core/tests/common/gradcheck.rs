//! Finite-difference harness shared by the op tests and the acceptance suite.

use l2tlab::tensor::{finite_diff_grad, max_relative_error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds the graph twice over: once for the analytic gradient, and once per
/// perturbed coordinate for central differences. Returns the max relative
/// error across every coordinate of every parameter.
pub fn check<F>(params: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p, true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get(*v).into_data()).collect();
    let numeric: Vec<f64> = finite_diff_grad(
        |ps| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ps.iter().map(|p| g.leaf(p, true)).collect();
            let l = build(&mut g, &vs);
            g.value(l).item()
        },
        params,
        EPS,
    )
    .into_iter()
    .flat_map(Tensor::into_data)
    .collect();
    max_relative_error(&analytic, &numeric)
}

/// Contracts a non-scalar op output against a fixed random tensor so that
/// every output coordinate carries a distinct weight.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.value(out).shape().to_vec();
    let r = random_tensor(&mut rng, &shape);
    let rv = g.leaf_owned(r, false);
    let prod = g.mul(out, rv).unwrap();
    g.sum(prod).unwrap()
}

/// Every differentiable op at a random shape drawn from `seed`; returns
/// `(op name, max relative error)` pairs.
pub fn all_ops(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(1..6);
    let k = rng.gen_range(1..7);
    let n = rng.gen_range(1..6);
    let heads = rng.gen_range(1..4);
    let dh = rng.gen_range(1..4);
    let t = rng.gen_range(1..7);
    let vocab = rng.gen_range(2..8);
    let mut out = Vec::new();

    let a = random_tensor(&mut rng, &[m, k]);
    let b = random_tensor(&mut rng, &[k, n]);
    out.push(("matmul", check(&[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, seed)
    })));

    let a2 = random_tensor(&mut rng, &[m, k]);
    out.push(("add", check(&[a.clone(), a2.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, seed)
    })));
    out.push(("mul", check(&[a.clone(), a2], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, seed)
    })));

    let bias = random_tensor(&mut rng, &[k]);
    out.push(("add_bias", check(&[a.clone(), bias], |g, v| {
        let y = g.add_bias(v[0], v[1]).unwrap();
        project(g, y, seed)
    })));

    out.push(("scale", check(std::slice::from_ref(&a), |g, v| {
        let y = g.scale(v[0], -1.7).unwrap();
        project(g, y, seed)
    })));

    out.push(("sum", check(std::slice::from_ref(&a), |g, v| g.sum(v[0]).unwrap())));

    out.push(("softmax_rows", check(std::slice::from_ref(&a), |g, v| {
        let y = g.softmax_rows(v[0]).unwrap();
        project(g, y, seed)
    })));

    let wide = random_tensor(&mut rng, &[m, k.max(2)]);
    let gamma_w = random_tensor(&mut rng, &[k.max(2)]);
    let beta_w = random_tensor(&mut rng, &[k.max(2)]);
    out.push(("layer_norm", check(&[wide, gamma_w, beta_w], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
        project(g, y, seed)
    })));

    let table = random_tensor(&mut rng, &[vocab, n]);
    let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(0..vocab)).collect();
    out.push(("embedding", check(&[table], |g, v| {
        let y = g.embedding(v[0], &ids).unwrap();
        project(g, y, seed)
    })));

    out.push(("gelu", check(std::slice::from_ref(&a), |g, v| {
        let y = g.gelu(v[0]).unwrap();
        project(g, y, seed)
    })));

    let d = heads * dh;
    let q = random_tensor(&mut rng, &[t, d]);
    let kk = random_tensor(&mut rng, &[t, d]);
    let vv = random_tensor(&mut rng, &[t, d]);
    out.push(("causal_self_attention", check(&[q.clone(), kk.clone(), vv.clone()], |g, v| {
        let y = g.causal_self_attention(v[0], v[1], v[2], heads).unwrap();
        project(g, y, seed)
    })));
    let cut = rng.gen_range(0..=t);
    let segments: Vec<usize> = [cut, t - cut].into_iter().filter(|&s| s > 0).collect();
    out.push(("packed_causal_attention", check(&[q, kk, vv], |g, v| {
        let y = g.packed_causal_attention(v[0], v[1], v[2], heads, &segments).unwrap();
        project(g, y, seed)
    })));

    let c = random_tensor(&mut rng, &[n, k]);
    out.push(("concat_rows", check(&[a.clone(), c], |g, v| {
        let y = g.concat_rows(&[v[0], v[1]]).unwrap();
        project(g, y, seed)
    })));

    let start = rng.gen_range(0..m);
    let len = rng.gen_range(1..=m - start);
    out.push(("slice_rows", check(&[a], |g, v| {
        let y = g.slice_rows(v[0], start, len).unwrap();
        project(g, y, seed)
    })));

    let logits = random_tensor(&mut rng, &[t, vocab]);
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..vocab)).collect();
    let mut mask: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.6)).collect();
    mask[0] = true;
    out.push(("cross_entropy_masked", check(&[logits], |g, v| {
        g.cross_entropy_masked(v[0], &targets, &mask, l2tlab::tensor::Reduction::TokenMean)
            .unwrap()
    })));
    out
}

/// Gradient check of the whole multimodal decoder: a packed batch of one
/// image sequence and one text-only sequence, weighted cross-entropy over
/// a random subset of targets, every trainable coordinate perturbed.
pub fn full_model(seed: u64) -> f64 {
    use l2tlab::model::{ConnectorKind, Input, MllmConfig, TinyMLLM, Visual};
    use l2tlab::tokenizer::IMAGE;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = rng.gen_range(1..3);
    let n_vis = rng.gen_range(1..4);
    let cfg = MllmConfig {
        d_model: 4 * heads,
        n_layers: rng.gen_range(1..3),
        n_heads: heads,
        d_ff: 8,
        vocab_size: 9,
        n_visual_tokens: n_vis,
        feature_dim: 7,
        d_enc: 3,
        max_seq_len: 12,
        connector: ConnectorKind::Mlp,
        seed,
    };
    let mut model = TinyMLLM::new(cfg).unwrap();
    for (_, p) in model.params_mut() {
        for x in p.value.data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    let feature: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut with_image = vec![0, 5];
    with_image.extend(std::iter::repeat_n(IMAGE, n_vis));
    with_image.extend((0..rng.gen_range(2..5)).map(|_| rng.gen_range(5..9)));
    let text: Vec<usize> = (0..rng.gen_range(2..6)).map(|_| rng.gen_range(4..9)).collect();
    let total = with_image.len() + text.len();
    let targets: Vec<usize> = (0..total).map(|_| rng.gen_range(0..9)).collect();
    let mut weights: Vec<f64> = (0..total)
        .map(|_| if rng.gen_bool(0.6) { rng.gen_range(0.1..1.0) } else { 0.0 })
        .collect();
    weights[total - 1] = 1.0;

    let loss_of = |m: &TinyMLLM, grads: bool| -> (f64, Vec<f64>) {
        let inputs = [
            Input {
                visual: Some(Visual::Feature(&feature)),
                ids: &with_image,
            },
            Input {
                visual: None,
                ids: &text,
            },
        ];
        let mut g = Graph::new();
        let built = m.build(&mut g, &inputs, grads).unwrap();
        let loss = g.cross_entropy_weighted(built.logits, &targets, &weights).unwrap();
        let value = g.value(loss).item();
        if !grads {
            return (value, Vec::new());
        }
        let gr = g.backward(loss).unwrap();
        let flat = m
            .params()
            .iter()
            .zip(&built.params)
            .filter(|(p, _)| m.is_trainable(p.group))
            .flat_map(|(_, v)| gr.get(*v).into_data())
            .collect();
        (value, flat)
    };

    let (_, analytic) = loss_of(&model, true);
    let mut numeric = Vec::with_capacity(analytic.len());
    let trainable: Vec<usize> = model.params_mut().map(|(i, _)| i).collect();
    for &pi in &trainable {
        let n = model.params()[pi].value.numel();
        for ci in 0..n {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let (_, p) = m.params_mut().find(|(i, _)| *i == pi).unwrap();
                p.value.data_mut()[ci] += delta;
                loss_of(&m, false).0
            };
            numeric.push((eval(EPS) - eval(-EPS)) / (2.0 * EPS));
        }
    }
    assert_eq!(analytic.len(), numeric.len());
    max_relative_error(&analytic, &numeric)
}
