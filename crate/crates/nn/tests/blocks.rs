use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strider_nn::blocks::*;
use strider_nn::gradcheck::{self, CheckOptions};
use strider_nn::{Ctx, Init, ParamId, ParamStore, Result, Tensor, Var};

const TOL: f64 = 1e-4;

fn random(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn add_input(store: &mut ParamStore, name: &str, shape: &[usize], seed: u64) -> ParamId {
    let n = shape.iter().product();
    store
        .insert(name, Tensor::new(shape, random(seed, n)).unwrap())
        .unwrap()
}

/// Scalar loss `sum(y * w)` with a fixed random `w`, so every output matters.
fn project<T: strider_nn::Scalar>(cx: &mut Ctx<T>, y: Var, seed: u64) -> Result<Var> {
    let n = cx.graph.value(y).len();
    let shape = cx.graph.shape(y).to_vec();
    let w = cx.graph.input_f32(&random(seed, n), &shape)?;
    let p = cx.graph.mul(y, w)?;
    Ok(cx.graph.sum(p))
}

fn assert_check(store: &ParamStore, loss: impl Fn(&mut Ctx<f64>) -> Result<Var>) {
    let s64 = store.cast::<f64>();
    let ids = gradcheck::all_ids(&s64);
    let report = gradcheck::check(&s64, &ids, &CheckOptions::default(), loss).unwrap();
    assert!(report.max_abs_numeric > 1e-6, "vacuous check: {:?}", report);
    assert!(report.passes(TOL), "gradient check failed: {:?}", report);
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut Builder::new(&mut store, 1), "mlp", &[5, 7, 3]).unwrap();
    // Nonzero biases exercise the bias path.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("bias") {
            let n = store.get(id).numel();
            store
                .get_mut(id)
                .data_mut()
                .copy_from_slice(&random(id.index() as u64 + 50, n));
        }
    }
    let x = add_input(&mut store, "x", &[4, 5], 2);
    assert_check(&store, |cx| {
        let xv = cx.p(x);
        let y = mlp.forward(cx, xv)?;
        project(cx, y, 3)
    });
}

#[test]
fn f32_gradients_track_the_f64_shadow() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut Builder::new(&mut store, 4), "mlp", &[6, 8, 2]).unwrap();
    let x = add_input(&mut store, "x", &[3, 6], 5);
    let loss = |cx: &mut Ctx<f32>| -> Result<Var> {
        let xv = cx.p(x);
        let y = mlp.forward(cx, xv)?;
        project(cx, y, 6)
    };
    let mut cx = Ctx::train(&store);
    let l = loss(&mut cx).unwrap();
    cx.graph.backward(l).unwrap();
    let g32: Vec<Vec<f32>> = store.ids().map(|id| cx.param_grad(id).unwrap()).collect();
    let s64 = store.cast::<f64>();
    let ids = gradcheck::all_ids(&s64);
    let g64 = gradcheck::analytic(&s64, &ids, &|cx: &mut Ctx<f64>| {
        let xv = cx.p(x);
        let y = mlp.forward(cx, xv)?;
        project(cx, y, 6)
    })
    .unwrap();
    for (a, b) in g32.iter().flatten().zip(g64.iter().flatten()) {
        assert!(
            gradcheck::rel_error(*a as f64, *b, 1e-3) < 1e-3,
            "{} vs {}",
            a,
            b
        );
    }
}

#[test]
fn mlp_zero_final_layer_outputs_bias() {
    let mut store = ParamStore::new();
    let mlp = Mlp::with_final_init(
        &mut Builder::new(&mut store, 1),
        "m",
        &[4, 8, 3],
        Init::Zeros,
    )
    .unwrap();
    let mut cx = Ctx::infer(&store);
    let x = cx.graph.input_f32(&random(1, 8), &[2, 4]).unwrap();
    let y = mlp.forward(&mut cx, x).unwrap();
    assert!(cx.graph.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn identity_linear_layer_is_identity() {
    let mut store = ParamStore::new();
    let lin = Linear::with_init(
        &mut Builder::new(&mut store, 1),
        "id",
        3,
        3,
        Init::Zeros,
        true,
    )
    .unwrap();
    let w = store.get_mut(lin.weight).data_mut();
    w[0] = 1.0;
    w[4] = 1.0;
    w[8] = 1.0;
    let mut cx = Ctx::infer(&store);
    let xs = random(9, 6);
    let x = cx.graph.input_f32(&xs, &[2, 3]).unwrap();
    let y = lin.forward(&mut cx, x).unwrap();
    assert_eq!(cx.graph.value(y), &xs[..]);
}

#[test]
fn mlp_rejects_wrong_width() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut Builder::new(&mut store, 1), "m", &[4, 3]).unwrap();
    let mut cx = Ctx::infer(&store);
    let x = cx.graph.input_f32(&[0.0; 5], &[1, 5]).unwrap();
    assert!(mlp.forward(&mut cx, x).is_err());
}

fn small_cnn(store: &mut ParamStore, seed: u64) -> Cnn {
    let cfg = CnnConfig {
        height: 8,
        width: 6,
        channels: 2,
        stages: vec![3, 4, 2],
        kernel: 3,
        embed: 5,
    };
    Cnn::new(&mut Builder::new(store, seed), "cnn", cfg).unwrap()
}

#[test]
fn cnn_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let cnn = small_cnn(&mut store, 11);
    let img = add_input(&mut store, "img", &[2, 8 * 6 * 2], 12);
    assert_check(&store, |cx| {
        let x = cx.p(img);
        let y = cnn.forward(cx, x)?;
        project(cx, y, 13)
    });
}

#[test]
fn cnn_zero_image_gives_zero_embedding() {
    let mut store = ParamStore::new();
    let cnn = small_cnn(&mut store, 1);
    let mut cx = Ctx::infer(&store);
    let x = cx.graph.input_f32(&vec![0.0; 96], &[1, 96]).unwrap();
    let y = cnn.forward(&mut cx, x).unwrap();
    assert!(cx.graph.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_is_not_translation_invariant() {
    let mut store = ParamStore::new();
    let cnn = small_cnn(&mut store, 2);
    let mut img = vec![0.0f32; 96];
    img[(2 * 6 + 2) * 2] = 1.0;
    let mut shifted = vec![0.0f32; 96];
    shifted[(2 * 6 + 3) * 2] = 1.0;
    let mut cx = Ctx::infer(&store);
    let a = cx.graph.input_f32(&img, &[1, 96]).unwrap();
    let b = cx.graph.input_f32(&shifted, &[1, 96]).unwrap();
    let ya = cnn.forward(&mut cx, a).unwrap();
    let yb = cnn.forward(&mut cx, b).unwrap();
    assert_ne!(cx.graph.value(ya), cx.graph.value(yb));
}

#[test]
fn cnn_rejects_wrong_image_size() {
    let mut store = ParamStore::new();
    let cnn = small_cnn(&mut store, 2);
    let mut cx = Ctx::infer(&store);
    let x = cx.graph.input_f32(&[0.0; 95], &[1, 95]).unwrap();
    assert!(cnn.forward(&mut cx, x).is_err());
}

#[test]
fn self_attention_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let block = SelfAttentionBlock::new(&mut Builder::new(&mut store, 21), "sa", 8, 2).unwrap();
    let tokens = add_input(&mut store, "tokens", &[2 * 3, 8], 22);
    assert_check(&store, |cx| {
        let t = cx.p(tokens);
        let y = block.forward(cx, t, 3)?;
        project(cx, y, 23)
    });
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    assert!(SelfAttentionBlock::new(&mut Builder::new(&mut store, 1), "sa", 6, 4).is_err());
}

#[test]
fn single_token_attention_weight_is_one() {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut Builder::new(&mut store, 1), "a", 8, 2).unwrap();
    let mut cx = Ctx::infer(&store);
    let t = cx.graph.input_f32(&random(3, 16), &[2, 8]).unwrap();
    let w = attn.weights(&mut cx, t, t, 1, 1).unwrap();
    assert!(cx.graph.value(w).iter().all(|&v| v == 1.0));
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let mut store = ParamStore::<f32>::new();
    let block = SelfAttentionBlock::new(&mut Builder::new(&mut store, 5), "sa", 8, 2).unwrap();
    let s64 = store.cast::<f64>();
    let rows = random(7, 3 * 8);
    let perm = [2usize, 0, 1];
    let permuted: Vec<f32> = perm
        .iter()
        .flat_map(|&r| rows[r * 8..(r + 1) * 8].to_vec())
        .collect();
    let mut cx = Ctx::infer(&s64);
    let a = cx.graph.input_f32(&rows, &[3, 8]).unwrap();
    let b = cx.graph.input_f32(&permuted, &[3, 8]).unwrap();
    let ya = block.forward(&mut cx, a, 3).unwrap();
    let yb = block.forward(&mut cx, b, 3).unwrap();
    let (va, vb) = (cx.graph.value(ya).to_vec(), cx.graph.value(yb).to_vec());
    for (i, &r) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((vb[i * 8 + c] - va[r * 8 + c]).abs() < 1e-12);
        }
    }
}

fn cross_block(store: &mut ParamStore, seed: u64) -> CrossAttentionBlock {
    CrossAttentionBlock::new(&mut Builder::new(store, seed), "ca", 8, 2).unwrap()
}

#[test]
fn cross_attention_gradient_matches_finite_differences() {
    for m in [1usize, 4] {
        let mut store = ParamStore::new();
        let block = cross_block(&mut store, 31);
        let q = add_input(&mut store, "q", &[2, 8], 32);
        let kv = add_input(&mut store, "kv", &[2 * m, 8], 33);
        assert_check(&store, |cx| {
            let (qv, kvv) = (cx.p(q), cx.p(kv));
            let y = block.forward(cx, qv, kvv, m)?;
            project(cx, y, 34)
        });
    }
}

#[test]
fn zeroed_value_projection_gives_normalised_visual_embedding() {
    let mut store = ParamStore::new();
    let block = cross_block(&mut store, 3);
    store.get_mut(block.attn.value.weight).data_mut().fill(0.0);
    let kv = random(40, 3 * 8);
    let mut outs = Vec::new();
    for seed in 0..5 {
        let mut cx = Ctx::infer(&store);
        let q = cx.graph.input_f32(&random(100 + seed, 8), &[1, 8]).unwrap();
        let k = cx.graph.input_f32(&kv, &[3, 8]).unwrap();
        let y = block.forward(&mut cx, q, k, 3).unwrap();
        outs.push(cx.graph.value(y).to_vec());
    }
    assert!(outs.windows(2).all(|w| w[0] == w[1]));

    let mut cx = Ctx::infer(&store);
    let k = cx.graph.input_f32(&kv, &[3, 8]).unwrap();
    let visual = mean_tokens(&mut cx, k, 3, 8).unwrap();
    let want = block.norm.forward(&mut cx, visual).unwrap();
    assert_eq!(cx.graph.value(want), &outs[0][..]);
}

#[test]
fn query_gradient_flows_only_through_attention_scores() {
    let mut store = ParamStore::new();
    let block = cross_block(&mut store, 8);
    let q = add_input(&mut store, "q", &[1, 8], 9);
    let kv = add_input(&mut store, "kv", &[3, 8], 10);
    let loss = |cx: &mut Ctx<f64>| -> Result<Var> {
        let (qv, kvv) = (cx.p(q), cx.p(kv));
        let y = block.forward(cx, qv, kvv, 3)?;
        project(cx, y, 11)
    };
    let opts = CheckOptions {
        per_tensor: None,
        ..Default::default()
    };

    let s64 = store.cast::<f64>();
    let live = gradcheck::check(&s64, &[q], &opts, loss).unwrap();
    assert!(live.passes(TOL));
    assert!(live.max_abs_numeric > 1e-4, "query must steer the output");

    // Residual-only configuration: nothing of q may reach the output.
    store.get_mut(block.attn.value.weight).data_mut().fill(0.0);
    store
        .get_mut(block.attn.value.bias.unwrap())
        .data_mut()
        .fill(0.0);
    let s64 = store.cast::<f64>();
    let analytic = gradcheck::analytic(&s64, &[q], &loss).unwrap();
    assert!(analytic[0].iter().all(|&g| g == 0.0));
    let mut work = s64.clone();
    for i in 0..8 {
        let n = gradcheck::numeric(&mut work, q, i, 1e-6, &loss).unwrap();
        assert_eq!(n, 0.0);
    }
}

#[test]
fn single_key_cross_attention_weight_is_one() {
    let mut store = ParamStore::new();
    let block = cross_block(&mut store, 4);
    let mut cx = Ctx::infer(&store);
    let q = cx.graph.input_f32(&random(1, 16), &[2, 8]).unwrap();
    let k = cx.graph.input_f32(&random(2, 16), &[2, 8]).unwrap();
    let w = block.attn.weights(&mut cx, q, k, 1, 1).unwrap();
    assert!(cx.graph.value(w).iter().all(|&v| v == 1.0));
}

#[test]
fn cross_attention_rejects_width_mismatch() {
    let mut store = ParamStore::new();
    let block = cross_block(&mut store, 4);
    let mut cx = Ctx::infer(&store);
    let q = cx.graph.input_f32(&random(1, 6), &[1, 6]).unwrap();
    let k = cx.graph.input_f32(&random(2, 8), &[1, 8]).unwrap();
    assert!(block.forward(&mut cx, q, k, 1).is_err());
}

#[test]
fn gru_three_step_unroll_gradient() {
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut Builder::new(&mut store, 41), "gru", 4, 5).unwrap();
    for id in [gru.b_input, gru.b_hidden] {
        store
            .get_mut(id)
            .data_mut()
            .copy_from_slice(&random(id.index() as u64, 15));
    }
    let h0 = add_input(&mut store, "h0", &[2, 5], 42);
    let xs: Vec<ParamId> = (0..3)
        .map(|t| add_input(&mut store, &format!("x{t}"), &[2, 4], 43 + t))
        .collect();
    assert_check(&store, |cx| {
        let mut h = cx.p(h0);
        for &x in &xs {
            let xv = cx.p(x);
            h = gru.forward(cx, h, xv)?;
        }
        project(cx, h, 50)
    });
}

#[test]
fn closed_update_gate_carries_state() {
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut Builder::new(&mut store, 1), "gru", 3, 4).unwrap();
    store.get_mut(gru.b_input).data_mut()[..4].fill(-50.0);
    let mut cx = Ctx::infer(&store);
    let hs = random(5, 4);
    let h = cx.graph.input_f32(&hs, &[1, 4]).unwrap();
    let x = cx.graph.input_f32(&random(6, 3), &[1, 3]).unwrap();
    let h2 = gru.forward(&mut cx, h, x).unwrap();
    for (a, b) in cx.graph.value(h2).iter().zip(&hs) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn zero_gru_stays_zero() {
    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut Builder::new(&mut store, 1), "gru", 3, 4).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut cx = Ctx::infer(&store);
    let h = cx.graph.input_f32(&[0.0; 4], &[1, 4]).unwrap();
    let x = cx.graph.input_f32(&[0.0; 3], &[1, 3]).unwrap();
    let h2 = gru.forward(&mut cx, h, x).unwrap();
    assert!(cx.graph.value(h2).iter().all(|&v| v == 0.0));
    let bad = cx.graph.input_f32(&[0.0; 2], &[1, 2]).unwrap();
    assert!(gru.forward(&mut cx, h, bad).is_err());
}

#[test]
fn gaussian_head_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let head = GaussianHead::new(&mut Builder::new(&mut store, 61), "vae", 6, 4).unwrap();
    let x = add_input(&mut store, "x", &[3, 6], 62);
    assert_check(&store, |cx| {
        let xv = cx.p(x);
        let s = head.forward(cx, xv, 63)?;
        let a = project(cx, s.z, 64)?;
        let b = project(cx, s.log_var, 65)?;
        cx.graph.add(a, b)
    });
}

#[test]
fn vanishing_variance_returns_mean() {
    let mut store = ParamStore::new();
    let head = GaussianHead::new(&mut Builder::new(&mut store, 1), "vae", 3, 2).unwrap();
    store.get_mut(head.log_var.weight).data_mut().fill(0.0);
    store
        .get_mut(head.log_var.bias.unwrap())
        .data_mut()
        .fill(-50.0);
    let mut cx = Ctx::infer(&store);
    let x = cx.graph.input_f32(&random(2, 3), &[1, 3]).unwrap();
    let s = head.forward(&mut cx, x, 9).unwrap();
    for (z, m) in cx.graph.value(s.z).iter().zip(cx.graph.value(s.mean)) {
        assert!((z - m).abs() < 1e-9);
    }
}

#[test]
fn gaussian_sampling_is_seeded() {
    let mut store = ParamStore::new();
    let head = GaussianHead::new(&mut Builder::new(&mut store, 1), "vae", 3, 2).unwrap();
    let sample = |seed| {
        let mut cx = Ctx::infer(&store);
        let x = cx.graph.input_f32(&[0.1, 0.2, 0.3], &[1, 3]).unwrap();
        let s = head.forward(&mut cx, x, seed).unwrap();
        cx.graph.value(s.z).to_vec()
    };
    assert_eq!(sample(5), sample(5));
    assert_ne!(sample(5), sample(6));
}

#[test]
fn gaussian_sample_mean_converges() {
    let mut store = ParamStore::new();
    let head = GaussianHead::new(&mut Builder::new(&mut store, 1), "vae", 1, 1).unwrap();
    store.get_mut(head.mean.weight).data_mut()[0] = 0.0;
    store.get_mut(head.mean.bias.unwrap()).data_mut()[0] = 0.7;
    store.get_mut(head.log_var.weight).data_mut()[0] = 0.0;
    store.get_mut(head.log_var.bias.unwrap()).data_mut()[0] = (0.5f32 * 0.5).ln();
    let n = 100_000;
    let mut cx = Ctx::infer(&store);
    let x = cx.graph.input_f32(&vec![0.0; n], &[n, 1]).unwrap();
    let s = head.forward(&mut cx, x, 17).unwrap();
    let mean = cx.graph.value(s.z).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    assert!(
        (mean - 0.7).abs() < 3.0 * 0.5 / (n as f64).sqrt(),
        "mean {}",
        mean
    );
}
