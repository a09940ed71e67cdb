use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparseset_nn::{
    adam_step, grad_check, mlp_forward, Activation, AdamConfig, AdamState, Checkpoint, Graph, Mlp, MlpConfig, Tensor,
};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_mlp(seed: u64) -> (Mlp, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(1..5);
    let hidden: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(2..9)).collect();
    let output_dim = rng.random_range(1..4);
    let mut mlp = Mlp::new(MlpConfig {
        input_dim,
        hidden_dims: hidden,
        output_dim,
        activation: Activation::Relu,
        init_seed: seed,
    })
    .unwrap();
    // non-zero biases so the check also covers them
    for l in mlp.layers_mut() {
        for b in l.bias.data_mut() {
            *b = rng.random_range(-0.3..0.3);
        }
    }
    let batch = rng.random_range(1..7);
    let x = random_matrix(&mut rng, batch, input_dim);
    let y = random_matrix(&mut rng, batch, output_dim);
    (mlp, x, y)
}

fn mse_loss(mlp: &Mlp, g: &mut Graph, params: &[sparseset_nn::Var], x: &Tensor, y: &Tensor) -> sparseset_nn::Var {
    let vars = sparseset_nn::MlpVars {
        weights: params.iter().step_by(2).copied().collect(),
        biases: params.iter().skip(1).step_by(2).copied().collect(),
    };
    let xv = g.constant(x.clone());
    let out = mlp.forward(g, &vars, xv).unwrap();
    let yv = g.constant(y.clone());
    let d = g.sub(out, yv).unwrap();
    let sq = g.square(d);
    g.mean(sq)
}

#[test]
fn mlp_gradients_match_central_differences_over_20_seeds() {
    for seed in 0..20 {
        let (mlp, x, y) = random_mlp(seed);
        let point: Vec<Tensor> = mlp.params().into_iter().cloned().collect();
        let r = grad_check(|g, p| Ok(mse_loss(&mlp, g, p, &x, &y)), &point, 1e-5).unwrap();
        assert!(r.checked > 0, "seed {seed}: every entry sat on a kink");
        assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn dead_relu_unit_gets_zero_incoming_gradient() {
    let (mut mlp, x, y) = random_mlp(3);
    // hidden unit 0 of the first layer: pre-activation < 0 for every input
    let cols = mlp.layers()[0].weight.cols();
    let rows = mlp.layers()[0].weight.rows();
    for r in 0..rows {
        mlp.layers_mut()[0].weight.data_mut()[r * cols] = 0.1;
    }
    mlp.layers_mut()[0].bias.data_mut()[0] = -10.0;
    let mut g = Graph::new();
    let params: Vec<_> = mlp.params().into_iter().map(|t| g.param(t.clone())).collect();
    let loss = mse_loss(&mlp, &mut g, &params, &x, &y);
    let grads = g.backward(loss).unwrap();
    let gw = grads.get(params[0]).unwrap();
    for r in 0..rows {
        assert_eq!(gw.get(r, 0), 0.0);
    }
    assert_eq!(grads.get(params[1]).unwrap().data()[0], 0.0);
}

#[test]
fn identical_seeds_give_bit_identical_weights_after_training() {
    let train = || {
        let (mut mlp, x, y) = random_mlp(11);
        let mut state = AdamState::new(mlp.params(), AdamConfig::default());
        for _ in 0..25 {
            let mut g = Graph::new();
            let params: Vec<_> = mlp.params().into_iter().map(|t| g.param(t.clone())).collect();
            let loss = mse_loss(&mlp, &mut g, &params, &x, &y);
            let grads = g.backward(loss).unwrap();
            let gs: Vec<Tensor> = params.iter().map(|p| grads.get(*p).unwrap().clone()).collect();
            let refs: Vec<&Tensor> = gs.iter().collect();
            adam_step(&mut mlp.params_mut(), &refs, &mut state).unwrap();
        }
        mlp
    };
    assert_eq!(train(), train());
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k) = a.dims2().unwrap();
    let m = b.cols();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a.get(i, l) * b.get(l, j)).sum();
        }
    }
    out
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n, k);
        let b = random_matrix(&mut rng, k, m);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn outputs_are_finite_on_finite_inputs(seed in any::<u64>()) {
        let (mlp, x, _) = random_mlp(seed);
        prop_assert!(mlp_forward(&mlp, &x).unwrap().is_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        let (mlp, _, _) = random_mlp(seed);
        let mut ck = Checkpoint::new(serde_json::json!({"seed": seed}));
        for (i, t) in mlp.params().into_iter().enumerate() {
            ck.insert(format!("p{i}"), t.clone());
        }
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        for (i, t) in mlp.params().into_iter().enumerate() {
            prop_assert_eq!(back.tensor(&format!("p{i}")).unwrap(), t);
        }
    }

    #[test]
    fn segment_sum_equals_per_block_sums(seed in any::<u64>(), blocks in prop::collection::vec(0usize..4, 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: usize = blocks.iter().sum();
        let x = random_matrix(&mut rng, rows, 3);
        let mut offsets = vec![0];
        for b in &blocks {
            offsets.push(offsets.last().unwrap() + b);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = g.segment_sum(xv, offsets.clone()).unwrap();
        let s = g.value(s);
        for (bi, w) in offsets.windows(2).enumerate() {
            for c in 0..3 {
                let want: f64 = (w[0]..w[1]).map(|r| x.get(r, c)).sum();
                prop_assert!((s.get(bi, c) - want).abs() <= 1e-12);
            }
        }
    }
}
