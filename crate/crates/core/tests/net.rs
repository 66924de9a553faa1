use ndarray::{array, Array2};
use rand::Rng;
use selftransfer::mmd::{mmd_weight, layer_mmd_sum, MkMmdConfig};
use selftransfer::net::{
    dantr_loss, forward_surrogate, load_checkpoint, save_checkpoint, Block, Checkpoint, CheckpointKind, DanTr,
    DanTrArch, DanTrParams, GradOptions, LayerSpec, SurrogateArch,
};
use selftransfer::{seed, Error};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar LSTM cell followed by a linear read-out, written out by hand.
/// `w = [wx_i, wx_f, wx_g, wx_o, wh_i, wh_f, wh_g, wh_o, b_i, b_f, b_g, b_o, v, c0]`.
fn scalar_recursion(w: &[f64; 14], xs: &[f64]) -> Vec<f64> {
    let (mut h, mut c) = (0.0, 0.0);
    let mut out = Vec::new();
    for &x in xs {
        let i = sig(w[0] * x + w[4] * h + w[8]);
        let f = sig(w[1] * x + w[5] * h + w[9]);
        let g = (w[2] * x + w[6] * h + w[10]).tanh();
        let o = sig(w[3] * x + w[7] * h + w[11]);
        c = f * c + i * g;
        h = o * c.tanh();
        out.push(w[12] * h + w[13]);
    }
    out
}

fn toy_block() -> Block {
    SurrogateArch {
        n_recurrent_layers: 1,
        n_dense_layers: 1,
        hidden_dim: 1,
    }
    .block()
    .unwrap()
}

const TOY: [f64; 14] = [0.5, -0.3, 0.8, 0.2, 0.1, 0.4, -0.6, 0.7, 0.05, 1.0, -0.1, 0.2, 1.5, -0.25];

#[test]
fn toy_cell_matches_hand_recursion() {
    let block = toy_block();
    assert_eq!(block.n_params(), 14);
    let xs = [0.3, -1.2, 0.7];
    let y = forward_surrogate(&block, &TOY, Array2::from_shape_vec((1, 3), xs.to_vec()).unwrap().view()).unwrap();
    for (a, b) in y.row(0).iter().zip(scalar_recursion(&TOY, &xs)) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn zero_network_outputs_zero() {
    let block = SurrogateArch {
        n_recurrent_layers: 2,
        n_dense_layers: 2,
        hidden_dim: 5,
    }
    .block()
    .unwrap();
    let p = vec![0.0; block.n_params()];
    let mut rng = seed::rng(1);
    let x = Array2::from_shape_fn((3, 20), |_| rng.random_range(-1.0..1.0));
    assert!(forward_surrogate(&block, &p, x.view()).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn output_shape_follows_batch() {
    let block = SurrogateArch {
        n_recurrent_layers: 1,
        n_dense_layers: 2,
        hidden_dim: 4,
    }
    .block()
    .unwrap();
    let p = block.init_seeded(3);
    let y = forward_surrogate(&block, &p, Array2::zeros((2, 100)).view()).unwrap();
    assert_eq!(y.dim(), (2, 100));
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let dt = DanTr::new(DanTrArch::default()).unwrap();
    let a = dt.init(0);
    assert_eq!(a, dt.init(0));
    assert_eq!(a.shared.len(), 4 * (1 + 128 + 1) * 128 + 4 * (128 + 128 + 1) * 128);
    let b = dt.init(1);
    let (mut differ, mut nonzero) = (0, 0);
    for i in 0..a.len() {
        if a.get(i) != 0.0 || b.get(i) != 0.0 {
            nonzero += 1;
            if a.get(i) != b.get(i) {
                differ += 1;
            }
        }
    }
    // biases are deterministic constants, compare the random entries only
    assert!(differ as f64 >= 0.99 * nonzero as f64 - (4 * 128 * 4 + 1000) as f64);
    let w_only: Vec<usize> = (0..4 * 129 * 128).collect();
    let differ_w = w_only.iter().filter(|&&i| a.shared[i] != b.shared[i]).count();
    assert!(differ_w as f64 >= 0.99 * w_only.len() as f64);
}

#[test]
fn predictions_are_causal() {
    let block = SurrogateArch {
        n_recurrent_layers: 2,
        n_dense_layers: 2,
        hidden_dim: 6,
    }
    .block()
    .unwrap();
    let p = block.init_seeded(9);
    let mut rng = seed::rng(2);
    let x = Array2::from_shape_fn((2, 30), |_| rng.random_range(-1.0..1.0));
    let full = forward_surrogate(&block, &p, x.view()).unwrap();
    for t0 in [0usize, 7, 29] {
        let mut cut = x.clone();
        cut.slice_mut(ndarray::s![.., t0 + 1..]).fill(0.0);
        let y = forward_surrogate(&block, &p, cut.view()).unwrap();
        for b in 0..2 {
            for t in 0..=t0 {
                assert!((y[[b, t]] - full[[b, t]]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn non_finite_inputs_are_reported() {
    let block = toy_block();
    let x = array![[0.0, f64::NAN, 1.0]];
    match forward_surrogate(&block, &TOY, x.view()) {
        Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

fn small_dantr(h: usize) -> DanTr {
    DanTr::new(DanTrArch {
        shared_recurrent_layers: 1,
        tailored_recurrent_layers: 1,
        tailored_dense_layers: 2,
        hidden_dim: h,
    })
    .unwrap()
}

fn rand_batch(rng: &mut impl Rng, b: usize, t: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, t), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn symmetric_configuration_cancels() {
    let net = small_dantr(4);
    let mut p = net.init(5);
    p.target = p.source.clone();
    let mut rng = seed::rng(4);
    let x = rand_batch(&mut rng, 3, 10);
    let cfg = MkMmdConfig {
        layer_range: (0, 2),
        ..MkMmdConfig::default()
    };
    let bundle = net.forward(&p, x.view(), x.view(), &cfg, true).unwrap();
    assert_eq!(bundle.y_hat_st.as_ref().unwrap(), &bundle.y_hat_t);
    assert_eq!(layer_mmd_sum(&bundle.hidden_adapt, &bundle.hidden_target, &cfg).unwrap(), 0.0);
}

#[test]
fn adaptation_branch_ignores_target_head() {
    let net = small_dantr(4);
    let p = net.init(6);
    let mut rng = seed::rng(5);
    let (xs, xt) = (rand_batch(&mut rng, 3, 8), rand_batch(&mut rng, 2, 8));
    let cfg = MkMmdConfig::default();
    let a = net.forward(&p, xs.view(), xt.view(), &cfg, true).unwrap();
    let mut garbage = p.clone();
    garbage.target.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).sin() * 37.0);
    let b = net.forward(&garbage, xs.view(), xt.view(), &cfg, true).unwrap();
    assert_eq!(a.y_hat_st, b.y_hat_st);
    assert_eq!(a.y_hat_s, b.y_hat_s);
    assert_ne!(a.y_hat_t, b.y_hat_t);
    let src = net.source_network(&p).unwrap();
    assert_eq!(&src.predict(xt.view()).unwrap(), a.y_hat_st.as_ref().unwrap());
}

#[test]
fn toy_branches_match_hand_recursions() {
    // shared: 1-unit LSTM; heads: 1-unit LSTM + linear read-out
    let net = DanTr::new(DanTrArch {
        shared_recurrent_layers: 1,
        tailored_recurrent_layers: 1,
        tailored_dense_layers: 1,
        hidden_dim: 1,
    })
    .unwrap();
    let shared: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.5).collect();
    let source: Vec<f64> = (0..14).map(|i| 0.3 * ((i as f64) * 1.3).sin()).collect();
    let target: Vec<f64> = (0..14).map(|i| 0.2 * ((i as f64) * 0.7).cos()).collect();
    let p = DanTrParams {
        shared: shared.clone(),
        source: source.clone(),
        target: target.clone(),
    };
    let xs = [0.4, -0.9, 0.2, 0.6];
    let xt = [-0.3, 0.8, 0.1, -0.5];
    // shared cell alone: read-out v = 1, c0 = 0 exposes h
    let mut sw = [0.0; 14];
    sw[..12].copy_from_slice(&shared);
    sw[12] = 1.0;
    let hs = scalar_recursion(&sw, &xs);
    let ht = scalar_recursion(&sw, &xt);
    let head = |w: &[f64], x: &[f64]| scalar_recursion(&w.try_into().unwrap(), x);
    let bundle = net
        .forward(
            &p,
            Array2::from_shape_vec((1, 4), xs.to_vec()).unwrap().view(),
            Array2::from_shape_vec((1, 4), xt.to_vec()).unwrap().view(),
            &MkMmdConfig {
                layer_range: (0, 1),
                ..MkMmdConfig::default()
            },
            true,
        )
        .unwrap();
    let close = |a: ndarray::ArrayView1<f64>, b: Vec<f64>| {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    };
    close(bundle.y_hat_s.row(0), head(&source, &hs));
    close(bundle.y_hat_t.row(0), head(&target, &ht));
    close(bundle.y_hat_st.as_ref().unwrap().row(0), head(&source, &ht));
}

#[test]
fn loss_examples() {
    let net = small_dantr(3);
    let mut p = net.init(1);
    p.target = p.source.clone();
    let mut rng = seed::rng(8);
    let x = rand_batch(&mut rng, 2, 6);
    let cfg = MkMmdConfig::default();
    let b = net.forward(&p, x.view(), x.view(), &cfg, true).unwrap();
    let perfect = dantr_loss(&b, b.y_hat_s.view(), b.y_hat_t.view(), 700, 1000, &cfg).unwrap();
    assert_eq!(perfect.total, 0.0);

    let xt = rand_batch(&mut rng, 2, 6);
    let b = net.forward(&net.init(2), x.view(), xt.view(), &cfg, true).unwrap();
    let ys = Array2::zeros((2, 6));
    let at_zero = dantr_loss(&b, ys.view(), ys.view(), 0, 1000, &cfg).unwrap();
    assert_eq!(at_zero.lambda, 0.0);
    assert_eq!(at_zero.total, at_zero.reg);
    assert!(at_zero.mmd > 0.0);
    let later = dantr_loss(&b, ys.view(), ys.view(), 500, 1000, &cfg).unwrap();
    assert_eq!(later.lambda, mmd_weight(500, 1000));
    assert_eq!(later.total, later.reg + later.lambda * later.mmd);
}

#[test]
fn scalar_regression_term_by_hand() {
    // zero heads emit exactly their output bias
    let net = DanTr::new(DanTrArch {
        shared_recurrent_layers: 1,
        tailored_recurrent_layers: 1,
        tailored_dense_layers: 1,
        hidden_dim: 1,
    })
    .unwrap();
    let mut p = DanTrParams {
        shared: vec![0.0; 12],
        source: vec![0.0; 14],
        target: vec![0.0; 14],
    };
    p.source[13] = 1.0;
    p.target[13] = 0.25;
    let x = array![[0.7]];
    let b = net.forward(&p, x.view(), x.view(), &MkMmdConfig::default(), false).unwrap();
    let l = dantr_loss(&b, array![[0.0]].view(), array![[0.25]].view(), 3, 10, &MkMmdConfig::default()).unwrap();
    assert_eq!(l.reg, 1.0);
}

#[test]
fn regression_gradient_ignores_adaptation_branch() {
    let net = small_dantr(5);
    let p = net.init(11);
    let mut rng = seed::rng(12);
    let (xs, xt) = (rand_batch(&mut rng, 4, 9), rand_batch(&mut rng, 3, 9));
    let (ys, yt) = (rand_batch(&mut rng, 4, 9), rand_batch(&mut rng, 3, 9));
    let cfg = MkMmdConfig::default();
    let with = net.forward(&p, xs.view(), xt.view(), &cfg, true).unwrap();
    let without = net.forward(&p, xs.view(), xt.view(), &cfg, false).unwrap();
    let opts = GradOptions::default();
    let (la, ga) = net.gradients(&p, &with, ys.view(), yt.view(), 0.0, &cfg, &opts).unwrap();
    let (lb, gb) = net.gradients(&p, &without, ys.view(), yt.view(), 0.0, &cfg, &opts).unwrap();
    assert_eq!(la.reg, lb.reg);
    for i in 0..ga.len() {
        assert_eq!(ga.get(i) - gb.get(i), 0.0, "entry {i}");
    }
}

#[test]
fn detached_adaptation_leaves_source_head_to_regression() {
    let net = small_dantr(4);
    let p = net.init(13);
    let mut rng = seed::rng(14);
    let (xs, xt) = (rand_batch(&mut rng, 3, 7), rand_batch(&mut rng, 3, 7));
    let (ys, yt) = (rand_batch(&mut rng, 3, 7), rand_batch(&mut rng, 3, 7));
    let cfg = MkMmdConfig::default();
    let b = net.forward(&p, xs.view(), xt.view(), &cfg, true).unwrap();
    let detached = GradOptions {
        detach_adaptation_mmd: true,
        ..GradOptions::default()
    };
    let (_, g_det) = net.gradients(&p, &b, ys.view(), yt.view(), 0.9, &cfg, &detached).unwrap();
    let (_, g_reg) = net.gradients(&p, &b, ys.view(), yt.view(), 0.0, &cfg, &GradOptions::default()).unwrap();
    assert_eq!(g_det.source, g_reg.source);
    assert_ne!(g_det.target, g_reg.target);
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    let net = DanTr::new(DanTrArch {
        shared_recurrent_layers: 1,
        tailored_recurrent_layers: 1,
        tailored_dense_layers: 2,
        hidden_dim: 8,
    })
    .unwrap();
    let p = net.init(21);
    let mut rng = seed::rng(22);
    let (xs, xt) = (rand_batch(&mut rng, 4, 12), rand_batch(&mut rng, 4, 12));
    let (ys, yt) = (rand_batch(&mut rng, 4, 12), rand_batch(&mut rng, 4, 12));
    let cfg = MkMmdConfig::default();
    let lambda = 0.8;
    let b = net.forward(&p, xs.view(), xt.view(), &cfg, true).unwrap();
    let first = net.gradients(&p, &b, ys.view(), yt.view(), lambda, &cfg, &GradOptions::default());
    let (parts, _) = first.unwrap();
    assert!(parts.mmd > 0.0);
    // freeze this batch's bandwidths so the loss is a smooth function of the parameters
    let sigmas: Vec<Vec<f64>> = cfg
        .layers()
        .map(|l| cfg.sigmas(b.hidden_adapt[l].view(), b.hidden_target[l].view()).unwrap())
        .collect();
    let opts = GradOptions {
        sigmas: Some(sigmas),
        ..GradOptions::default()
    };
    let (_, g) = net.gradients(&p, &b, ys.view(), yt.view(), lambda, &cfg, &opts).unwrap();
    let loss = |q: &DanTrParams| {
        let b = net.forward(q, xs.view(), xt.view(), &cfg, true).unwrap();
        net.gradients(q, &b, ys.view(), yt.view(), lambda, &cfg, &opts).unwrap().0.total
    };
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..80 {
        let i = rng.random_range(0..p.len());
        let (mut plus, mut minus) = (p.clone(), p.clone());
        *plus.get_mut(i) += eps;
        *minus.get_mut(i) -= eps;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        worst = worst.max(rel_err(g.get(i), numeric));
    }
    println!("worst relative error {worst:e}");
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn target_branch_equals_extracted_surrogate() {
    let net = small_dantr(4);
    let p = net.init(30);
    let mut rng = seed::rng(31);
    let (xs, xt) = (rand_batch(&mut rng, 2, 11), rand_batch(&mut rng, 5, 11));
    let b = net.forward(&p, xs.view(), xt.view(), &MkMmdConfig::default(), false).unwrap();
    let target = net.target_network(&p).unwrap();
    assert_eq!(target.predict(xt.view()).unwrap(), b.y_hat_t);
    let plain = Block::new(vec![
        LayerSpec::Lstm { input: 1, hidden: 4 },
        LayerSpec::Lstm { input: 4, hidden: 4 },
        LayerSpec::Dense { input: 4, output: 4, relu: true },
        LayerSpec::Dense { input: 4, output: 1, relu: false },
    ])
    .unwrap();
    assert_eq!(forward_surrogate(&plain, &target.params, xt.view()).unwrap(), b.y_hat_t);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let block = toy_block();
    let params: Vec<f64> = TOY.iter().map(|v| v / 3.0).collect();
    let ck = Checkpoint::new(CheckpointKind::Surrogate, block.fingerprint())
        .with_array("params", params.clone())
        .with_array("empty", vec![])
        .with_meta("step", 17u64);
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path, Some(&block.fingerprint())).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.meta::<u64>("step").unwrap(), 17);
    let net = back.network(&block, "params").unwrap();
    assert_eq!(net.params, params);

    let other = SurrogateArch::default().block().unwrap();
    assert!(matches!(
        load_checkpoint(&path, Some(&other.fingerprint())),
        Err(Error::Fingerprint { .. })
    ));
    assert!(matches!(back.network(&other, "params"), Err(Error::Fingerprint { .. })));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(Error::Malformed { .. })));
}

#[test]
fn fingerprints_parse_back_to_blocks() {
    for block in [toy_block(), SurrogateArch::default().block().unwrap(), small_dantr(5).shared_block().stack(small_dantr(5).head_block()).unwrap()] {
        assert_eq!(Block::from_fingerprint(&block.fingerprint()).unwrap(), block);
    }
    for bad in ["", "gru3x4", "lstm3", "dense2xrelu", "lstm1x4|dense5x1"] {
        assert!(Block::from_fingerprint(bad).is_err(), "{bad}");
    }
}

#[test]
fn transfer_checkpoint_restores_target_branch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tr.ckpt");
    let net = small_dantr(4);
    let params = net.init(9);
    save_checkpoint(&path, &Checkpoint::from_dantr(&net, &params)).unwrap();
    let back = load_checkpoint(&path, Some(&net.fingerprint())).unwrap();
    let (net2, params2) = back.dantr().unwrap();
    assert_eq!(params2, params);
    assert_eq!(net2.arch, net.arch);
    assert_eq!(back.surrogate().unwrap(), net.target_network(&params).unwrap());

    let block = toy_block();
    let ck = Checkpoint::from_network(&selftransfer::net::Network::new(block.clone(), TOY.to_vec()).unwrap());
    assert_eq!(ck.surrogate().unwrap().block, block);
}
