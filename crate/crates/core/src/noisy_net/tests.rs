use super::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_shape() -> NetworkShape {
    NetworkShape { pos_in: 3, vel_in: 2, encoder_width: 4, trunk_width: 6, n_actions: 5 }
}

#[test]
fn scale_noise_examples() {
    assert_eq!(scale_noise(0.0), 0.0);
    assert_eq!(scale_noise(4.0), 2.0);
    assert_eq!(scale_noise(-9.0), -3.0);
}

#[test]
fn factorised_noise_draw_budget() {
    let mut a = rng(3);
    let noise = sample_factorised_noise(3, 2, &mut a);
    let mut b = rng(3);
    let draws: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut b)).collect();
    assert_eq!(noise.eps_in.to_vec(), draws[..3].iter().map(|&x| scale_noise(x)).collect::<Vec<_>>());
    assert_eq!(noise.eps_out.to_vec(), draws[3..].iter().map(|&x| scale_noise(x)).collect::<Vec<_>>());
    // both streams now sit at the same position
    assert_eq!(rand::Rng::random::<u64>(&mut a), rand::Rng::random::<u64>(&mut b));
}

#[test]
fn network_noise_draw_budget() {
    let shape = small_shape();
    let net = QNetworkParams::init(shape, NoisePlacement::ValueLayers, 0.5, &mut rng(0)).unwrap();
    let mut a = rng(9);
    let _ = net.sample_noise(&mut a);
    let budget = (8 + 6) + (6 + 5);
    let mut b = rng(9);
    for _ in 0..budget {
        let _: f64 = StandardNormal.sample(&mut b);
    }
    assert_eq!(rand::Rng::random::<u64>(&mut a), rand::Rng::random::<u64>(&mut b));
}

#[test]
fn weight_noise_is_outer_product() {
    let n = sample_factorised_noise(4, 3, &mut rng(1));
    let w = n.weight_noise();
    for j in 0..3 {
        for k in 0..4 {
            assert_eq!(w[[j, k]], n.eps_out[j] * n.eps_in[k]);
        }
    }
    assert_eq!(sample_factorised_noise(4, 3, &mut rng(1)), n);
}

#[test]
fn noisy_forward_examples() {
    let mut layer = NoisyLinearParams::zeros(1, 1, true);
    layer.mu_w[[0, 0]] = 1.0;
    layer.sigma.as_mut().unwrap().w[[0, 0]] = 0.5;
    let noise =
        NoiseSample { eps_in: Array1::from(vec![scale_noise(1.0)]), eps_out: Array1::from(vec![scale_noise(1.0)]) };
    let y = noisy_forward(&layer, Some(&noise), &[2.0]).unwrap();
    assert_eq!(y[0], 3.0);
    assert!(matches!(noisy_forward(&layer, Some(&noise), &[2.0, 1.0]), Err(Error::Contract(_))));
    let wrong = NoiseSample::zeros(2, 1);
    assert!(matches!(noisy_forward(&layer, Some(&wrong), &[2.0]), Err(Error::Contract(_))));
}

#[test]
fn single_layer_gradient_by_hand() {
    let mut layer = NoisyLinearParams::zeros(1, 1, true);
    layer.mu_w[[0, 0]] = 0.7;
    let shape = NetworkShape { pos_in: 1, vel_in: 1, encoder_width: 1, trunk_width: 1, n_actions: 1 };
    let mut net = QNetworkParams::zeros(shape, NoisePlacement::AllLayers);
    net.head = layer;
    let mut noise = NetworkNoise::none();
    noise.layers[3] = Some(NoiseSample { eps_in: Array1::from(vec![0.8]), eps_out: Array1::from(vec![-1.5]) });
    // head input h = relu(trunk(...)) = relu(mu_b) with a positive trunk bias
    net.trunk.mu_b[0] = 2.0;
    let g = net.q_backward(&noise, &[0.0, 0.0], &[1.0]).unwrap();
    assert_eq!(g.head.mu_w[[0, 0]], 2.0);
    assert_eq!(g.head.sigma.as_ref().unwrap().w[[0, 0]], 0.8 * -1.5 * 2.0);
    assert_eq!(g.head.mu_b[0], 1.0);
    assert_eq!(g.head.sigma.as_ref().unwrap().b[0], -1.5);
}

#[test]
fn zero_upstream_gradient_gives_zero() {
    let net = QNetworkParams::init(small_shape(), NoisePlacement::AllLayers, 0.5, &mut rng(2)).unwrap();
    let noise = net.sample_noise(&mut rng(3));
    let g = net.q_backward(&noise, &[0.1, -0.2, 0.3, 0.4, 0.5], &[0.0; 5]).unwrap();
    assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
}

#[test]
fn forward_examples() {
    let zero = QNetworkParams::zeros(NetworkShape::default(), NoisePlacement::ValueLayers);
    let x = vec![0.3; 25];
    let noise = zero.sample_noise(&mut rng(0));
    assert!(zero.q_forward(&noise, &x).unwrap().iter().all(|q| *q == 0.0));

    let mut net = QNetworkParams::init(NetworkShape::default(), NoisePlacement::ValueLayers, 0.5, &mut rng(4)).unwrap();
    let noise = net.sample_noise(&mut rng(5));
    assert_eq!(net.q_forward(&noise, &x).unwrap(), net.q_forward(&noise, &x).unwrap());

    net.head.sigma.as_mut().unwrap().w.fill(0.0);
    net.head.sigma.as_mut().unwrap().b.fill(0.0);
    net.head.mu_b.fill(0.0);
    let q1 = net.q_forward(&noise, &x).unwrap();
    net.head.mu_w *= 2.0;
    let q2 = net.q_forward(&noise, &x).unwrap();
    for (a, b) in q1.iter().zip(&q2) {
        assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    let mut bad = x.clone();
    bad[3] = f64::NAN;
    assert!(matches!(net.q_forward(&noise, &bad), Err(Error::Contract(_))));
}

#[test]
fn init_rule() {
    let shape = NetworkShape { pos_in: 4, vel_in: 4, encoder_width: 2, trunk_width: 4, n_actions: 5 };
    let net = QNetworkParams::init(shape, NoisePlacement::AllLayers, 0.6, &mut rng(1)).unwrap();
    let enc = &net.encoder_pos;
    assert!(enc.mu_w.iter().chain(enc.mu_b.iter()).all(|v| v.abs() <= 0.5));
    let sigma = enc.sigma.as_ref().unwrap();
    assert!(sigma.w.iter().chain(sigma.b.iter()).all(|v| *v == 0.3));
    assert_eq!(net, QNetworkParams::init(shape, NoisePlacement::AllLayers, 0.6, &mut rng(1)).unwrap());

    let plain = QNetworkParams::init(shape, NoisePlacement::ValueLayers, 0.5, &mut rng(1)).unwrap();
    assert!(!plain.encoder_pos.is_noisy() && plain.trunk.is_noisy() && plain.head.is_noisy());
    assert!(QNetworkParams::init(shape, NoisePlacement::None, -1.0, &mut rng(1)).is_err());
}

#[test]
fn zero_sigma_is_a_plain_network() {
    let shape = small_shape();
    let noisy = QNetworkParams::init(shape, NoisePlacement::AllLayers, 0.0, &mut rng(8)).unwrap();
    let x = [0.2, -0.4, 0.9, 0.1, -0.3];
    let noise = noisy.sample_noise(&mut rng(11));
    let a = noisy.q_forward(&noise, &x).unwrap();
    let b = noisy.q_forward(&NetworkNoise::none(), &x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip() {
    let net = QNetworkParams::init(NetworkShape::default(), NoisePlacement::ValueLayers, 0.5, &mut rng(6)).unwrap();
    let text = serde_json::to_string(&net.to_checkpoint()).unwrap();
    let back: Checkpoint = serde_json::from_str(&text).unwrap();
    let restored = QNetworkParams::from_checkpoint(&back, Some(NetworkShape::default())).unwrap();
    assert_eq!(restored, net);
}

#[test]
fn checkpoint_mismatch_names_layer() {
    let net = QNetworkParams::init(small_shape(), NoisePlacement::ValueLayers, 0.5, &mut rng(6)).unwrap();
    let err = QNetworkParams::from_checkpoint(&net.to_checkpoint(), Some(NetworkShape::default())).unwrap_err();
    match err {
        Error::Checkpoint { layer, .. } => assert_eq!(layer, "encoder_pos"),
        other => panic!("unexpected {other}"),
    }
    let mut ckpt = net.to_checkpoint();
    ckpt.layers[2].mu_b.pop();
    match QNetworkParams::from_checkpoint(&ckpt, None).unwrap_err() {
        Error::Checkpoint { layer, .. } => assert_eq!(layer, "trunk"),
        other => panic!("unexpected {other}"),
    }
    let mut ckpt = net.to_checkpoint();
    ckpt.format_version = 99;
    assert!(matches!(QNetworkParams::from_checkpoint(&ckpt, None), Err(Error::CheckpointFormat(_))));
}

/// Central-difference gradient of `dl_dq · Q(x)` with respect to every parameter,
/// using forward evaluations only.
fn finite_difference(net: &QNetworkParams, noise: &NetworkNoise, x: &[f64], dl_dq: &[f64], h: f64) -> Vec<Vec<f64>> {
    let loss =
        |n: &QNetworkParams| -> f64 { n.q_forward(noise, x).unwrap().iter().zip(dl_dq).map(|(q, g)| q * g).sum() };
    let sizes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (t, &len) in sizes.iter().enumerate() {
        let mut grads = vec![0.0; len];
        for (k, g) in grads.iter_mut().enumerate() {
            let mut plus = net.clone();
            plus.tensors_mut()[t][k] += h;
            let mut minus = net.clone();
            minus.tensors_mut()[t][k] -= h;
            *g = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        out.push(grads);
    }
    out
}

#[test]
fn backward_matches_finite_differences() {
    let mut r = rng(21);
    let shape = NetworkShape { pos_in: 6, vel_in: 4, encoder_width: 5, trunk_width: 8, n_actions: 5 };
    let net = QNetworkParams::init(shape, NoisePlacement::AllLayers, 0.5, &mut r).unwrap();
    let noise = net.sample_noise(&mut r);
    let x: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
    let dl_dq = [0.3, -1.2, 0.7, 0.05, -0.4];
    let analytic = net.q_backward(&noise, &x, &dl_dq).unwrap();
    let numeric = finite_difference(&net, &noise, &x, &dl_dq, 1e-5);
    for (a, n) in analytic.tensors().iter().zip(&numeric) {
        for (ga, gn) in a.iter().zip(n) {
            let scale = ga.abs().max(gn.abs());
            assert!(scale < 1e-8 || (ga - gn).abs() / scale <= 1e-4, "{ga} vs {gn}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_one_identity(seed in any::<u64>(), p in 1usize..6, q in 1usize..6) {
        let n = sample_factorised_noise(p, q, &mut rng(seed));
        let w = n.weight_noise();
        for j in 0..q {
            for k in 0..p {
                prop_assert_eq!(w[[j, k]], n.eps_out[j] * n.eps_in[k]);
                for j2 in 0..q {
                    for k2 in 0..p {
                        let (lhs, rhs) = (w[[j, k]] * w[[j2, k2]], w[[j, k2]] * w[[j2, k]]);
                        prop_assert!((lhs - rhs).abs() <= 8.0 * f64::EPSILON * lhs.abs());
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_json_preserves_bits(seed in any::<u64>()) {
        let net = QNetworkParams::init(small_shape(), NoisePlacement::AllLayers, 0.5, &mut rng(seed)).unwrap();
        let text = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = QNetworkParams::from_checkpoint(&serde_json::from_str(&text).unwrap(), None).unwrap();
        prop_assert_eq!(back, net);
    }
}
