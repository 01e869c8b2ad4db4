use cef::nn::{
    grad_check, grad_check_with, loss_softmax_xent, softmax, Checkpoint, GradCheckOptions, LayerSpec, Mode,
    Network, NetworkSpec, Tensor, MAGIC,
};
use cef::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(input: [usize; 3], layers: Vec<LayerSpec>) -> NetworkSpec {
    let mut layers = layers;
    layers.push(LayerSpec::Fc { out: 2 });
    layers.push(LayerSpec::SoftmaxLoss { classes: 2 });
    NetworkSpec {
        name: "probe".into(),
        input,
        layers,
    }
}

fn batch(n: usize, input: [usize; 3], seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * input.iter().product::<usize>();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| i % 2).collect();
    (Tensor::new(vec![n, input[0], input[1], input[2]], data).unwrap(), labels)
}

fn check(spec: NetworkSpec, n: usize, seed: u64) -> cef::nn::GradCheckReport {
    let input = spec.input;
    let net = Network::<f64>::new(spec, seed).unwrap();
    let (x, y) = batch(n, input, seed ^ 0x5eed);
    let opts = GradCheckOptions {
        samples_per_block: 40,
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(&net, &x, &y, &opts).unwrap()
}

#[test]
fn linear_net_matches_differences_exactly() {
    let r = check(spec([1, 3, 3], vec![]), 4, 1);
    assert!(r.checked > 0);
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn relu_net_passes() {
    let r = check(spec([2, 4, 4], vec![LayerSpec::Fc { out: 6 }, LayerSpec::Relu]), 4, 2);
    assert!(r.checked > 0);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn tiny_conv_fc_net_passes() {
    let r = check(spec([1, 8, 8], vec![LayerSpec::conv3x3(3)]), 3, 3);
    assert!(r.checked > 0);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn sign_flipped_backward_is_caught() {
    let s = spec([1, 4, 4], vec![LayerSpec::conv3x3(2)]);
    let mut net = Network::<f64>::new(s, 4).unwrap();
    let (x, y) = batch(3, [1, 4, 4], 4);
    let r = grad_check_with(&mut net, &x, &y, &GradCheckOptions::default(), |n| {
        for p in n.params_mut() {
            for g in p.grad.data_mut() {
                *g = -*g;
            }
        }
    })
    .unwrap();
    assert!((r.max_rel_error - 2.0).abs() < 1e-3, "{r:?}");
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let s = spec([1, 6, 6], vec![LayerSpec::conv3x3(2), LayerSpec::batchnorm(), LayerSpec::Relu]);
    let mut net = Network::<f32>::new(s, 5).unwrap();
    let x = batch(4, [1, 6, 6], 5).0.cast::<f32>();
    let logits = net.forward(&x, Mode::Train).unwrap();
    net.backward(&Tensor::zeros(logits.shape())).unwrap();
    for p in net.params() {
        assert!(p.grad.data().iter().all(|&g| g == 0.0), "{}", p.name);
    }
}

#[test]
fn gradients_are_finite_on_random_batch() {
    let s = spec(
        [1, 12, 12],
        vec![
            LayerSpec::FixedHpf,
            LayerSpec::conv3x3(4),
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
            LayerSpec::AvgPool { kernel: 5, stride: 2 },
            LayerSpec::Spp { scales: vec![2, 1] },
        ],
    );
    let mut net = Network::<f32>::new(s, 6).unwrap();
    let x = batch(4, [1, 12, 12], 6).0.cast::<f32>();
    let logits = net.forward(&x, Mode::Train).unwrap();
    let (_, d) = loss_softmax_xent(&logits, &[0, 1, 0, 1]).unwrap();
    net.backward(&d).unwrap();
    assert!(net.params().iter().all(|p| p.grad.all_finite()));
}

#[test]
fn forward_rejects_wrong_channels() {
    let mut net = Network::<f32>::new(spec([1, 4, 4], vec![]), 0).unwrap();
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    assert!(matches!(net.forward(&x, Mode::Infer), Err(Error::ShapeMismatch(_))));
}

fn sample_net(seed: u64) -> Network<f32> {
    let s = spec(
        [1, 8, 8],
        vec![LayerSpec::conv3x3(3), LayerSpec::batchnorm(), LayerSpec::Relu, LayerSpec::Spp { scales: vec![2, 1] }],
    );
    let mut net = Network::<f32>::new(s, seed).unwrap();
    // move the running statistics off their initial values
    let x = batch(4, [1, 8, 8], seed).0.cast::<f32>();
    net.forward(&x, Mode::Train).unwrap();
    net
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let bytes = Checkpoint::from_network(&sample_net(1), 3).to_bytes();
    for cut in [0, 2, 6, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::read_from(&bytes[..cut]) {
            Err(Error::BadMagic) | Err(Error::IoFailure(_)) => {}
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn version_bump_is_bad_magic() {
    let mut bytes = Checkpoint::from_network(&sample_net(1), 3).to_bytes();
    assert_eq!(&bytes[..4], MAGIC);
    bytes[3] = b'2';
    assert!(matches!(Checkpoint::read_from(&bytes[..]), Err(Error::BadMagic)));
}

#[test]
fn loading_into_other_spec_fails() {
    let ckpt = Checkpoint::from_network(&sample_net(1), 0);
    let mut other = Network::<f32>::new(spec([1, 8, 8], vec![]), 0).unwrap();
    assert!(matches!(ckpt.load_into(&mut other), Err(Error::SpecMismatch(_))));
}

#[test]
fn corrupted_block_table_is_rejected() {
    let ckpt = Checkpoint::from_network(&sample_net(1), 0);
    let mut bad = ckpt.clone();
    bad.blocks[0].1.pop();
    let bytes = bad.to_bytes();
    assert!(Checkpoint::read_from(&bytes[..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(seed in any::<u64>(), iteration in any::<u64>()) {
        let net = sample_net(seed);
        let ckpt = Checkpoint::from_network(&net, iteration);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        prop_assert_eq!(&back.spec, net.spec());
        prop_assert_eq!(back.iteration, iteration);
        prop_assert_eq!(back.to_bytes(), bytes);
        let rebuilt = back.build_network().unwrap();
        for ((na, va), (nb, vb)) in net.blocks().iter().zip(rebuilt.blocks()) {
            prop_assert_eq!(na, &nb);
            prop_assert!(va.iter().zip(&vb).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let n = vals.len() / 2;
        let t = Tensor::new(vec![n, 2], vals[..2 * n].to_vec()).unwrap();
        for row in softmax(&t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_backward_passes(c in 1usize..3, h in 3usize..7, w in 3usize..7, k in 1usize..4, out in 1usize..4, seed in 0u64..1000) {
        let pad = k / 2;
        let conv = LayerSpec::Conv { out_channels: out, kernel_h: k, kernel_w: k, stride: 1, pad_h: pad, pad_w: pad };
        let r = check(spec([c, h, w], vec![conv]), 3, seed);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn strided_conv_backward_passes(h in 5usize..9, w in 5usize..9, seed in 0u64..1000) {
        let conv = LayerSpec::Conv { out_channels: 2, kernel_h: 3, kernel_w: 2, stride: 2, pad_h: 1, pad_w: 0 };
        let r = check(spec([2, h, w], vec![conv]), 2, seed);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn hpf_backward_passes(h in 2usize..6, w in 2usize..7, seed in 0u64..1000) {
        let r = check(spec([1, h, w], vec![LayerSpec::FixedHpf]), 3, seed);
        prop_assert!(r.checked > 0);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn batchnorm_backward_passes(c in 1usize..4, h in 1usize..4, w in 1usize..4, n in 2usize..5, seed in 0u64..1000) {
        let layers = vec![LayerSpec::conv3x3(c), LayerSpec::batchnorm()];
        let r = check(spec([1, h + 1, w + 1], layers), n, seed);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn relu_backward_passes(c in 1usize..3, h in 2usize..5, w in 2usize..5, seed in 0u64..1000) {
        let r = check(spec([c, h, w], vec![LayerSpec::conv3x3(2), LayerSpec::Relu]), 3, seed);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn avgpool_backward_passes(h in 3usize..12, w in 3usize..12, k in 1usize..6, s in 1usize..3, seed in 0u64..1000) {
        prop_assume!(k <= h && k <= w);
        let r = check(spec([2, h, w], vec![LayerSpec::AvgPool { kernel: k, stride: s }]), 2, seed);
        prop_assert!(r.checked > 0);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn spp_backward_passes(h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
        let r = check(spec([2, h, w], vec![LayerSpec::conv3x3(2), LayerSpec::Spp { scales: vec![4, 2, 1] }]), 2, seed);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn fc_backward_passes(c in 1usize..3, h in 1usize..4, w in 1usize..4, out in 1usize..6, seed in 0u64..1000) {
        let r = check(spec([c, h, w], vec![LayerSpec::Fc { out }]), 3, seed);
        prop_assert!(r.checked > 0);
        prop_assert!(r.max_rel_error < 1e-4, "{:?}", r);
    }

    #[test]
    fn spp_length_ignores_spatial_size(h in 4usize..20, w in 4usize..20, c in 1usize..5) {
        let s = spec([c, h, w], vec![LayerSpec::Spp { scales: vec![4, 2, 1] }]);
        let shapes = s.validate().unwrap();
        prop_assert_eq!(shapes[0].iter().product::<usize>(), c * 21);
    }
}
