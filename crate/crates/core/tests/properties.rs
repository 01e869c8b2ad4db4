use cef::dataset::{build_scenario, Representation, Scenario, ScenarioConfig, SourceSpec, Split};
use cef::enhance::count_gap_bins;
use cef::imagecore::{central_crop, histogram, synth_patch, Grayscale8};
use cef::jpegsim::jpeg_roundtrip;
use cef::models::{build_hcnn, build_pcnn, ModelKind};
use cef::nn::{Mode, Tensor, TrainConfig};
use cef::trainer::{evaluate, train, TrainOptions};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64, lo: u8, hi: u8) -> Grayscale8 {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grayscale8::new(w, h, (0..w * h).map(|_| rng.random_range(lo..=hi)).collect()).unwrap()
}

fn pixel_tensor(img: &Grayscale8) -> Tensor {
    let data = Representation::Pixel.features(img);
    Tensor::new(vec![1, 1, img.height(), img.width()], data).unwrap()
}

fn hist_tensor(img: &Grayscale8) -> Tensor {
    Tensor::new(vec![1, 1, 1, 256], Representation::Histogram.features(img)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn histogram_conserves_mass(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let img = random_image(w, h, seed, 0, 255);
        let hist = histogram(&img);
        prop_assert_eq!(hist.total(), (w * h) as u64);
        prop_assert_eq!(hist.counts().iter().sum::<u64>(), (w * h) as u64);
    }

    #[test]
    fn full_size_crop_is_identity(w in 1usize..40, h in 1usize..40, seed in any::<u64>()) {
        let img = random_image(w, h, seed, 0, 255);
        let once = central_crop(&img, w, h).unwrap();
        prop_assert_eq!(&once, &img);
        prop_assert_eq!(central_crop(&once, w, h).unwrap(), img);
    }

    #[test]
    fn gap_count_ignores_pixel_order(w in 2usize..30, h in 2usize..30, seed in any::<u64>()) {
        let img = random_image(w, h, seed, 20, 120);
        let mut px = img.pixels().to_vec();
        px.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let shuffled = Grayscale8::new(w, h, px).unwrap();
        prop_assert_eq!(count_gap_bins(&histogram(&img)), count_gap_bins(&histogram(&shuffled)));
    }

    #[test]
    fn jpeg_is_deterministic(seed in any::<u64>(), q in 1i64..=100) {
        let img = synth_patch(seed, 16, 16, 4.0).unwrap();
        prop_assert_eq!(jpeg_roundtrip(&img, q).unwrap(), jpeg_roundtrip(&img, q).unwrap());
    }
}

#[test]
fn second_jpeg_pass_changes_fewer_pixels() {
    let changed = |a: &Grayscale8, b: &Grayscale8| a.pixels().iter().zip(b.pixels()).filter(|(x, y)| x != y).count();
    for q in [30, 50, 70, 90] {
        let (mut first, mut second) = (0, 0);
        for seed in 0..40 {
            let img = synth_patch(seed, 64, 64, 4.0).unwrap();
            let once = jpeg_roundtrip(&img, q).unwrap();
            let twice = jpeg_roundtrip(&once, q).unwrap();
            first += changed(&img, &once);
            second += changed(&once, &twice);
        }
        assert!(second < first, "Q{q}: first {first}, second {second}");
    }
}

#[test]
fn pcnn_ignores_constant_offsets() {
    let mut net = build_pcnn(48, 40, 3).unwrap();
    for seed in 0..3 {
        let img = random_image(40, 48, seed, 40, 200);
        let lifted = img.map_pixels(|p| p + 30);
        let a = net.forward(&pixel_tensor(&img), Mode::Infer).unwrap();
        let b = net.forward(&pixel_tensor(&lifted), Mode::Infer).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}

#[test]
fn hcnn_ignores_tiling() {
    let mut net = build_hcnn(4).unwrap();
    let img = synth_patch(9, 32, 32, 4.0).unwrap();
    let tiled = Grayscale8::from_fn(64, 64, |x, y| img.get(x % 32, y % 32)).unwrap();
    let a = net.forward(&hist_tensor(&img), Mode::Infer).unwrap();
    let b = net.forward(&hist_tensor(&tiled), Mode::Infer).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn builders_repeat_bytes() {
    let a = build_pcnn(64, 64, 11).unwrap().blocks();
    let b = build_pcnn(64, 64, 11).unwrap().blocks();
    assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.iter().zip(&y.1).all(|(p, q)| p.to_bits() == q.to_bits())));
}

fn small_scenario(dir: &std::path::Path, seed: u64, count: usize, splits: (usize, usize, usize)) -> cef::dataset::DatasetManifest {
    let cfg = ScenarioConfig {
        scenario: Scenario::Plain,
        gammas: vec![0.6, 1.4],
        patch_size: 32,
        split_sizes: splits,
        seed,
        ..ScenarioConfig::default()
    };
    build_scenario(&SourceSpec::Synthetic { seed, count, size: 32 }, &cfg, dir).unwrap()
}

fn small_cfg(seed: u64, iters: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_iter: iters,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn hpf_kernel_survives_training() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_scenario(dir.path(), 2, 24, (16, 4, 4));
    let run = train(ModelKind::Pcnn, &m, dir.path(), &small_cfg(2, 10), &TrainOptions::default(), None).unwrap();
    assert!(run.last.blocks.iter().all(|(name, _)| !name.starts_with("layer0.")));
    let mut net = run.last.build_network().unwrap();
    assert!(net.params().iter().all(|p| !p.name.starts_with("layer0.")));
    let img = Grayscale8::from_fn(32, 32, |x, _| (x * 5) as u8).unwrap();
    let flat = Grayscale8::filled(32, 32, 90).unwrap();
    let a = net.forward(&pixel_tensor(&img), Mode::Infer).unwrap();
    let b = net.forward(&pixel_tensor(&img.map_pixels(|p| p + 10)), Mode::Infer).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-4));
    assert!(net.forward(&pixel_tensor(&flat), Mode::Infer).unwrap().all_finite());
}

#[test]
fn reports_repeat_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_scenario(dir.path(), 3, 30, (20, 5, 5));
    let run = train(ModelKind::Hcnn, &m, dir.path(), &small_cfg(3, 20), &TrainOptions::default(), None).unwrap();
    let a = evaluate(&run.last, &m, dir.path(), Split::Test).unwrap().to_csv();
    let b = evaluate(&run.last, &m, dir.path(), Split::Test).unwrap().to_csv();
    assert_eq!(a, b);
}

#[test]
fn train_split_scores_at_least_test_split() {
    let mut holds = 0;
    for seed in [1, 2, 3] {
        let dir = tempfile::tempdir().unwrap();
        let m = small_scenario(dir.path(), seed, 120, (60, 20, 40));
        let run = train(ModelKind::Hcnn, &m, dir.path(), &small_cfg(seed, 150), &TrainOptions::default(), None).unwrap();
        let tr = evaluate(&run.last, &m, dir.path(), Split::Train).unwrap().accuracy;
        let te = evaluate(&run.last, &m, dir.path(), Split::Test).unwrap().accuracy;
        holds += (tr >= te) as usize;
    }
    assert!(holds >= 2, "{holds}/3");
}
