use std::fs;

use mnpair_core::nn::Checkpoint;
use mnpair_core::tensor::Tensor;
use mnpair_core::trainer::{
    extract_embeddings, generate_synthetic_dataset, load_dataset, random_erasing, render_synthetic, train,
    ErasingParams, SynthSpec, TrainConfig, CHECKPOINT_FILE, LOSS_FILE,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean colour, mean gradient magnitude and an 8-bin gradient orientation histogram.
fn handcrafted_features(img: &Tensor<f32>) -> Vec<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let d = img.data();
    let mut f = vec![0.0; 3];
    for px in d.chunks_exact(3) {
        for c in 0..3 {
            f[c] += px[c] as f64 / (h * w) as f64;
        }
    }
    let gray = |y: usize, x: usize| d[(y * w + x) * 3..][..3].iter().map(|&v| v as f64).sum::<f64>() / 3.0;
    let mut hist = [0.0; 8];
    let mut magnitude = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = gray(y, x + 1) - gray(y, x - 1);
            let gy = gray(y + 1, x) - gray(y - 1, x);
            let m = (gx * gx + gy * gy).sqrt();
            let angle = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            hist[((angle / std::f64::consts::PI * 8.0) as usize).min(7)] += m;
            magnitude += m;
        }
    }
    f.push(magnitude / ((h - 2) * (w - 2)) as f64);
    f.extend(hist.iter().map(|b| b / magnitude.max(1e-12)));
    f
}

#[test]
fn generator_classes_are_separable_by_simple_features() {
    let (classes, per_class, size) = (4, 200, 96);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in 0..per_class {
            feats.push(handcrafted_features(&render_synthetic(c, i, size, 0)));
            labels.push(c);
        }
    }
    let dim = feats[0].len();
    let n = feats.len() as f64;
    for k in 0..dim {
        let mean = feats.iter().map(|f| f[k]).sum::<f64>() / n;
        let sd = (feats.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        feats.iter_mut().for_each(|f| f[k] = (f[k] - mean) / sd);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = (0..feats.len())
        .filter(|&i| {
            let nn = (0..feats.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| dist(&feats[i], &feats[a]).total_cmp(&dist(&feats[i], &feats[b])))
                .unwrap();
            labels[nn] == labels[i]
        })
        .count();
    let accuracy = correct as f64 / feats.len() as f64;
    assert!(accuracy >= 0.95, "leave-one-out 1-NN accuracy {accuracy}");
}

#[test]
fn synthetic_dataset_count_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        classes: 4,
        per_class: 200,
        size: 16,
        seed: 3,
    };
    let dirs = generate_synthetic_dataset(&spec, &tmp.path().join("a")).unwrap();
    assert_eq!(dirs.len(), 4);
    for d in &dirs {
        assert_eq!(fs::read_dir(d).unwrap().count(), 200);
    }
    generate_synthetic_dataset(&spec, &tmp.path().join("b")).unwrap();
    for d in &dirs {
        let name = d.file_name().unwrap();
        for entry in fs::read_dir(d).unwrap() {
            let path = entry.unwrap().path();
            let twin = tmp.path().join("b").join(name).join(path.file_name().unwrap());
            assert_eq!(fs::read(&path).unwrap(), fs::read(twin).unwrap());
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_synthetic_dataset(&SynthSpec { classes: 4, per_class: 6, size: 32, seed: 1 }, &data).unwrap();
    let mut config = TrainConfig::default();
    for (k, v) in [("input_size", "32"), ("iterations", "3"), ("batch_size", "8"), ("seed", "2")] {
        config.set(k, v).unwrap();
    }
    let mut dataset = load_dataset(&data, 2).unwrap();
    dataset.image_size = 32;
    let images = dataset.load_all().unwrap();
    let out = tmp.path().join("train");
    fs::create_dir_all(&out).unwrap();
    let outcome = train(&dataset, &images, &config, Some(&out)).unwrap();
    assert_eq!(outcome.losses.len(), 3);
    assert!(out.join(LOSS_FILE).exists());

    let before = extract_embeddings(&outcome.checkpoint.network, &dataset, &images).unwrap();
    let loaded = Checkpoint::<f32>::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded, outcome.checkpoint);
    let after = extract_embeddings(&loaded.network, &dataset, &images).unwrap();
    assert_eq!(before, after);
    assert!(before.iter().all(|r| r.embedding.iter().all(|v| v.is_finite())));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn erasing_keeps_shape_and_range(
        seed in any::<u64>(),
        h in 4usize..48,
        w in 4usize..48,
        probability in 0.0f64..=1.0,
        lo in 0.01f64..0.3,
        span in 0.0f64..0.5,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Tensor::from_fn(&[h, w, 3], |i| ((i * 37) % 101) as f32 / 100.0);
        let params = ErasingParams { probability, area_fraction: (lo, lo + span), aspect_ratio: (0.3, 3.3) };
        let rect = random_erasing(&mut img, &params, &mut rng);
        prop_assert_eq!(img.shape(), &[h, w, 3]);
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if let Some((top, left, eh, ew)) = rect {
            prop_assert!(top + eh <= h && left + ew <= w && eh > 0 && ew > 0);
        }
    }
}
