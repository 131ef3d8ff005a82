use proptest::prelude::*;
use qnet::data::{
    apply_norm, assemble_batch, augment, augment_with, compute_norm_stats, load_cifar_binary, parse_cifar_records,
    split_train_val, write_cifar_records, AugmentParams, DatasetFormat, LabeledImage, NormStats, IMAGE_PIXELS,
};
use qnet::tensor::{seeded_uniform, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(pixels: Vec<f32>, label: usize) -> LabeledImage {
    LabeledImage { pixels: Tensor::from_vec(vec![3, 32, 32], pixels).unwrap(), label, coarse_label: None }
}

fn channel_fill(values: [f32; 3], label: usize) -> LabeledImage {
    image((0..IMAGE_PIXELS).map(|i| values[i / 1024]).collect(), label)
}

fn random_image(seed: u64, label: usize) -> LabeledImage {
    image(seeded_uniform::<f32>(vec![IMAGE_PIXELS], 0.0, 1.0, seed).unwrap().into_data(), label)
}

#[test]
fn files_load_by_record_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..7u8 {
        bytes.push(i);
        bytes.extend((0..3072).map(|k| (k as u8).wrapping_add(i)));
    }
    let path = dir.path().join("batch.bin");
    std::fs::write(&path, &bytes).unwrap();
    let imgs = load_cifar_binary(&path, 1, 10).unwrap();
    assert_eq!(imgs.len(), 7);
    assert_eq!(imgs[3].label, 3);
    assert_eq!(imgs[3].pixels.data()[1], 4.0 / 255.0);
    assert_eq!(write_cifar_records(&imgs, 1).unwrap(), bytes);

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(load_cifar_binary(&path, 1, 10).is_err());
    bytes[3073] = 10;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_cifar_binary(&path, 1, 10).unwrap_err().to_string();
    assert!(err.contains("3073"), "{err}");
}

#[test]
fn directory_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let record = |label: u8| {
        let mut r = vec![label];
        r.extend(std::iter::repeat_n(9u8, 3072));
        r
    };
    for i in 1..=5 {
        std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), [record(1), record(2)].concat()).unwrap();
    }
    std::fs::write(dir.path().join("test_batch.bin"), record(4)).unwrap();
    let f = DatasetFormat::Cifar10;
    assert_eq!(f.load_train(dir.path()).unwrap().len(), 10);
    assert_eq!(f.load_test(dir.path()).unwrap()[0].label, 4);

    let two = [vec![3u8, 77], vec![0u8; 3072]].concat();
    std::fs::write(dir.path().join("train.bin"), &two).unwrap();
    let imgs = DatasetFormat::Cifar100.load_train(dir.path()).unwrap();
    assert_eq!((imgs[0].label, imgs[0].coarse_label), (77, Some(3)));
    assert_eq!("svhn".parse::<DatasetFormat>().unwrap(), DatasetFormat::Svhn);
    assert!("mnist".parse::<DatasetFormat>().is_err());
}

#[test]
fn standard_split_sizes() {
    // Split only moves images around, so tiny stand-ins keep this cheap.
    let data: Vec<LabeledImage> = (0..50_000)
        .map(|i| LabeledImage { pixels: Tensor::scalar(i as f32), label: i % 10, coarse_label: None })
        .collect();
    let (train, val) = split_train_val(data.clone(), 5000, 1).unwrap();
    assert_eq!((train.len(), val.len()), (45_000, 5000));
    let (train2, val2) = split_train_val(data.clone(), 5000, 1).unwrap();
    assert_eq!((&train, &val), (&train2, &val2));
    let mut ids: Vec<u32> = train.iter().chain(&val).map(|im| im.pixels.data()[0] as u32).collect();
    ids.sort_unstable();
    assert_eq!(ids, (0..50_000).collect::<Vec<_>>());
    assert_ne!(split_train_val(data.clone(), 5000, 2).unwrap().1, val);
    assert!(split_train_val(data, 50_000, 1).is_err());
}

#[test]
fn crop_offsets() {
    let img = random_image(1, 3);
    assert_eq!(augment_with(&img, AugmentParams::IDENTITY), img);
    let mirror = augment_with(&img, AugmentParams { flip: true, dy: 4, dx: 4 });
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(mirror.pixels.data()[(c * 32 + y) * 32 + x], img.pixels.data()[(c * 32 + y) * 32 + 31 - x]);
            }
        }
    }
    let corner = augment_with(&img, AugmentParams { flip: false, dy: 0, dx: 0 });
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let v = corner.pixels.data()[(c * 32 + y) * 32 + x];
                if y < 4 || x < 4 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, img.pixels.data()[(c * 32 + y - 4) * 32 + x - 4]);
                }
            }
        }
    }
}

#[test]
fn augmentation_draws_cover_the_offsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws: Vec<AugmentParams> = (0..4000).map(|_| AugmentParams::sample(&mut rng)).collect();
    let flips = draws.iter().filter(|p| p.flip).count();
    assert!((1800..2200).contains(&flips), "{flips}");
    for o in 0..=8 {
        assert!(draws.iter().any(|p| p.dy == o) && draws.iter().any(|p| p.dx == o));
    }
    assert!(draws.iter().all(|p| p.dy <= 8 && p.dx <= 8));
}

#[test]
fn hand_computed_statistics() {
    let a = channel_fill([0.0, 0.2, 1.0], 0);
    let b = channel_fill([1.0, 0.6, 0.0], 1);
    let s = compute_norm_stats(&[a.clone(), b]).unwrap();
    let want = NormStats { mean: [0.5, 0.4, 0.5], std: [0.5, 0.2, 0.5] };
    for c in 0..3 {
        assert!((s.mean[c] - want.mean[c]).abs() < 1e-7);
        assert!((s.std[c] - want.std[c]).abs() < 1e-7);
    }
    let n = apply_norm(&a, &s);
    assert!((n.pixels.data()[0] + 1.0).abs() < 1e-6);
    assert!((n.pixels.data()[1024] + 1.0).abs() < 1e-5);
    assert!((n.pixels.data()[2048] - 1.0).abs() < 1e-6);

    assert!(compute_norm_stats(&[channel_fill([0.5; 3], 0), channel_fill([0.5; 3], 1)]).is_err());
    assert!(compute_norm_stats(&[]).is_err());
}

#[test]
fn normalized_training_set_is_standardized() {
    let train: Vec<LabeledImage> = (0..20).map(|i| random_image(100 + i, 0)).collect();
    let stats = compute_norm_stats(&train).unwrap();
    let normed: Vec<LabeledImage> = train.iter().map(|im| apply_norm(im, &stats)).collect();
    for c in 0..3 {
        let vals: Vec<f64> =
            normed.iter().flat_map(|im| im.pixels.data()[c * 1024..(c + 1) * 1024].iter().map(|&v| v as f64)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((std - 1.0).abs() < 1e-4, "{std}");
    }
}

#[test]
fn eval_batches_are_pure() {
    let imgs: Vec<LabeledImage> = (0..4).map(|i| random_image(i, i as usize)).collect();
    let items: Vec<(usize, &LabeledImage)> = imgs.iter().enumerate().collect();
    let stats = compute_norm_stats(&imgs).unwrap();
    let a = assemble_batch::<f32>(&items, &stats, None).unwrap();
    let b = assemble_batch::<f32>(&items, &stats, None).unwrap();
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, vec![0, 1, 2, 3]);
    let e0 = assemble_batch::<f32>(&items, &stats, Some((7, 0))).unwrap();
    assert_eq!(e0.images, assemble_batch::<f32>(&items, &stats, Some((7, 0))).unwrap().images);
    assert_ne!(e0.images, assemble_batch::<f32>(&items, &stats, Some((7, 1))).unwrap().images);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_keeps_label_and_range(seed: u64, label in 0usize..10) {
        let img = random_image(seed, label);
        let out = augment(&img, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out.label, label);
        prop_assert_eq!(out.pixels.dims(), &[3, 32, 32][..]);
        prop_assert!(out.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn records_round_trip(labels in prop::collection::vec(0u8..10, 1..4), fill: u8) {
        let mut bytes = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            bytes.push(l);
            bytes.extend((0..3072).map(|k| (k as u8) ^ fill ^ i as u8));
        }
        let imgs = parse_cifar_records(&bytes, 1, 10).unwrap();
        prop_assert_eq!(write_cifar_records(&imgs, 1).unwrap(), bytes);
    }

    #[test]
    fn two_label_records_round_trip(coarse in 0u8..20, fine in 0u8..100, fill: u8) {
        let mut bytes = vec![coarse, fine];
        bytes.extend((0..3072).map(|k| (k as u8).wrapping_mul(fill)));
        let imgs = parse_cifar_records(&bytes, 2, 100).unwrap();
        prop_assert_eq!(imgs[0].label, fine as usize);
        prop_assert_eq!(write_cifar_records(&imgs, 2).unwrap(), bytes);
    }
}
