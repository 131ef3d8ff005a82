use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qnet::blocks::BlockKind;
use qnet::data::{write_cifar_records, LabeledImage};
use qnet::model::{build, save_checkpoint, NetworkConfig};
use qnet::tensor::seeded_uniform;
use qnet_cli::commands::cmd_eval;
use qnet_cli::config::RunConfig;
use qnet_cli::pgm::{grid_shape, GrayImage, CONSTANT_CHANNEL_GRAY};

fn qnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnet")).args(args).output().expect("qnet runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Random images quantized to bytes, labels cycling through the ten classes.
fn random_images(n: usize, seed: u64) -> Vec<LabeledImage> {
    (0..n)
        .map(|i| {
            let px = seeded_uniform::<f32>(vec![3, 32, 32], 0.0, 1.0, seed * 100_000 + i as u64).unwrap();
            LabeledImage { pixels: px.map(|v| (v * 255.0).round() / 255.0), label: i % 10, coarse_label: None }
        })
        .collect()
}

/// A CIFAR-10 directory with `per_file` images in each training batch.
fn cifar10_dir(root: &Path, per_file: usize, test: usize) -> PathBuf {
    let dir = root.join("cifar");
    std::fs::create_dir_all(&dir).unwrap();
    for i in 1..=5 {
        let bytes = write_cifar_records(&random_images(per_file, i), 1).unwrap();
        std::fs::write(dir.join(format!("data_batch_{i}.bin")), bytes).unwrap();
    }
    std::fs::write(dir.join("test_batch.bin"), write_cifar_records(&random_images(test, 99), 1).unwrap()).unwrap();
    dir
}

fn write_config(root: &Path, name: &str, text: &str) -> PathBuf {
    let path = root.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn tiny_config(data: &Path) -> String {
    format!(
        "seed = 3\nmodel.depth = 8\ntrain.total_epochs = 2\ntrain.batch_size = 10\n\
         data.dir = {}\ndata.val_count = 0\ndata.test_limit = 20\n",
        data.display()
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bad_depth_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", "model.depth = 21\n");
    let out = qnet(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("depth ≡ 2 (mod 6)"), "{}", stderr(&out));
}

#[test]
fn unknown_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "typo.cfg", "train.weight_decy = 0.001\n");
    let out = qnet(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.weight_decy"), "{}", stderr(&out));
}

#[test]
fn train_eval_and_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = cifar10_dir(tmp.path(), 8, 20);
    let cfg = write_config(tmp.path(), "tiny.cfg", &tiny_config(&data));
    let run = tmp.path().join("run");
    let out = qnet(&["train", "--config", s(&cfg), "--threads", "1", "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let log = stdout(&out);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 2, "{log}");
    let history = std::fs::read_to_string(run.join("history.tsv")).unwrap();
    assert_eq!(history.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2, "{history}");

    // Every effective value is spelled out, defaults included.
    let resolved = std::fs::read_to_string(run.join("resolved.cfg")).unwrap();
    for key in
        ["train.weight_decay", "train.momentum", "train.milestones", "model.alpha", "model.batch_norm", "precision"]
    {
        assert!(resolved.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key} missing:\n{resolved}");
    }
    assert_eq!(RunConfig::parse(&resolved).unwrap(), RunConfig::load(&cfg).unwrap());

    // With no validation split the validation set is the test subset, so
    // evaluating the saved best checkpoint must reproduce its reported score.
    let best_line = log.lines().find(|l| l.starts_with("best epoch")).unwrap();
    let best_val = best_line.split_whitespace().nth(4).unwrap();
    let ckpt = run.join("best.ckpt");
    let eval = qnet(&["eval", "--checkpoint", s(&ckpt)]);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    assert_eq!(stdout(&eval).trim(), format!("accuracy: {best_val}"));
    let again = qnet(&["eval", "--checkpoint", s(&ckpt), "--config", s(&cfg)]);
    assert_eq!(stdout(&again), stdout(&eval));

    let wrong = write_config(
        tmp.path(),
        "wrong.cfg",
        &format!("model.depth = 8\nmodel.num_classes = 100\ndata.dir = {}\n", data.display()),
    );
    let err = qnet(&["eval", "--checkpoint", s(&ckpt), "--config", s(&wrong)]);
    assert_eq!(err.status.code(), Some(1));
    assert!(stderr(&err).contains("checkpoint has 10, config has 100"), "{}", stderr(&err));

    // Maps of a trained network: every channel is min-max stretched. At
    // depth 8 each block is its own stage, so widths double and sizes halve.
    let maps = tmp.path().join("maps");
    let test_file = data.join("test_batch.bin");
    let export =
        qnet(&["export-maps", "--checkpoint", s(&ckpt), "--image", s(&test_file), "--index", "3", "--out", s(&maps)]);
    assert_eq!(export.status.code(), Some(0), "{}", stderr(&export));
    for b in 0..3 {
        let img = GrayImage::parse_p5(&std::fs::read(maps.join(format!("block{b}.pgm"))).unwrap()).unwrap();
        let (channels, side) = (16 << b, 32 >> b);
        let (rows, cols) = grid_shape(channels);
        assert_eq!((img.width, img.height), (cols * (side + 1) - 1, rows * (side + 1) - 1));
        if b == 0 {
            assert_eq!((img.width, img.height), (131, 131));
        }
        for t in 0..channels {
            let (x0, y0) = ((t % cols) * (side + 1), (t / cols) * (side + 1));
            let tile: Vec<u8> =
                (0..side).flat_map(|y| (0..side).map(move |x| (x, y))).map(|(x, y)| img.get(x0 + x, y0 + y)).collect();
            let uniform = tile.iter().all(|&v| v == CONSTANT_CHANNEL_GRAY);
            assert!(uniform || (tile.contains(&0) && tile.contains(&255)), "block {b} tile {t}");
        }
    }
    let bad = qnet(&[
        "export-maps",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&test_file),
        "--blocks",
        "0,3",
        "--out",
        s(&maps),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("block index 3"), "{}", stderr(&bad));
}

#[test]
fn single_threaded_runs_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = cifar10_dir(tmp.path(), 8, 20);
    let cfg = write_config(tmp.path(), "tiny.cfg", &tiny_config(&data));
    let runs: Vec<(String, PathBuf)> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            let out = qnet(&["train", "--config", s(&cfg), "--seed", "11", "--threads", "1", "--out", s(&dir)]);
            assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
            (stdout(&out), dir)
        })
        .collect();
    assert_eq!(runs[0].0, runs[1].0);
    for file in ["history.tsv", "resolved.cfg", "final.ckpt", "best.ckpt"] {
        assert_eq!(
            std::fs::read(runs[0].1.join(file)).unwrap(),
            std::fs::read(runs[1].1.join(file)).unwrap(),
            "{file}"
        );
    }
    assert!(std::fs::read_to_string(runs[0].1.join("resolved.cfg")).unwrap().contains("seed = 11"));
}

fn save_with_meta(net: &qnet::model::Network<f32>, path: &Path, data: &Path) {
    let meta: Vec<(String, String)> = [
        ("norm.mean", "0.5 0.5 0.5"),
        ("norm.std", "0.25 0.25 0.25"),
        ("data.format", "cifar10"),
        ("data.dir", data.to_str().unwrap()),
        ("data.test_limit", "0"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    save_checkpoint(path, net, &meta).unwrap();
}

#[test]
fn random_weights_score_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = cifar10_dir(tmp.path(), 1, 1000);
    for seed in [0, 1] {
        let net = build::<f32>(&NetworkConfig { seed, ..NetworkConfig::new(BlockKind::Quotient, 20) }).unwrap();
        let ckpt = tmp.path().join(format!("random{seed}.ckpt"));
        save_with_meta(&net, &ckpt, &data);
        let mut log = Vec::new();
        let acc = cmd_eval(&ckpt, None, &mut log).unwrap();
        assert!((acc - 0.10).abs() <= 0.03, "seed {seed}: {acc}");
        assert_eq!(String::from_utf8(log).unwrap(), format!("accuracy: {:.2}\n", 100.0 * acc));
    }
}

#[test]
fn zero_init_maps_are_uniform_gray() {
    let tmp = tempfile::tempdir().unwrap();
    let data = cifar10_dir(tmp.path(), 1, 4);
    let mut net = build::<f32>(&NetworkConfig::new(BlockKind::Quotient, 20)).unwrap();
    net.zero_transforms();
    let ckpt = tmp.path().join("zero.ckpt");
    save_with_meta(&net, &ckpt, &data);

    let mut ppm = b"P6\n# test image\n32 32\n255\n".to_vec();
    ppm.extend((0..3072).map(|i| (i * 37 % 256) as u8));
    let image = tmp.path().join("img.ppm");
    std::fs::write(&image, ppm).unwrap();

    let maps = tmp.path().join("maps");
    let out = qnet(&["export-maps", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&maps)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for b in 0..3 {
        let bytes = std::fs::read(maps.join(format!("block{b}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n131 131\n255\n"));
        let img = GrayImage::parse_p5(&bytes).unwrap();
        for y in 0..131 {
            for x in 0..131 {
                let separator = x % 33 == 32 || y % 33 == 32;
                let want = if separator { 0 } else { CONSTANT_CHANNEL_GRAY };
                assert_eq!(img.get(x, y), want, "block {b} at ({x}, {y})");
            }
        }
    }
}

#[test]
fn gradcheck_reports_every_component() {
    let ok = qnet(&["gradcheck", "--instances", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let report = stdout(&ok);
    assert!(report.contains("quotient_block") && report.contains("residual_block"), "{report}");
    assert!(!report.contains("FAIL"));

    let bad = qnet(&["gradcheck", "--instances", "2", "--inject-fault", "conv2d"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("gradient check failed for conv2d"), "{}", stderr(&bad));
    assert!(stdout(&bad).lines().any(|l| l.starts_with("conv2d ") && l.contains("FAIL")), "{}", stdout(&bad));
}

#[test]
fn ablate_rejects_unknown_suites() {
    let out = qnet(&["ablate", "--suite", "table3"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    for name in ["table4", "table5", "table6", "table7", "table8"] {
        assert!(msg.contains(name), "{msg}");
    }
    let out = qnet(&["ablate", "--suite", "table4", "--scale", "huge"]);
    assert_eq!(out.status.code(), Some(1));
    let out = qnet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn placement_suite_has_six_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = cifar10_dir(tmp.path(), 4, 10);
    let cfg = write_config(tmp.path(), "a.cfg", &format!("train.batch_size = 10\ndata.dir = {}\n", data.display()));
    let out_dir = tmp.path().join("ab");
    let out = qnet(&["ablate", "--suite", "table8", "--config", s(&cfg), "--seeds", "5", "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let tsv = std::fs::read_to_string(out_dir.join("table8-smoke-5.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 6, "{tsv}");
    assert!(out_dir.join("table8-smoke-5.txt").exists());
    assert!(out_dir.join("table8-smoke-5.history.tsv").exists());
}
