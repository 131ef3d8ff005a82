//! The subcommands, as library functions writing progress to `log`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use qnet::ablation::{self, render_table, AblationReport, Scale};
use qnet::autograd::suite::{verify_all, ComponentCheck, GRADCHECK_TOLERANCE};
use qnet::data::{
    apply_norm, compute_norm_stats, parse_cifar_records, split_train_val, DatasetFormat, LabeledImage, NormStats,
};
use qnet::model::{build, load_checkpoint, save_checkpoint, Network, NetworkConfig, CHECKPOINT_MAGIC};
use qnet::tensor::{Element, Tensor};
use qnet::train::{evaluate, history_tsv, train_loop, EpochRecord};

use crate::config::{Precision, RunConfig};
use crate::pgm::{parse_p6, tile_channels};

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 1).
    Validation(String),
    /// I/O, data or numerical failure (exit 2).
    Runtime(String),
    /// Training stopped by the divergence detector (exit 3).
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<qnet::Error> for CliError {
    fn from(e: qnet::Error) -> Self {
        use qnet::Error as E;
        match e {
            E::InvalidConfig { .. } | E::InvalidArgument(_) | E::InvalidShape(_) | E::ShapeMismatch { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub struct Datasets {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

/// Train/val/test sets per the `data.*` settings: the validation split is
/// drawn from the full training set, then the limits apply.
pub fn load_datasets(cfg: &RunConfig) -> CliResult<Datasets> {
    let d = &cfg.data;
    let mut test = d.format.load_test(&d.dir)?;
    if d.test_limit > 0 {
        test.truncate(d.test_limit);
    }
    let all = d.format.load_train(&d.dir)?;
    let (mut train, val) =
        if d.val_count > 0 { split_train_val(all, d.val_count, cfg.seed)? } else { (all, test.clone()) };
    if d.train_limit > 0 {
        train.truncate(d.train_limit);
    }
    Ok(Datasets { train, val, test })
}

fn norm_meta(norm: &NormStats) -> Vec<(String, String)> {
    let join = |v: &[f64; 3]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    vec![("norm.mean".into(), join(&norm.mean)), ("norm.std".into(), join(&norm.std))]
}

fn norm_from_meta(meta: &HashMap<String, String>) -> CliResult<NormStats> {
    let triple = |k: &str| -> CliResult<[f64; 3]> {
        let v = meta.get(k).ok_or_else(|| CliError::Runtime(format!("checkpoint lacks `{k}` metadata")))?;
        let xs: Vec<f64> = v
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| CliError::Runtime(format!("bad `{k}` metadata `{v}`"))))
            .collect::<CliResult<_>>()?;
        xs.try_into().map_err(|_| CliError::Runtime(format!("`{k}` needs three values")))
    };
    let stats = NormStats { mean: triple("norm.mean")?, std: triple("norm.std")? };
    stats.validate()?;
    Ok(stats)
}

/// Reads only the manifest's precision line.
pub fn checkpoint_precision(path: &Path) -> CliResult<Precision> {
    let mut r =
        BufReader::new(fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?);
    let mut magic = String::new();
    let mut line = String::new();
    r.read_line(&mut magic)?;
    r.read_line(&mut line)?;
    if magic.trim_end() != CHECKPOINT_MAGIC {
        return Err(CliError::Runtime(format!("{} is not a checkpoint", path.display())));
    }
    match line.trim_end() {
        "precision f32" => Ok(Precision::F32),
        "precision f64" => Ok(Precision::F64),
        other => Err(CliError::Runtime(format!("unsupported checkpoint `{other}`"))),
    }
}

fn pct(acc: f64) -> String {
    format!("{:.2}", 100.0 * acc)
}

/// Drops the binary noise of repeated decay (0.1 * 0.1 prints as 0.010000000000000002).
fn short_lr(lr: f64) -> f64 {
    format!("{lr:.12e}").parse().unwrap_or(lr)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub out_dir: PathBuf,
}

/// Trains per `cfg` and writes `resolved.cfg`, `history.tsv`, `final.ckpt`
/// and `best.ckpt` into `out_dir`. A divergence still writes the files of
/// the completed epochs, then reports [`CliError::Diverged`].
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path, log: &mut dyn Write) -> CliResult<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("resolved.cfg"), cfg.resolved_text())?;
    let data = load_datasets(cfg)?;
    writeln!(
        log,
        "training {} depth {} on {} images, validating on {}, testing on {}",
        cfg.model.kind,
        cfg.model.depth,
        data.train.len(),
        data.val.len(),
        data.test.len()
    )?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &data, out_dir, log),
        Precision::F64 => train_typed::<f64>(cfg, &data, out_dir, log),
    }
}

fn train_typed<T: Element>(
    cfg: &RunConfig,
    data: &Datasets,
    out_dir: &Path,
    log: &mut dyn Write,
) -> CliResult<TrainSummary> {
    let norm = compute_norm_stats(&data.train)?;
    let mut net: Network<T> = build(&cfg.model)?;
    let total = cfg.train.total_epochs;
    let outcome = train_loop(&mut net, &data.train, &data.val, &norm, &cfg.train, |r| {
        let _ = writeln!(
            log,
            "epoch {}/{total} lr {} loss {:.4} val {}",
            r.epoch + 1,
            short_lr(r.lr),
            r.train_loss,
            pct(r.val_acc)
        );
        let _ = log.flush();
    })?;
    fs::write(out_dir.join("history.tsv"), history_tsv(&outcome.history, &cfg.train))?;

    let mut meta = norm_meta(&norm);
    meta.push(("data.format".into(), cfg.data.format.to_string()));
    meta.push(("data.dir".into(), cfg.data.dir.display().to_string()));
    meta.push(("data.test_limit".into(), cfg.data.test_limit.to_string()));
    let with_epoch = |r: Option<&EpochRecord>| {
        let mut m = meta.clone();
        if let Some(r) = r {
            m.push(("epoch".into(), r.epoch.to_string()));
            m.push(("val_acc".into(), format!("{:?}", r.val_acc)));
        }
        m
    };
    save_checkpoint(&out_dir.join("final.ckpt"), &net, &with_epoch(outcome.history.last()))?;

    let mut test_acc = None;
    if let Some((record, best)) = &outcome.best {
        save_checkpoint(&out_dir.join("best.ckpt"), best, &with_epoch(Some(record)))?;
        let mut best = best.clone();
        let acc = evaluate(&mut best, &data.test, &norm, cfg.train.eval_batch_size)?;
        writeln!(log, "best epoch {} val {} test {}", record.epoch + 1, pct(record.val_acc), pct(acc))?;
        test_acc = Some(acc);
    }
    if let Some(d) = &outcome.divergence {
        return Err(CliError::Diverged(format!("epoch {} batch {}: {}", d.epoch + 1, d.batch, d.reason)));
    }
    Ok(TrainSummary {
        best_val_acc: outcome.best_val_acc(),
        history: outcome.history,
        test_acc,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Names the first architecture field on which two configs disagree.
fn config_mismatch(ckpt: &NetworkConfig, cfg: &NetworkConfig) -> Option<String> {
    let fields: [(&str, String, String); 10] = [
        ("model.kind", ckpt.kind.to_string(), cfg.kind.to_string()),
        ("model.depth", ckpt.depth.to_string(), cfg.depth.to_string()),
        ("model.base_channels", ckpt.base_channels.to_string(), cfg.base_channels.to_string()),
        ("model.num_classes", ckpt.num_classes.to_string(), cfg.num_classes.to_string()),
        ("model.alpha", ckpt.alpha.to_string(), cfg.alpha.to_string()),
        (
            "model.quotient_activation",
            format!("{:?}", ckpt.quotient_activation),
            format!("{:?}", cfg.quotient_activation),
        ),
        ("model.inner_activation", ckpt.inner_activation.to_string(), cfg.inner_activation.to_string()),
        (
            "model.head_uses_quotient_activation",
            ckpt.head_uses_quotient_activation.to_string(),
            cfg.head_uses_quotient_activation.to_string(),
        ),
        (
            "model.shortcuts_use_quotient_activation",
            ckpt.shortcuts_use_quotient_activation.to_string(),
            cfg.shortcuts_use_quotient_activation.to_string(),
        ),
        ("model.batch_norm", ckpt.batch_norm.to_string(), cfg.batch_norm.to_string()),
    ];
    fields.into_iter().find(|(_, a, b)| a != b).map(|(k, a, b)| format!("{k}: checkpoint has {a}, config has {b}"))
}

/// Single-view test accuracy of a checkpoint. Data settings come from
/// `cfg` when given (its model section must match the checkpoint),
/// otherwise from the checkpoint's metadata.
pub fn cmd_eval(checkpoint: &Path, cfg: Option<&RunConfig>, log: &mut dyn Write) -> CliResult<f64> {
    let acc = match checkpoint_precision(checkpoint)? {
        Precision::F32 => eval_typed::<f32>(checkpoint, cfg)?,
        Precision::F64 => eval_typed::<f64>(checkpoint, cfg)?,
    };
    writeln!(log, "accuracy: {}", pct(acc))?;
    Ok(acc)
}

fn eval_typed<T: Element>(checkpoint: &Path, cfg: Option<&RunConfig>) -> CliResult<f64> {
    let (mut net, meta) = load_checkpoint::<T>(checkpoint)?;
    let meta: HashMap<String, String> = meta.into_iter().collect();
    let norm = norm_from_meta(&meta)?;
    let (format, dir, limit) = match cfg {
        Some(c) => {
            if let Some(m) = config_mismatch(&net.config, &c.model) {
                return Err(CliError::Validation(m));
            }
            (c.data.format, c.data.dir.clone(), c.data.test_limit)
        }
        None => {
            let get = |k: &str| {
                meta.get(k).ok_or_else(|| CliError::Runtime(format!("checkpoint lacks `{k}`; pass --config")))
            };
            let format: DatasetFormat = get("data.format")?.parse()?;
            let limit = get("data.test_limit")?.parse().map_err(|_| CliError::Runtime("bad data.test_limit".into()))?;
            (format, PathBuf::from(get("data.dir")?), limit)
        }
    };
    if format.num_classes() != net.config.num_classes {
        return Err(CliError::Validation(format!(
            "model.num_classes: checkpoint has {}, dataset {format} has {}",
            net.config.num_classes,
            format.num_classes()
        )));
    }
    let mut test = format.load_test(&dir)?;
    if limit > 0 {
        test.truncate(limit);
    }
    Ok(evaluate(&mut net, &test, &norm, 250)?)
}

/// Runs a built-in suite and writes `<stem>.tsv`, `<stem>.history.tsv` and
/// `<stem>.txt` (the rendered table) into `out_dir`.
pub fn cmd_ablate(
    suite_name: &str,
    scale: Scale,
    seeds: &[u64],
    cfg: &RunConfig,
    out_dir: &Path,
    log: &mut dyn Write,
) -> CliResult<AblationReport> {
    let suite = ablation::suite(suite_name, scale)?;
    let train = cfg.data.format.load_train(&cfg.data.dir)?;
    let test = cfg.data.format.load_test(&cfg.data.dir)?;
    let (sub_train, _) = scale.subset(&train, &test);
    let norm = compute_norm_stats(sub_train)?;
    writeln!(log, "suite {} at {scale} scale: {} cases x {} seeds", suite.name, suite.cases.len(), seeds.len())?;
    let report = ablation::run_suite(&suite, &cfg.train, scale, &train, &test, &norm, seeds, |case, run| {
        let acc = run.final_acc().map_or_else(|| "-".to_string(), pct);
        let status = if run.diverged() { " (diverged)" } else { "" };
        let _ = writeln!(log, "  {} seed {}: {acc}{status}", case.name, run.seed);
        let _ = log.flush();
    })?;
    fs::create_dir_all(out_dir)?;
    let stem = report.file_stem();
    let table = render_table(&report);
    fs::write(out_dir.join(format!("{stem}.tsv")), report.to_tsv())?;
    fs::write(out_dir.join(format!("{stem}.history.tsv")), report.history_tsv())?;
    fs::write(out_dir.join(format!("{stem}.txt")), &table)?;
    write!(log, "{table}")?;
    Ok(report)
}

/// Prints one row per component; fails if any exceeds the tolerance.
pub fn cmd_gradcheck(instances: usize, fault: Option<&str>, log: &mut dyn Write) -> CliResult<Vec<ComponentCheck>> {
    let checks = verify_all(instances, fault)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    writeln!(
        log,
        "{:width$}  max rel error  status  ({instances} instances, tolerance {GRADCHECK_TOLERANCE:e})",
        "component"
    )?;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        writeln!(log, "{:width$}  {:>13.3e}  {status}", c.name, c.max_rel_error)?;
        if let Some(f) = &c.failure {
            writeln!(log, "{:width$}  {f}", "")?;
        }
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(checks)
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// The input image: a 32x32 P6 pixmap, or record `index` of a CIFAR-style
/// binary file in the checkpoint's dataset format.
fn load_image(path: &Path, index: usize, format: DatasetFormat) -> CliResult<LabeledImage> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(b"P6") {
        return Ok(LabeledImage { pixels: parse_p6(&bytes)?, label: 0, coarse_label: None });
    }
    let records = parse_cifar_records(&bytes, format.label_bytes(), format.num_classes())?;
    let n = records.len();
    records
        .into_iter()
        .nth(index)
        .ok_or_else(|| CliError::Validation(format!("image index {index} out of range ({n} records)")))
}

/// Writes `block<k>.pgm` per requested block: the tiled branch maps
/// (quotient or residual) of one image.
pub fn cmd_export_maps(
    checkpoint: &Path,
    image: &Path,
    index: usize,
    blocks: &[usize],
    out_dir: &Path,
    log: &mut dyn Write,
) -> CliResult<Vec<PathBuf>> {
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => export_typed::<f32>(checkpoint, image, index, blocks, out_dir, log),
        Precision::F64 => export_typed::<f64>(checkpoint, image, index, blocks, out_dir, log),
    }
}

fn export_typed<T: Element>(
    checkpoint: &Path,
    image: &Path,
    index: usize,
    blocks: &[usize],
    out_dir: &Path,
    log: &mut dyn Write,
) -> CliResult<Vec<PathBuf>> {
    let (mut net, meta) = load_checkpoint::<T>(checkpoint)?;
    let meta: HashMap<String, String> = meta.into_iter().collect();
    let n = net.num_blocks();
    if let Some(&b) = blocks.iter().find(|&&b| b >= n) {
        return Err(CliError::Validation(format!("block index {b} out of range (network has {n} blocks)")));
    }
    let norm = norm_from_meta(&meta)?;
    let format = meta.get("data.format").map_or(Ok(DatasetFormat::Cifar10), |f| f.parse())?;
    let img = apply_norm(&load_image(image, index, format)?, &norm);
    let x: Tensor<T> = img.pixels.cast::<T>().reshape(vec![1, 3, 32, 32])?;
    let maps = net.capture_intermediates(&x, blocks)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (&b, map) in blocks.iter().zip(maps) {
        let dims = map.dims().to_vec();
        let grid = tile_channels(&map.reshape(dims[1..].to_vec())?)?;
        let path = out_dir.join(format!("block{b}.pgm"));
        fs::write(&path, grid.to_p5())?;
        writeln!(log, "block {b}: {} channels -> {} ({}x{})", dims[1], path.display(), grid.width, grid.height)?;
        written.push(path);
    }
    Ok(written)
}
