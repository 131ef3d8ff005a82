//! Run configuration: flat `key = value` lines with dotted section prefixes.
//!
//! ```text
//! # comment
//! seed = 1
//! model.kind = quotient
//! model.depth = 20
//! train.total_epochs = 10
//! data.dir = /data/cifar-10-batches-bin
//! ```
//!
//! Unknown and repeated keys are rejected. Keys that accept `auto` resolve
//! it from other settings; [`RunConfig::resolved_text`] prints every
//! effective value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use qnet::blocks::BlockKind;
use qnet::data::DatasetFormat;
use qnet::layers::ActivationSpec;
use qnet::model::{default_alpha, NetworkConfig};
use qnet::train::TrainConfig;
use qnet::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub format: DatasetFormat,
    pub dir: PathBuf,
    /// Keep only the first N training images after the validation split; 0 keeps all.
    pub train_limit: usize,
    /// Keep only the first N test images; 0 keeps all.
    pub test_limit: usize,
    /// Images held out of the training set for validation. With 0 the
    /// (limited) test set doubles as the validation set.
    pub val_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

const KEYS: &[&str] = &[
    "seed",
    "precision",
    "model.kind",
    "model.depth",
    "model.base_channels",
    "model.num_classes",
    "model.alpha",
    "model.quotient_activation",
    "model.inner_activation",
    "model.head_uses_quotient_activation",
    "model.shortcuts_use_quotient_activation",
    "model.batch_norm",
    "train.lr0",
    "train.momentum",
    "train.batch_size",
    "train.milestones",
    "train.gamma",
    "train.total_epochs",
    "train.weight_decay",
    "train.augment",
    "train.divergence_threshold",
    "train.eval_batch_size",
    "data.format",
    "data.dir",
    "data.train_limit",
    "data.test_limit",
    "data.val_count",
];

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig { key: key.into(), message: message.into() }
}

/// `relu`, `quotient <alpha>`, `sigmoid <scale> <hshift> <vshift>` or
/// `clipped <shift> <lower> <upper>`.
pub fn parse_activation(s: &str) -> Result<ActivationSpec> {
    let mut parts = s.split_whitespace();
    if parts.next() == Some("quotient") {
        let rest: Vec<&str> = parts.collect();
        let [alpha] = rest.as_slice() else {
            return Err(Error::InvalidArgument(format!("`quotient` takes one value, got `{s}`")));
        };
        let alpha = alpha.parse().map_err(|_| Error::InvalidArgument(format!("bad alpha in `{s}`")))?;
        return ActivationSpec::quotient(alpha);
    }
    let spec = ActivationSpec::decode(s)?;
    spec.validate()?;
    Ok(spec)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| invalid(key, format!("cannot parse `{v}`")))
}

/// Splits text into key/value pairs, rejecting malformed lines and repeats.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("config line {}: expected `key = value`, got `{raw}`", n + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(invalid(k, "unknown key"));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(invalid(k, "given more than once"));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Defaults everywhere; equivalent to an empty file.
    pub fn defaults() -> Self {
        Self::from_pairs(&BTreeMap::new()).expect("defaults are valid")
    }

    fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str);
        let auto = |k: &str| get(k).is_none_or(|v| v == "auto");

        let seed: u64 = get("seed").map_or(Ok(0), |v| parse_num("seed", v))?;
        let precision = match get("precision").unwrap_or("f32") {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            v => return Err(invalid("precision", format!("expected f32 or f64, got `{v}`"))),
        };

        let format: DatasetFormat = match get("data.format") {
            Some(v) => v.parse().map_err(|e: Error| invalid("data.format", e.to_string()))?,
            None => DatasetFormat::Cifar10,
        };
        let data = DataConfig {
            format,
            dir: PathBuf::from(get("data.dir").unwrap_or("data")),
            train_limit: get("data.train_limit").map_or(Ok(0), |v| parse_num("data.train_limit", v))?,
            test_limit: get("data.test_limit").map_or(Ok(0), |v| parse_num("data.test_limit", v))?,
            val_count: if auto("data.val_count") {
                // Held-out counts of the reference protocol.
                match format {
                    DatasetFormat::Svhn => 6000,
                    _ => 5000,
                }
            } else {
                parse_num("data.val_count", get("data.val_count").unwrap())?
            },
        };

        let kind: BlockKind = match get("model.kind") {
            Some(v) => v.parse().map_err(|e: Error| invalid("model.kind", e.to_string()))?,
            None => BlockKind::Quotient,
        };
        let depth = get("model.depth").map_or(Ok(20), |v| parse_num("model.depth", v))?;
        let mut model = NetworkConfig::new(kind, depth);
        model.seed = seed;
        if let Some(v) = get("model.base_channels") {
            model.base_channels = parse_num("model.base_channels", v)?;
        }
        model.num_classes = if auto("model.num_classes") {
            format.num_classes()
        } else {
            parse_num("model.num_classes", get("model.num_classes").unwrap())?
        };
        model.alpha = if auto("model.alpha") {
            default_alpha(depth)
        } else {
            parse_num("model.alpha", get("model.alpha").unwrap())?
        };
        model.quotient_activation = match get("model.quotient_activation") {
            None | Some("auto") => None,
            Some(v) => Some(parse_activation(v).map_err(|e| invalid("model.quotient_activation", e.to_string()))?),
        };
        if let Some(v) = get("model.inner_activation") {
            model.inner_activation =
                parse_activation(v).map_err(|e| invalid("model.inner_activation", e.to_string()))?;
        }
        for (key, field) in [
            ("model.head_uses_quotient_activation", &mut model.head_uses_quotient_activation),
            ("model.shortcuts_use_quotient_activation", &mut model.shortcuts_use_quotient_activation),
            ("model.batch_norm", &mut model.batch_norm),
        ] {
            if let Some(v) = get(key) {
                *field = parse_bool(key, v)?;
            }
        }
        model.validate()?;

        let mut train = TrainConfig { seed, augment: format != DatasetFormat::Svhn, ..TrainConfig::default() };
        if let Some(v) = get("train.lr0") {
            train.lr0 = parse_num("train.lr0", v)?;
        }
        if let Some(v) = get("train.momentum") {
            train.momentum = parse_num("train.momentum", v)?;
        }
        if let Some(v) = get("train.batch_size") {
            train.batch_size = parse_num("train.batch_size", v)?;
        }
        if let Some(v) = get("train.gamma") {
            train.gamma = parse_num("train.gamma", v)?;
        }
        if let Some(v) = get("train.total_epochs") {
            train.total_epochs = parse_num("train.total_epochs", v)?;
        }
        train.milestones = match get("train.milestones") {
            None | Some("auto") => TrainConfig::scaled_to(train.total_epochs).milestones,
            Some("") | Some("none") => Vec::new(),
            Some(v) => v.split(',').map(|m| parse_num("train.milestones", m.trim())).collect::<Result<_>>()?,
        };
        if let Some(v) = get("train.weight_decay") {
            train.weight_decay = parse_num("train.weight_decay", v)?;
        }
        if !auto("train.augment") {
            train.augment = parse_bool("train.augment", get("train.augment").unwrap())?;
        }
        if let Some(v) = get("train.divergence_threshold") {
            train.divergence_threshold = parse_num("train.divergence_threshold", v)?;
        }
        if let Some(v) = get("train.eval_batch_size") {
            train.eval_batch_size = parse_num("train.eval_batch_size", v)?;
        }
        train.validate()?;

        Ok(RunConfig { seed, precision, model, train, data })
    }

    /// Overrides the seed of both the initialization and the training run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every key with its effective value; parses back to the same config.
    pub fn resolved_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let q = m.quotient_activation.as_ref().map_or_else(|| "auto".to_string(), ActivationSpec::encode);
        let milestones: Vec<String> = t.milestones.iter().map(usize::to_string).collect();
        let milestones = if milestones.is_empty() { "none".to_string() } else { milestones.join(",") };
        let lines = [
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("model.kind", m.kind.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.num_classes", m.num_classes.to_string()),
            ("model.alpha", format!("{:?}", m.alpha)),
            ("model.quotient_activation", q),
            ("model.inner_activation", m.inner_activation.encode()),
            ("model.head_uses_quotient_activation", m.head_uses_quotient_activation.to_string()),
            ("model.shortcuts_use_quotient_activation", m.shortcuts_use_quotient_activation.to_string()),
            ("model.batch_norm", m.batch_norm.to_string()),
            ("train.lr0", format!("{:?}", t.lr0)),
            ("train.momentum", format!("{:?}", t.momentum)),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.milestones", milestones),
            ("train.gamma", format!("{:?}", t.gamma)),
            ("train.total_epochs", t.total_epochs.to_string()),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.augment", t.augment.to_string()),
            ("train.divergence_threshold", format!("{:?}", t.divergence_threshold)),
            ("train.eval_batch_size", t.eval_batch_size.to_string()),
            ("data.format", self.data.format.to_string()),
            ("data.dir", self.data.dir.display().to_string()),
            ("data.train_limit", self.data.train_limit.to_string()),
            ("data.test_limit", self.data.test_limit.to_string()),
            ("data.val_count", self.data.val_count.to_string()),
        ];
        let mut s = String::from("# resolved configuration\n");
        for (k, v) in lines {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_protocol() {
        let c = RunConfig::defaults();
        assert_eq!(c.train, TrainConfig { augment: true, ..TrainConfig::default() });
        assert_eq!(c.model.depth, 20);
        assert_eq!(c.data.val_count, 5000);
    }

    #[test]
    fn resolved_text_round_trips() {
        let text = "seed = 7\nmodel.depth = 56\nmodel.quotient_activation = quotient 1.7\ntrain.total_epochs = 10\ndata.format = cifar100\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!((c.model.num_classes, c.model.alpha, c.train.milestones.clone()), (100, 1.7, vec![5, 7]));
        let back = RunConfig::parse(&c.resolved_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_and_repeated_keys_name_the_key() {
        let e = RunConfig::parse("model.depht = 20").unwrap_err().to_string();
        assert!(e.contains("model.depht"), "{e}");
        let e = RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string();
        assert!(e.contains("seed"), "{e}");
        let e = RunConfig::parse("train.lr0 = fast").unwrap_err().to_string();
        assert!(e.contains("train.lr0"), "{e}");
    }

    #[test]
    fn bad_depth_cites_the_rule() {
        let e = RunConfig::parse("model.depth = 21").unwrap_err().to_string();
        assert!(e.contains("depth ≡ 2 (mod 6)"), "{e}");
    }

    #[test]
    fn activation_syntax() {
        assert_eq!(parse_activation("relu").unwrap(), ActivationSpec::Relu);
        assert_eq!(parse_activation("quotient 2").unwrap(), ActivationSpec::quotient(2.0).unwrap());
        assert_eq!(parse_activation("clipped 1 0 4").unwrap(), ActivationSpec::clipped_linear(1.0, 0.0, 4.0).unwrap());
        assert!(parse_activation("clipped 1 4 0").is_err());
        assert!(parse_activation("tanh").is_err());
    }
}
