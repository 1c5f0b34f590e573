//! Flat `key = value` run configuration.
//!
//! Lines are UTF-8; `#` starts a comment; blank lines are ignored. Every
//! key has a default (see [`RunConfig::render`]) and unknown keys are
//! rejected. Block keys are prefixed `blockN.` with `N` counted from 1.

use std::fmt::Write as _;

use crate::dataset::PhantomParams;
use crate::error::{Error, Result};
use crate::model::{Ablation, FusionConfig, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub phantom: PhantomParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            phantom: PhantomParams::default(),
        }
    }
}

const GLOBAL_KEYS: &[(&str, &str)] = &[
    ("shape", "input and phantom extents DxHxW"),
    ("fusion_blocks", "number of fusion blocks"),
    ("ablation", "full, no_cnn or no_transformer"),
    ("relu_before_bn", "Conv -> ReLU -> BN when true, Conv -> BN -> ReLU otherwise"),
    ("ffn_ratio", "encoder feed-forward expansion"),
    ("pos_embed", "learned positional table per SPT part"),
    ("base_lr", "learning rate after warmup"),
    ("warmup_epochs", "linear warmup length"),
    ("batch_size", "training and evaluation batch size"),
    ("early_stop_patience", "epochs without validation improvement before stopping"),
    ("lambda_patience", "stalled epochs before the MAE weight switches to 1"),
    ("lambda_override", "fixed MAE weight, or none for the schedule"),
    ("max_epochs", "epoch limit"),
    ("seed", "initialization, shuffling and augmentation seed"),
    ("augment", "random shift and rotation on training volumes"),
    ("max_shift", "largest shift in voxels"),
    ("max_rotation_deg", "largest rotation angle per axis in degrees"),
    ("bn_recalibration", "clean training volumes that re-estimate batch-norm statistics after each epoch, 0 to keep running averages"),
    ("weight_decay", "L2 coefficient"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator epsilon"),
    ("theta", "Gaussian label width in years"),
    ("noise_sigma", "phantom noise standard deviation"),
];

const BLOCK_KEYS: &[(&str, &str)] = &[
    ("llb_channels", "convolution channels c1,c2"),
    ("patches", "patch edge of SPT parts 1,2,3"),
    ("embed_dim", "token width"),
    ("depth", "encoder layers per part"),
    ("heads", "attention heads"),
    ("spt_channels", "SPT output channels"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_list<const N: usize>(key: &str, v: &str, sep: char) -> Result<[usize; N]> {
    let parts: Vec<usize> = v
        .split(sep)
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|_| {
        Error::Config(format!(
            "{key}: expected {N} values separated by '{sep}', got {v:?}"
        ))
    })
}

/// `DxHxW` extents.
pub fn parse_shape(v: &str) -> Result<[usize; 3]> {
    parse_list("shape", v, 'x')
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

fn default_block(i: usize) -> FusionConfig {
    let d = ModelConfig::desk();
    d.blocks[i.min(d.blocks.len() - 1)].clone()
}

/// `(key, value, line)` triples of a config file.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string(), n + 1));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one setting. Block keys need `fusion_blocks` to cover them.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "shape" => {
                let s = parse_shape(value)?;
                m.input_shape = s;
                self.phantom.shape = s;
            }
            "fusion_blocks" => {
                let n: usize = parse_num(key, value)?;
                if n == 0 {
                    return Err(Error::Config("fusion_blocks must be at least 1".into()));
                }
                let len = m.blocks.len();
                m.blocks.truncate(n);
                m.blocks.extend((len..n).map(default_block));
            }
            "ablation" => m.ablation = value.parse::<Ablation>()?,
            "relu_before_bn" => m.relu_before_bn = parse_bool(key, value)?,
            "ffn_ratio" => m.ffn_ratio = parse_num(key, value)?,
            "pos_embed" => m.pos_embed = parse_bool(key, value)?,
            "base_lr" => t.base_lr = parse_num(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse_num(key, value)?,
            "lambda_patience" => t.loss.lambda_patience = parse_num(key, value)?,
            "lambda_override" => {
                t.loss.lambda_override = match value {
                    "none" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "max_epochs" => t.max_epochs = parse_num(key, value)?,
            "seed" => {
                t.seed = parse_num(key, value)?;
                self.phantom.seed = t.seed;
            }
            "augment" => t.augment = parse_bool(key, value)?,
            "max_shift" => t.augmentation.max_shift = parse_num(key, value)?,
            "max_rotation_deg" => t.augmentation.max_degrees = parse_num(key, value)?,
            "bn_recalibration" => t.bn_recalibration = parse_num(key, value)?,
            "weight_decay" => t.adam.weight_decay = parse_num(key, value)?,
            "beta1" => t.adam.beta1 = parse_num(key, value)?,
            "beta2" => t.adam.beta2 = parse_num(key, value)?,
            "adam_eps" => t.adam.eps = parse_num(key, value)?,
            "theta" => t.loss.theta = parse_num(key, value)?,
            "noise_sigma" => self.phantom.noise_sigma = parse_num(key, value)?,
            other => return self.set_block(other, value),
        }
        Ok(())
    }

    fn set_block(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key {key:?}"));
        let (prefix, field) = key.split_once('.').ok_or_else(unknown)?;
        let n: usize = prefix
            .strip_prefix("block")
            .and_then(|s| s.parse().ok())
            .ok_or_else(unknown)?;
        if !BLOCK_KEYS.iter().any(|(k, _)| *k == field) {
            return Err(unknown());
        }
        let count = self.model.blocks.len();
        let b = n
            .checked_sub(1)
            .and_then(|i| self.model.blocks.get_mut(i))
            .ok_or_else(|| {
                Error::Config(format!("{key}: only {count} fusion blocks are configured"))
            })?;
        match field {
            "llb_channels" => b.llb_channels = parse_list(key, value, ',')?,
            "patches" => b.patches = parse_list(key, value, ',')?,
            "embed_dim" => b.embed_dim = parse_num(key, value)?,
            "depth" => b.depth = parse_num(key, value)?,
            "heads" => b.heads = parse_num(key, value)?,
            "spt_channels" => b.spt_channels = parse_num(key, value)?,
            _ => unreachable!("checked against BLOCK_KEYS"),
        }
        Ok(())
    }

    /// Applies pairs with `fusion_blocks` first, then in order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "fusion_blocks") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "fusion_blocks") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = RunConfig::default();
        for (k, _, line) in &pairs {
            if !cfg.is_known(k) {
                return Err(Error::Config(format!("line {line}: unknown key {k:?}")));
            }
        }
        cfg.apply(pairs.iter().map(|(k, v, _)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn is_known(&self, key: &str) -> bool {
        if GLOBAL_KEYS.iter().any(|(k, _)| *k == key) {
            return true;
        }
        key.split_once('.')
            .and_then(|(p, f)| {
                let n: usize = p.strip_prefix("block")?.parse().ok()?;
                (n >= 1 && BLOCK_KEYS.iter().any(|(k, _)| *k == f)).then_some(())
            })
            .is_some()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    fn value_of(&self, key: &str) -> String {
        let (m, t) = (&self.model, &self.train);
        match key {
            "shape" => join(&m.input_shape, "x"),
            "fusion_blocks" => m.blocks.len().to_string(),
            "ablation" => m.ablation.as_str().into(),
            "relu_before_bn" => m.relu_before_bn.to_string(),
            "ffn_ratio" => m.ffn_ratio.to_string(),
            "pos_embed" => m.pos_embed.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "warmup_epochs" => t.warmup_epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "early_stop_patience" => t.early_stop_patience.to_string(),
            "lambda_patience" => t.loss.lambda_patience.to_string(),
            "lambda_override" => t
                .loss
                .lambda_override
                .map_or("none".into(), |v| v.to_string()),
            "max_epochs" => t.max_epochs.to_string(),
            "seed" => t.seed.to_string(),
            "augment" => t.augment.to_string(),
            "max_shift" => t.augmentation.max_shift.to_string(),
            "max_rotation_deg" => t.augmentation.max_degrees.to_string(),
            "bn_recalibration" => t.bn_recalibration.to_string(),
            "weight_decay" => t.adam.weight_decay.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "theta" => t.loss.theta.to_string(),
            "noise_sigma" => self.phantom.noise_sigma.to_string(),
            _ => unreachable!("{key} is not a global key"),
        }
    }

    /// Every key with its current value and description, parseable by
    /// [`RunConfig::from_text`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, doc) in GLOBAL_KEYS {
            let _ = writeln!(out, "# {doc}\n{k} = {}", self.value_of(k));
        }
        for (i, b) in self.model.blocks.iter().enumerate() {
            for (k, doc) in BLOCK_KEYS {
                let v = match *k {
                    "llb_channels" => join(&b.llb_channels, ","),
                    "patches" => join(&b.patches, ","),
                    "embed_dim" => b.embed_dim.to_string(),
                    "depth" => b.depth.to_string(),
                    "heads" => b.heads.to_string(),
                    _ => b.spt_channels.to_string(),
                };
                let _ = writeln!(out, "# {doc}\nblock{}.{k} = {v}", i + 1);
            }
        }
        out
    }
}
