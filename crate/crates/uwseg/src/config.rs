//! Run configuration: a flat `key = value` text format with dotted keys.
//!
//! Example:
//!
//! ```text
//! # overfit run
//! model.n_cls = 4
//! model.decoder = maa
//! optim.lr = 0.001
//! schedule.max_iters = 800
//! data.synthetic = true
//! data.crop = 128x128
//! loss.lambda1 = 1.0
//! loss.lambda2 = 3.0
//! ```
//!
//! Unknown keys and ill-typed values are errors that name the key and the
//! expected type.

use crate::data::AugmentPolicy;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{DecoderKind, ModelConfig};
use crate::train::TrainConfig;
use crate::uiqa::UiqaConfig;
use std::collections::BTreeMap;
use std::path::PathBuf;

const KNOWN_KEYS: &[&str] = &[
    "model.P",
    "model.N_M",
    "model.N_C",
    "model.C_embed",
    "model.n_cls",
    "model.decoder",
    "model.use_uiqa",
    "model.dropout",
    "model.channels",
    "model.depths",
    "model.sr_ratios",
    "model.heads",
    "model.ffn_expansion",
    "optim.lr",
    "optim.wd",
    "optim.betas",
    "optim.clip_grad_norm",
    "schedule.max_iters",
    "schedule.power",
    "data.root",
    "data.palette",
    "data.crop",
    "data.scale_range",
    "data.hflip_p",
    "data.seed",
    "data.synthetic",
    "data.n_images",
    "data.size",
    "loss.lambda1",
    "loss.lambda2",
    "loss.edge_radius",
    "train.batch",
    "train.eval_every",
    "train.ckpt_every",
    "train.early_stop_miou",
    "train.augment",
];

/// Ordered key/value pairs parsed from the config text.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    pairs: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if pairs.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }
        Ok(KvConfig { pairs })
    }

    pub fn validate_known(&self) -> Result<()> {
        for key in self.pairs.keys() {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown config key '{key}' (see the documented key list)"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.get(key).map(|s| s.as_str())
    }

    fn typed<T: std::str::FromStr>(&self, key: &str, ty: &str) -> Result<Option<T>> {
        match self.pairs.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("key '{key}': expected {ty}, got '{v}'"))
            }),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.typed::<usize>(key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn f32_or(&self, key: &str, default: f32) -> Result<f32> {
        Ok(self.typed::<f32>(key, "a number")?.unwrap_or(default))
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>> {
        self.typed::<f64>(key, "a number")
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.typed::<u64>(key, "an unsigned integer")?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.pairs.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!("key '{key}': expected true/false, got '{v}'"))),
        }
    }

    pub fn string_opt(&self, key: &str) -> Option<String> {
        self.pairs.get(key).cloned()
    }

    /// "a,b" float pair.
    pub fn f32_pair_or(&self, key: &str, default: (f32, f32)) -> Result<(f32, f32)> {
        match self.pairs.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(|p| p.trim()).collect();
                if parts.len() != 2 {
                    return Err(Error::Config(format!(
                        "key '{key}': expected 'lo,hi', got '{v}'"
                    )));
                }
                let lo = parts[0].parse().map_err(|_| {
                    Error::Config(format!("key '{key}': expected a number, got '{}'", parts[0]))
                })?;
                let hi = parts[1].parse().map_err(|_| {
                    Error::Config(format!("key '{key}': expected a number, got '{}'", parts[1]))
                })?;
                Ok((lo, hi))
            }
        }
    }

    /// "HxW" size pair.
    pub fn size_or(&self, key: &str, default: (usize, usize)) -> Result<(usize, usize)> {
        match self.pairs.get(key) {
            None => Ok(default),
            Some(v) => parse_size(v)
                .ok_or_else(|| Error::Config(format!("key '{key}': expected 'HxW', got '{v}'"))),
        }
    }

    /// "a,b,c,d" four-element usize list.
    pub fn usize4_or(&self, key: &str, default: [usize; 4]) -> Result<[usize; 4]> {
        match self.pairs.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: std::result::Result<Vec<usize>, _> =
                    v.split(',').map(|p| p.trim().parse::<usize>()).collect();
                let parts = parts.map_err(|_| {
                    Error::Config(format!("key '{key}': expected four integers, got '{v}'"))
                })?;
                parts.try_into().map_err(|_| {
                    Error::Config(format!("key '{key}': expected four integers, got '{v}'"))
                })
            }
        }
    }
}

pub fn parse_size(v: &str) -> Option<(usize, usize)> {
    let (h, w) = v.split_once('x')?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

// ---------------------------------------------------------------------------
// Model config <-> key/value lines (used by checkpoints and manifests)
// ---------------------------------------------------------------------------

fn join4(v: &[usize; 4]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub fn model_to_kv(cfg: &ModelConfig) -> Vec<(String, String)> {
    let mut out = vec![
        ("model.channels".into(), join4(&cfg.encoder.channels)),
        ("model.depths".into(), join4(&cfg.encoder.depths)),
        ("model.sr_ratios".into(), join4(&cfg.encoder.sr_ratios)),
        ("model.heads".into(), join4(&cfg.encoder.heads)),
        ("model.ffn_expansion".into(), cfg.encoder.ffn_expansion.to_string()),
        ("model.use_uiqa".into(), cfg.uiqa.is_some().to_string()),
        ("model.decoder".into(), cfg.decoder.as_str().into()),
        ("model.C_embed".into(), cfg.embed.to_string()),
        ("model.n_cls".into(), cfg.n_cls.to_string()),
        ("model.dropout".into(), cfg.dropout_p.to_string()),
    ];
    if let Some(u) = &cfg.uiqa {
        out.push(("model.P".into(), u.patch.to_string()));
        out.push(("model.N_M".into(), u.n_layers.to_string()));
        out.push(("model.N_C".into(), u.n_heads.to_string()));
    }
    out
}

pub fn model_from_kv(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let kv = KvConfig {
        pairs: pairs.iter().cloned().collect(),
    };
    model_from_config(&kv)
}

pub fn model_from_config(kv: &KvConfig) -> Result<ModelConfig> {
    let defaults = ModelConfig::default();
    let encoder = EncoderConfig {
        channels: kv.usize4_or("model.channels", defaults.encoder.channels)?,
        depths: kv.usize4_or("model.depths", defaults.encoder.depths)?,
        sr_ratios: kv.usize4_or("model.sr_ratios", defaults.encoder.sr_ratios)?,
        heads: kv.usize4_or("model.heads", defaults.encoder.heads)?,
        ffn_expansion: kv.usize_or("model.ffn_expansion", defaults.encoder.ffn_expansion)?,
    };
    let uiqa = if kv.bool_or("model.use_uiqa", true)? {
        Some(UiqaConfig {
            patch: kv.usize_or("model.P", 32)?,
            n_layers: kv.usize_or("model.N_M", 4)?,
            n_heads: kv.usize_or("model.N_C", 4)?,
            embed: None,
        })
    } else {
        None
    };
    let decoder = match kv.get("model.decoder") {
        Some(v) => DecoderKind::parse(v)?,
        None => DecoderKind::Maa,
    };
    Ok(ModelConfig {
        encoder,
        uiqa,
        decoder,
        embed: kv.usize_or("model.C_embed", defaults.embed)?,
        n_cls: kv.usize_or("model.n_cls", defaults.n_cls)?,
        dropout_p: kv.f32_or("model.dropout", defaults.dropout_p)?,
    })
}

// ---------------------------------------------------------------------------
// Full run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    pub crop: (usize, usize),
    pub scale_range: (f32, f32),
    pub hflip_p: f32,
    pub seed: u64,
    pub synthetic: bool,
    pub n_images: usize,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let kv = KvConfig::parse(text)?;
        kv.validate_known()?;
        RunConfig::from_kv(&kv)
    }

    pub fn from_kv(kv: &KvConfig) -> Result<RunConfig> {
        let model = model_from_config(kv)?;
        let data = DataConfig {
            root: kv.string_opt("data.root").map(PathBuf::from),
            palette: kv.string_opt("data.palette").map(PathBuf::from),
            crop: kv.size_or("data.crop", (128, 128))?,
            scale_range: kv.f32_pair_or("data.scale_range", (0.5, 2.0))?,
            hflip_p: kv.f32_or("data.hflip_p", 0.5)?,
            seed: kv.u64_or("data.seed", 0)?,
            synthetic: kv.bool_or("data.synthetic", kv.get("data.root").is_none())?,
            n_images: kv.usize_or("data.n_images", 8)?,
            size: kv.usize_or("data.size", 128)?,
        };
        let betas = kv.f32_pair_or("optim.betas", (0.9, 0.999))?;
        let use_augment = kv.bool_or("train.augment", false)?;
        let train = TrainConfig {
            iters: kv.usize_or("schedule.max_iters", 1000)?,
            batch_size: kv.usize_or("train.batch", 4)?,
            base_lr: kv.f32_or("optim.lr", 6e-6)?,
            weight_decay: kv.f32_or("optim.wd", 0.01)?,
            betas,
            schedule_power: kv.f32_or("schedule.power", 1.0)?,
            weights: LossWeights {
                lambda1: kv.f32_or("loss.lambda1", 1.0)?,
                lambda2: kv.f32_or("loss.lambda2", 3.0)?,
            },
            edge_radius: kv.usize_or("loss.edge_radius", 1)?,
            augment: use_augment.then(|| AugmentPolicy {
                scale_range: data.scale_range,
                crop: data.crop,
                hflip_p: data.hflip_p,
            }),
            seed: data.seed,
            eval_every: kv.usize_or("train.eval_every", 0)?,
            checkpoint_every: kv.usize_or("train.ckpt_every", 0)?,
            out_dir: None,
            clip_grad_norm: {
                let v = kv.f32_or("optim.clip_grad_norm", 0.0)?;
                (v > 0.0).then_some(v)
            },
            early_stop_miou: kv.f64_opt("train.early_stop_miou")?,
        };
        Ok(RunConfig { model, data, train })
    }

    /// Serialize the effective configuration (manifest snapshot).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in model_to_kv(&self.model) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("optim.lr = {:e}\n", self.train.base_lr));
        out.push_str(&format!("optim.wd = {}\n", self.train.weight_decay));
        out.push_str(&format!("optim.betas = {},{}\n", self.train.betas.0, self.train.betas.1));
        out.push_str(&format!("schedule.max_iters = {}\n", self.train.iters));
        out.push_str(&format!("schedule.power = {}\n", self.train.schedule_power));
        out.push_str(&format!("loss.lambda1 = {}\n", self.train.weights.lambda1));
        out.push_str(&format!("loss.lambda2 = {}\n", self.train.weights.lambda2));
        out.push_str(&format!("loss.edge_radius = {}\n", self.train.edge_radius));
        out.push_str(&format!("train.batch = {}\n", self.train.batch_size));
        out.push_str(&format!("train.augment = {}\n", self.train.augment.is_some()));
        if let Some(root) = &self.data.root {
            out.push_str(&format!("data.root = {}\n", root.display()));
        }
        if let Some(p) = &self.data.palette {
            out.push_str(&format!("data.palette = {}\n", p.display()));
        }
        out.push_str(&format!("data.crop = {}x{}\n", self.data.crop.0, self.data.crop.1));
        out.push_str(&format!(
            "data.scale_range = {},{}\n",
            self.data.scale_range.0, self.data.scale_range.1
        ));
        out.push_str(&format!("data.seed = {}\n", self.data.seed));
        out.push_str(&format!("data.synthetic = {}\n", self.data.synthetic));
        out.push_str(&format!("data.n_images = {}\n", self.data.n_images));
        out.push_str(&format!("data.size = {}\n", self.data.size));
        out
    }
}
