//! Training configuration and its `key = value` text form.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors.

use crate::concentration::PPCConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Leading epochs trained on cross-entropy alone.
    pub ppc_warmup_epochs: usize,
    pub model: ModelConfig,
    pub ppc: PPCConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            train_samples: 2000,
            test_samples: 400,
            ppc_warmup_epochs: 0,
            model: ModelConfig::default(),
            ppc: PPCConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config {
        line,
        msg: format!("bad value `{v}` for `{key}`"),
    })
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config {
            line,
            msg: format!("bad boolean `{v}` for `{key}`"),
        }),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ppc.validate()?;
        if self.batch_size == 0 || self.train_samples == 0 {
            return Err(Error::Param("batch_size and train_samples must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Param("lr and weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Param("betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse_num(line, key, v)?,
            "epochs" => self.epochs = parse_num(line, key, v)?,
            "batch_size" => self.batch_size = parse_num(line, key, v)?,
            "lr" => self.base_lr = parse_num(line, key, v)?,
            "weight_decay" => self.weight_decay = parse_num(line, key, v)?,
            "beta1" => self.beta1 = parse_num(line, key, v)?,
            "beta2" => self.beta2 = parse_num(line, key, v)?,
            "adam_eps" => self.adam_eps = parse_num(line, key, v)?,
            "train_samples" => self.train_samples = parse_num(line, key, v)?,
            "test_samples" => self.test_samples = parse_num(line, key, v)?,
            "ppc_warmup_epochs" => self.ppc_warmup_epochs = parse_num(line, key, v)?,
            "image_size" => m.vit.image_size = parse_num(line, key, v)?,
            "patch_size" => m.vit.patch_size = parse_num(line, key, v)?,
            "in_channels" => m.vit.in_channels = parse_num(line, key, v)?,
            "depth" => m.vit.depth = parse_num(line, key, v)?,
            "heads" => m.vit.heads = parse_num(line, key, v)?,
            "embed_dim" => m.vit.embed_dim = parse_num(line, key, v)?,
            "mlp_ratio" => m.vit.mlp_ratio = parse_num(line, key, v)?,
            "n_classes" => m.vit.n_classes = parse_num(line, key, v)?,
            "global_per_class" => m.global_per_class = parse_num(line, key, v)?,
            "local_per_class" => m.local_per_class = parse_num(line, key, v)?,
            "lambda_g" => m.lambda_g = parse_num(line, key, v)?,
            "lambda_l" => m.lambda_l = parse_num(line, key, v)?,
            "top_k" => m.top_k = parse_num(line, key, v)?,
            "rollout_renormalize" => m.rollout_renormalize = parse_bool(line, key, v)?,
            "lambda_mu" => self.ppc.lambda_mu = parse_num(line, key, v)?,
            "lambda_sigma" => self.ppc.lambda_sigma = parse_num(line, key, v)?,
            "t_mu" => self.ppc.t_mu = parse_num(line, key, v)?,
            "t_sigma" => self.ppc.t_sigma = parse_num(line, key, v)?,
            "sigma_guard" => self.ppc.sigma_guard = parse_num(line, key, v)?,
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap().trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    msg: format!("expected `key = value`, got `{body}`"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{k}`"),
                });
            }
            cfg.set(line, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value; floats print in shortest round-trip form.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let p = &self.ppc;
        [
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.base_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("ppc_warmup_epochs", self.ppc_warmup_epochs.to_string()),
            ("image_size", m.vit.image_size.to_string()),
            ("patch_size", m.vit.patch_size.to_string()),
            ("in_channels", m.vit.in_channels.to_string()),
            ("depth", m.vit.depth.to_string()),
            ("heads", m.vit.heads.to_string()),
            ("embed_dim", m.vit.embed_dim.to_string()),
            ("mlp_ratio", m.vit.mlp_ratio.to_string()),
            ("n_classes", m.vit.n_classes.to_string()),
            ("global_per_class", m.global_per_class.to_string()),
            ("local_per_class", m.local_per_class.to_string()),
            ("lambda_g", m.lambda_g.to_string()),
            ("lambda_l", m.lambda_l.to_string()),
            ("top_k", m.top_k.to_string()),
            ("rollout_renormalize", m.rollout_renormalize.to_string()),
            ("lambda_mu", p.lambda_mu.to_string()),
            ("lambda_sigma", p.lambda_sigma.to_string()),
            ("t_mu", p.t_mu.to_string()),
            ("t_sigma", p.t_sigma.to_string()),
            ("sigma_guard", p.sigma_guard.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
