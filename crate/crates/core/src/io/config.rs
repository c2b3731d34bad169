//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! rejected. [`RunConfig::to_text`] lists every key, so its output doubles as
//! the config echo and as the checkpoint's config record.

use std::path::Path;
use std::str::FromStr;

use crate::dit::{ModelConfig, TrainConfig};
use crate::fusion::FusionConfig;
use crate::scene::SceneConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: usize,
    pub held_out: usize,
    pub seed: u64,
    pub log_radiance_min: f64,
    pub log_radiance_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        DataConfig {
            train: 64,
            held_out: 200,
            seed: 1,
            log_radiance_min: scene.log_radiance_min,
            log_radiance_max: scene.log_radiance_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 20 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub fusion: FusionConfig,
    pub sample: SampleConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{value}' for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse::<f64>(key, v.trim()))
        .collect()
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Scene generation settings matching the model's frame size and EVs.
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            width: self.model.width,
            height: self.model.height,
            log_radiance_min: self.data.log_radiance_min,
            log_radiance_max: self.data.log_radiance_max,
            ev_list: self.model.ev_list.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        self.scene().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data.train == 0 {
            return Err(Error::Config("data.train must be at least 1".into()));
        }
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.height" => m.height = parse(key, v)?,
            "model.width" => m.width = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.mm_blocks" => m.mm_blocks = parse(key, v)?,
            "model.single_blocks" => m.single_blocks = parse(key, v)?,
            "model.ev_list" => m.ev_list = parse_list(key, v)?,
            "model.text_len" => m.text_len = parse(key, v)?,
            "model.lora_rank" => m.lora_rank = parse(key, v)?,
            "model.lora_alpha" => m.lora_alpha = parse(key, v)?,
            "model.mod_dim" => m.mod_dim = parse(key, v)?,
            "model.mod_heads" => m.mod_heads = parse(key, v)?,
            "model.modulation" => m.modulation = v.parse()?,
            "model.rope_mode" => m.rope_mode = v.parse()?,
            "model.rope_base" => m.rope_base = parse(key, v)?,
            "model.time_features" => m.time_features = parse(key, v)?,
            "model.ev_frequencies" => m.ev_frequencies = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.pretrain_steps" => t.pretrain_steps = parse(key, v)?,
            "train.finetune_steps" => t.finetune_steps = parse(key, v)?,
            "train.lr_base" => t.lr_base = parse(key, v)?,
            "train.lr_lora" => t.lr_lora = parse(key, v)?,
            "train.lr_modulation" => t.lr_modulation = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.eps" => t.eps = parse(key, v)?,
            "train.lambda_rad" => t.weights.radiance = parse(key, v)?,
            "train.lambda_bracket" => t.weights.bracket = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "data.train" => self.data.train = parse(key, v)?,
            "data.held_out" => self.data.held_out = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "data.log_radiance_min" => self.data.log_radiance_min = parse(key, v)?,
            "data.log_radiance_max" => self.data.log_radiance_max = parse(key, v)?,
            "fusion.saturation_threshold" => self.fusion.saturation_threshold = parse(key, v)?,
            "fusion.feather_low" => self.fusion.feather_low = parse(key, v)?,
            "fusion.feather_high" => self.fusion.feather_high = parse(key, v)?,
            "fusion.blur_radius" => self.fusion.blur_radius = parse(key, v)?,
            "fusion.min_valid_fraction" => self.fusion.min_valid_fraction = parse(key, v)?,
            "sample.steps" => self.sample.steps = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let f = &self.fusion;
        vec![
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.patch", m.patch.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.mm_blocks", m.mm_blocks.to_string()),
            ("model.single_blocks", m.single_blocks.to_string()),
            ("model.ev_list", list(&m.ev_list)),
            ("model.text_len", m.text_len.to_string()),
            ("model.lora_rank", m.lora_rank.to_string()),
            ("model.lora_alpha", m.lora_alpha.to_string()),
            ("model.mod_dim", m.mod_dim.to_string()),
            ("model.mod_heads", m.mod_heads.to_string()),
            ("model.modulation", m.modulation.name().to_string()),
            ("model.rope_mode", m.rope_mode.name().to_string()),
            ("model.rope_base", m.rope_base.to_string()),
            ("model.time_features", m.time_features.to_string()),
            ("model.ev_frequencies", m.ev_frequencies.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.pretrain_steps", t.pretrain_steps.to_string()),
            ("train.finetune_steps", t.finetune_steps.to_string()),
            ("train.lr_base", t.lr_base.to_string()),
            ("train.lr_lora", t.lr_lora.to_string()),
            ("train.lr_modulation", t.lr_modulation.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.lambda_rad", t.weights.radiance.to_string()),
            ("train.lambda_bracket", t.weights.bracket.to_string()),
            ("train.seed", t.seed.to_string()),
            ("data.train", d.train.to_string()),
            ("data.held_out", d.held_out.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.log_radiance_min", d.log_radiance_min.to_string()),
            ("data.log_radiance_max", d.log_radiance_max.to_string()),
            ("fusion.saturation_threshold", f.saturation_threshold.to_string()),
            ("fusion.feather_low", f.feather_low.to_string()),
            ("fusion.feather_high", f.feather_high.to_string()),
            ("fusion.blur_radius", f.blur_radius.to_string()),
            ("fusion.min_valid_fraction", f.min_valid_fraction.to_string()),
            ("sample.steps", self.sample.steps.to_string()),
        ]
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not key=value")))?;
        self.set(key.trim(), value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
