use crate::linear_image::{validate_ev_list, DEFAULT_EV_LIST};
use crate::radiance_codec::NUM_BINS;
use crate::scene::VOCABULARY;
use crate::{Error, Result};

/// Positional encoding of bracket tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RopeMode {
    /// `(0, i, j)`: brackets share positions.
    TwoD,
    /// 2D positions plus a learned per-bracket embedding.
    TwoDLayerEmbed,
    /// `(k, i, j)`.
    ThreeD,
    ThreeDLayerEmbed,
}

impl RopeMode {
    pub fn uses_bracket_index(self) -> bool {
        matches!(self, RopeMode::ThreeD | RopeMode::ThreeDLayerEmbed)
    }

    pub fn uses_layer_embed(self) -> bool {
        matches!(self, RopeMode::TwoDLayerEmbed | RopeMode::ThreeDLayerEmbed)
    }

    pub fn name(self) -> &'static str {
        match self {
            RopeMode::TwoD => "2d",
            RopeMode::TwoDLayerEmbed => "2d+le",
            RopeMode::ThreeD => "3d",
            RopeMode::ThreeDLayerEmbed => "3d+le",
        }
    }
}

impl std::str::FromStr for RopeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [RopeMode::TwoD, RopeMode::TwoDLayerEmbed, RopeMode::ThreeD, RopeMode::ThreeDLayerEmbed]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rope mode '{s}' (2d | 2d+le | 3d | 3d+le)")))
    }
}

/// Which blocks carry the exposure-modulation branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModulationPlacement {
    Off,
    Single,
    MultiModal,
    Both,
}

impl ModulationPlacement {
    pub fn on_single(self) -> bool {
        matches!(self, ModulationPlacement::Single | ModulationPlacement::Both)
    }

    pub fn on_mm(self) -> bool {
        matches!(self, ModulationPlacement::MultiModal | ModulationPlacement::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModulationPlacement::Off => "off",
            ModulationPlacement::Single => "single",
            ModulationPlacement::MultiModal => "mm",
            ModulationPlacement::Both => "both",
        }
    }
}

impl std::str::FromStr for ModulationPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            ModulationPlacement::Off,
            ModulationPlacement::Single,
            ModulationPlacement::MultiModal,
            ModulationPlacement::Both,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown modulation placement '{s}' (off | single | mm | both)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mm_blocks: usize,
    pub single_blocks: usize,
    pub ev_list: Vec<f64>,
    /// Descriptor vocabulary size; one extra padding row is allocated.
    pub vocab: usize,
    pub text_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub mod_dim: usize,
    pub mod_heads: usize,
    pub modulation: ModulationPlacement,
    pub rope_mode: RopeMode,
    pub rope_base: f64,
    /// Sinusoidal features for the time embedding (half sin, half cos).
    pub time_features: usize,
    /// Fourier frequencies of the EV features.
    pub ev_frequencies: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            patch: 4,
            dim: 96,
            heads: 4,
            mm_blocks: 2,
            single_blocks: 4,
            ev_list: DEFAULT_EV_LIST.to_vec(),
            vocab: VOCABULARY.len(),
            text_len: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
            mod_dim: 96,
            mod_heads: 4,
            modulation: ModulationPlacement::Single,
            rope_mode: RopeMode::ThreeD,
            rope_base: 100.0,
            time_features: 32,
            ev_frequencies: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.height == 0 || self.width == 0 {
            return bad("image and patch sizes must be non-zero".into());
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "{}x{} image is not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} does not split into {} heads", self.dim, self.heads));
        }
        if self.head_dim() % 6 != 0 {
            return bad(format!(
                "head dim {} cannot be split into three even rotary groups",
                self.head_dim()
            ));
        }
        if self.mod_heads == 0 || self.mod_dim % self.mod_heads != 0 || (self.mod_dim / self.mod_heads) % 6 != 0 {
            return bad(format!(
                "modulation dim {} with {} heads needs a head dim divisible by 6",
                self.mod_dim, self.mod_heads
            ));
        }
        if self.dim < NUM_BINS {
            return bad(format!("dim {} is below the {NUM_BINS} radiance bins", self.dim));
        }
        if self.lora_rank == 0 || !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("LoRA rank and alpha must be positive".into());
        }
        if self.text_len == 0 || self.vocab == 0 {
            return bad("text length and vocabulary must be non-zero".into());
        }
        if self.time_features == 0 || self.time_features % 2 != 0 || self.ev_frequencies == 0 {
            return bad("time features must be even and EV frequencies non-zero".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad("rope base must exceed 1".into());
        }
        validate_ev_list(&self.ev_list).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn brackets(&self) -> usize {
        self.ev_list.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Latent width of one patch token.
    pub fn latent_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Patch tokens per bracket.
    pub fn tokens_per_bracket(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn base_index(&self) -> usize {
        self.ev_list
            .iter()
            .position(|&e| e == 0.0)
            .expect("validated EV list contains 0")
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub radiance: f64,
    pub bracket: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            radiance: 1.0,
            bracket: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    /// Steps on 0 EV frames only, training the base weights.
    pub pretrain_steps: usize,
    /// Steps on full bracket sets with the base frozen.
    pub finetune_steps: usize,
    pub lr_base: f64,
    pub lr_lora: f64,
    pub lr_modulation: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 8,
            pretrain_steps: 200,
            finetune_steps: 500,
            lr_base: 2e-3,
            lr_lora: 5e-3,
            lr_modulation: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if ![self.lr_base, self.lr_lora, self.lr_modulation, self.weight_decay, self.weights.radiance, self.weights.bracket]
            .into_iter()
            .all(finite_nonneg)
        {
            return Err(Error::Config("learning rates, decay and loss weights must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}
