use std::collections::HashMap;

use bf_tensor::Tensor;
use rand::Rng;

use super::config::ModelConfig;
use crate::radiance_codec::RadianceCodec;
use crate::{Error, Result};

/// Parameter families, trained in different phases or at different rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Backbone weights, trained in pretraining and frozen afterwards.
    Base,
    Lora,
    Modulation,
    /// Radiance-token input and output projections.
    Radiance,
    LayerEmbed,
    /// Bin projection of the radiance codec; never trained.
    Codec,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Base => "base",
            Group::Lora => "lora",
            Group::Modulation => "modulation",
            Group::Radiance => "radiance",
            Group::LayerEmbed => "layer_embed",
            Group::Codec => "codec",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        [Group::Base, Group::Lora, Group::Modulation, Group::Radiance, Group::LayerEmbed, Group::Codec]
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Format {
                kind: "checkpoint",
                msg: format!("unknown parameter group '{s}'"),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Named parameters in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter '{name}' is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn count(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn codec(&self) -> Result<RadianceCodec> {
        RadianceCodec::new(self.require("codec.w")?.clone())
    }
}

/// Names of the LoRA-adapted projections, one entry per dense weight.
pub fn lora_targets(cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    for b in 0..cfg.mm_blocks {
        for stream in ["img", "txt"] {
            for proj in ["qkv", "out", "mlp1", "mlp2"] {
                out.push(format!("mm{b}.{stream}.{proj}"));
            }
        }
    }
    for b in 0..cfg.single_blocks {
        for proj in ["lin1", "lin2"] {
            out.push(format!("single{b}.{proj}"));
        }
    }
    out
}

/// Prefixes of blocks carrying a modulation branch.
pub fn modulation_prefixes(cfg: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    if cfg.modulation.on_mm() {
        out.extend((0..cfg.mm_blocks).map(|b| format!("mm{b}.mod")));
    }
    if cfg.modulation.on_single() {
        out.extend((0..cfg.single_blocks).map(|b| format!("single{b}.mod")));
    }
    out
}

struct Init<'a, R: Rng + ?Sized> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn tensor(&mut self, name: String, group: Group, value: Tensor) -> Result<()> {
        self.store.insert(name, group, value).map(|_| ())
    }

    /// Dense `[inp, out]` weight with `N(0, gain²/inp)` entries and a bias row.
    fn linear(&mut self, name: &str, group: Group, inp: usize, out: usize, gain: f64) -> Result<()> {
        let w = Tensor::randn(&[inp, out], gain / (inp as f64).sqrt(), self.rng);
        self.tensor(format!("{name}.w"), group, w)?;
        self.tensor(format!("{name}.b"), group, Tensor::zeros(&[1, out]))
    }

    /// Conditioning projection whose chunks feed `(shift, scale, gate)` triples;
    /// gates start at 1 so blocks are active from the first step.
    fn ada(&mut self, name: &str, dim: usize, chunks: usize) -> Result<()> {
        self.linear(name, Group::Base, dim, chunks * dim, 0.1)?;
        let mut bias = vec![0.0; chunks * dim];
        for triple in 0..chunks / 3 {
            bias[(3 * triple + 2) * dim..(3 * triple + 3) * dim].fill(1.0);
        }
        self.store.set(&format!("{name}.b"), Tensor::new(vec![1, chunks * dim], bias)?)
    }

    fn modulation(&mut self, pfx: &str, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.dim;
        let g = Group::Modulation;
        self.linear(&format!("{pfx}.ev1"), g, 2 * cfg.ev_frequencies + 1, d, 1.0)?;
        self.linear(&format!("{pfx}.ev2"), g, d, 2 * d, 0.5)?;
        self.linear(&format!("{pfx}.qkv"), g, d, 3 * cfg.mod_dim, 1.0)?;
        self.linear(&format!("{pfx}.out"), g, cfg.mod_dim, d, 1.0)?;
        self.tensor(format!("{pfx}.gate"), g, Tensor::zeros(&[1, d]))
    }
}

/// Fresh parameters: random base and modulation weights, zero LoRA `B`,
/// zero modulation gates and layer embeddings, orthogonal codec rows.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.dim;
    let c = cfg.latent_dim();
    let mut it = Init {
        store: ParamStore::new(),
        rng,
    };
    let base = Group::Base;
    it.linear("time.l1", base, cfg.time_features, d, 1.0)?;
    it.linear("time.l2", base, d, d, 1.0)?;
    let emb = Tensor::randn(&[cfg.vocab + 1, d], 1.0, it.rng);
    it.tensor("txt.emb".into(), base, emb)?;
    it.linear("txt.pool", base, d, d, 1.0)?;
    it.linear("img.in", base, c, d, 1.0)?;
    for b in 0..cfg.mm_blocks {
        for s in ["img", "txt"] {
            let p = format!("mm{b}.{s}");
            it.ada(&format!("{p}.ada"), d, 6)?;
            it.linear(&format!("{p}.qkv"), base, d, 3 * d, 1.0)?;
            it.linear(&format!("{p}.out"), base, d, d, 1.0)?;
            it.linear(&format!("{p}.mlp1"), base, d, 2 * d, 1.0)?;
            it.linear(&format!("{p}.mlp2"), base, 2 * d, d, 1.0)?;
        }
    }
    for b in 0..cfg.single_blocks {
        let p = format!("single{b}");
        it.ada(&format!("{p}.ada"), d, 3)?;
        it.linear(&format!("{p}.lin1"), base, d, 5 * d, 1.0)?;
        it.linear(&format!("{p}.lin2"), base, 3 * d, d, 1.0)?;
    }
    it.linear("final.ada", base, d, 2 * d, 0.1)?;
    it.linear("final.out", base, d, c, 1.0)?;
    // Direct path from the noisy latent to the velocity, zero at init.
    it.linear("final.skip", base, c, c, 0.0)?;

    for target in lora_targets(cfg) {
        let w = it.store.require(&format!("{target}.w"))?;
        let (inp, out) = (w.rows(), w.cols());
        let a = Tensor::randn(&[inp, cfg.lora_rank], 1.0 / (inp as f64).sqrt(), it.rng);
        it.tensor(format!("{target}.lora_a"), Group::Lora, a)?;
        it.tensor(format!("{target}.lora_b"), Group::Lora, Tensor::zeros(&[cfg.lora_rank, out]))?;
    }
    for pfx in modulation_prefixes(cfg) {
        it.modulation(&pfx, cfg)?;
    }
    if cfg.rope_mode.uses_layer_embed() {
        it.tensor("layer.emb".into(), Group::LayerEmbed, Tensor::zeros(&[cfg.brackets(), d]))?;
    }
    it.linear("rad.in", Group::Radiance, d, d, 1.0)?;
    it.linear("rad.out", Group::Radiance, 2 * d, d, 1.0)?;
    let codec = RadianceCodec::init(d, it.rng)?;
    it.tensor("codec.w".into(), Group::Codec, codec.projection().clone())?;
    Ok(it.store)
}
