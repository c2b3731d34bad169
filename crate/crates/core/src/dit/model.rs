//! Toy MM-DiT / Single-DiT network recorded on a tape.

use std::rc::Rc;

use bf_tensor::{AttnMask, Gradients, RotaryAngles, Tape, Tensor, Var};

use super::config::ModelConfig;
use super::params::{Group, ParamStore};
use super::tokens::{build_mask, build_positions, rope_angles, SeqLayout};
use crate::{Error, Result};

/// Sinusoidal embedding of a flow time in `[0, 1]`.
pub fn time_features(t: f64, count: usize) -> Vec<f64> {
    let half = count / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp())
        .collect();
    let x = 1000.0 * t;
    let mut out: Vec<f64> = freqs.iter().map(|f| (x * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (x * f).cos()));
    out
}

/// `[ev / 4, sin(ω_j ev), cos(ω_j ev)]` with `ω_j = π 2^j / 8`.
pub fn ev_features(ev: f64, frequencies: usize) -> Vec<f64> {
    let mut out = vec![ev / 4.0];
    for j in 0..frequencies {
        let w = std::f64::consts::PI * f64::powi(2.0, j as i32) / 8.0;
        out.push((w * ev).sin());
        out.push((w * ev).cos());
    }
    out
}

/// Layout-dependent constants shared by every block of one forward pass.
#[derive(Clone, Debug)]
pub struct SeqContext {
    pub layout: SeqLayout,
    pub rope: Rc<RotaryAngles>,
    pub mask: Rc<AttnMask>,
    /// Rotary angles and mask of the auxiliary attention over bracket tokens.
    pub mod_rope: Rc<RotaryAngles>,
    pub mod_mask: Rc<AttnMask>,
    pub ev_features: Tensor,
    pub bracket_of_token: Vec<usize>,
}

impl SeqContext {
    pub fn new(cfg: &ModelConfig, layout: SeqLayout) -> Result<Self> {
        let bracket_index = cfg.rope_mode.uses_bracket_index();
        let positions = build_positions(&layout, bracket_index);
        let rope = rope_angles(&positions, cfg.head_dim(), cfg.rope_base)?;
        let start = layout.bracket_start();
        let bracket_pos = &positions[start..start + layout.bracket_tokens()];
        let mod_rope = rope_angles(bracket_pos, cfg.mod_dim / cfg.mod_heads, cfg.rope_base)?;
        let feats: Vec<f64> = layout
            .evs
            .iter()
            .flat_map(|&ev| ev_features(ev, cfg.ev_frequencies))
            .collect();
        let width = 2 * cfg.ev_frequencies + 1;
        Ok(SeqContext {
            mask: Rc::new(build_mask(&layout)?),
            mod_mask: Rc::new(AttnMask::full(layout.bracket_tokens())),
            rope: Rc::new(rope),
            mod_rope: Rc::new(mod_rope),
            ev_features: Tensor::new(vec![layout.brackets(), width], feats)?,
            bracket_of_token: layout.bracket_of_token(),
            layout,
        })
    }
}

/// Network inputs for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a> {
    /// Noisy bracket latents `[K·L, p·p·3]`, bracket-major.
    pub latents: &'a Tensor,
    /// Noisy radiance token, present iff the layout has one.
    pub radiance: Option<&'a [f64]>,
    /// Padded descriptor ids.
    pub text: &'a [usize],
    pub t: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Velocity {
    pub img: Var,
    pub rad: Option<Var>,
}

/// Binds a parameter store to one tape.
///
/// Parameters are recorded lazily on first use; those in trainable groups
/// become gradient leaves. With `adapters` off the network runs the base
/// weights alone, ignoring LoRA, modulation and layer embeddings.
pub struct Model<'a> {
    cfg: &'a ModelConfig,
    store: &'a ParamStore,
    adapters: bool,
    trainable: Vec<bool>,
    vars: Vec<Option<Var>>,
}

impl<'a> Model<'a> {
    pub fn new(cfg: &'a ModelConfig, store: &'a ParamStore, adapters: bool, trainable: &[Group]) -> Self {
        Model {
            cfg,
            store,
            adapters,
            trainable: store.params().iter().map(|p| trainable.contains(&p.group)).collect(),
            vars: vec![None; store.len()],
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    /// Uses `var` in place of the stored value of `name`.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))?;
        self.vars[i] = Some(var);
        Ok(())
    }

    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let i = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter '{name}'")))?;
        if let Some(v) = self.vars[i] {
            return Ok(v);
        }
        let v = tape.leaf(self.store.param(i).value.clone(), self.trainable[i]);
        self.vars[i] = Some(v);
        Ok(v)
    }

    /// Gradient of every recorded trainable parameter, indexed like the store.
    pub fn gradients(&self, tape: &Tape, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(v, &tr)| match v {
                Some(v) if tr && tape.requires_grad(*v) => Some(
                    grads
                        .take(*v)
                        .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape())),
                ),
                _ => None,
            })
            .collect()
    }

    /// `x·W + b`, plus `(α/r)·x·A·B` when the projection carries an adapter.
    pub fn linear(&mut self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.param(tape, &format!("{name}.w"))?;
        let b = self.param(tape, &format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        let mut y = tape.add_row(y, b)?;
        let a_name = format!("{name}.lora_a");
        if self.adapters && self.store.index_of(&a_name).is_some() {
            let a = self.param(tape, &a_name)?;
            let bb = self.param(tape, &format!("{name}.lora_b"))?;
            let h = tape.matmul(x, a)?;
            let delta = tape.matmul(h, bb)?;
            let delta = tape.scale(delta, self.cfg.lora_scale())?;
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }

    fn chunks(tape: &mut Tape, v: Var, n: usize, width: usize) -> Result<Vec<Var>> {
        (0..n).map(|i| Ok(tape.slice_cols(v, i * width, width)?)).collect()
    }

    /// `rms_norm(x)·(1 + scale) + shift`.
    fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let h = tape.rms_norm(x)?;
        let s = tape.add_scalar(scale, 1.0)?;
        let h = tape.mul_row(h, s)?;
        Ok(tape.add_row(h, shift)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        tape: &mut Tape,
        qkv: Var,
        width: usize,
        heads: usize,
        rope: &Rc<RotaryAngles>,
        mask: &Rc<AttnMask>,
    ) -> Result<Var> {
        let q = tape.slice_cols(qkv, 0, width)?;
        let k = tape.slice_cols(qkv, width, width)?;
        let v = tape.slice_cols(qkv, 2 * width, width)?;
        let q = tape.rotary(q, rope.clone())?;
        let k = tape.rotary(k, rope.clone())?;
        Ok(tape.attention(q, k, v, heads, mask.clone())?)
    }

    fn gated_residual(tape: &mut Tape, x: Var, delta: Var, gate: Var) -> Result<Var> {
        let g = tape.mul_row(delta, gate)?;
        Ok(tape.add(x, g)?)
    }

    /// Adds `delta` to the bracket rows `[start, start + len)` of `x`.
    fn add_rows(tape: &mut Tape, x: Var, start: usize, delta: Var) -> Result<Var> {
        let total = tape.value(x).rows();
        let len = tape.value(delta).rows();
        let mut parts = Vec::with_capacity(3);
        if start > 0 {
            parts.push(tape.slice_rows(x, 0, start)?);
        }
        let mid = tape.slice_rows(x, start, len)?;
        parts.push(tape.add(mid, delta)?);
        if start + len < total {
            parts.push(tape.slice_rows(x, start + len, total - start - len)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(tape.concat_rows(&parts)?)
    }

    /// Per-bracket `[γ ; β]` rows computed from EV Fourier features.
    pub fn modulation_table(&mut self, tape: &mut Tape, pfx: &str, ctx: &SeqContext) -> Result<Var> {
        let f = tape.constant(ctx.ev_features.clone());
        let h = self.linear(tape, f, &format!("{pfx}.ev1"))?;
        let h = tape.silu(h)?;
        self.linear(tape, h, &format!("{pfx}.ev2"))
    }

    /// Exposure-modulation branch over bracket tokens: EV-conditioned scale and
    /// shift, an auxiliary attention across all brackets, and a gated output.
    pub fn modulation_branch(&mut self, tape: &mut Tape, pfx: &str, ctx: &SeqContext, h: Var) -> Result<Var> {
        let d = self.cfg.dim;
        let table = self.modulation_table(tape, pfx, ctx)?;
        let rows = tape.gather_rows(table, &ctx.bracket_of_token)?;
        let gamma = tape.slice_cols(rows, 0, d)?;
        let beta = tape.slice_cols(rows, d, d)?;
        let hg = tape.mul(h, gamma)?;
        let hm = tape.add(h, hg)?;
        let hm = tape.add(hm, beta)?;
        let qkv = self.linear(tape, hm, &format!("{pfx}.qkv"))?;
        let a = Self::attend(tape, qkv, self.cfg.mod_dim, self.cfg.mod_heads, &ctx.mod_rope, &ctx.mod_mask)?;
        let o = self.linear(tape, a, &format!("{pfx}.out"))?;
        let gate = self.param(tape, &format!("{pfx}.gate"))?;
        Ok(tape.mul_row(o, gate)?)
    }

    fn mlp(&mut self, tape: &mut Tape, x: Var, pfx: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{pfx}.mlp1"))?;
        let h = tape.silu(h)?;
        self.linear(tape, h, &format!("{pfx}.mlp2"))
    }

    /// Joint attention with separate text and image stream weights. `img`
    /// holds the bracket tokens followed by the radiance token, if any.
    pub fn mm_block(
        &mut self,
        tape: &mut Tape,
        index: usize,
        ctx: &SeqContext,
        txt: Var,
        img: Var,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.dim;
        let pi = format!("mm{index}.img");
        let pt = format!("mm{index}.txt");
        let text_len = ctx.layout.text_len;
        let mi = self.linear(tape, cond, &format!("{pi}.ada"))?;
        let mi = Self::chunks(tape, mi, 6, d)?;
        let mt = self.linear(tape, cond, &format!("{pt}.ada"))?;
        let mt = Self::chunks(tape, mt, 6, d)?;

        let hi = Self::modulate(tape, img, mi[0], mi[1])?;
        let ht = Self::modulate(tape, txt, mt[0], mt[1])?;
        let qi = self.linear(tape, hi, &format!("{pi}.qkv"))?;
        let qt = self.linear(tape, ht, &format!("{pt}.qkv"))?;
        let qkv = tape.concat_rows(&[qt, qi])?;
        let a = Self::attend(tape, qkv, d, self.cfg.heads, &ctx.rope, &ctx.mask)?;
        let n = tape.value(a).rows();
        let at = tape.slice_rows(a, 0, text_len)?;
        let ai = tape.slice_rows(a, text_len, n - text_len)?;

        let oi = self.linear(tape, ai, &format!("{pi}.out"))?;
        let mut img = Self::gated_residual(tape, img, oi, mi[2])?;
        let ot = self.linear(tape, at, &format!("{pt}.out"))?;
        let mut txt = Self::gated_residual(tape, txt, ot, mt[2])?;

        if self.adapters && self.cfg.modulation.on_mm() {
            let hb = tape.slice_rows(hi, 0, ctx.layout.bracket_tokens())?;
            let delta = self.modulation_branch(tape, &format!("mm{index}.mod"), ctx, hb)?;
            img = Self::add_rows(tape, img, 0, delta)?;
        }

        let h = Self::modulate(tape, img, mi[3], mi[4])?;
        let f = self.mlp(tape, h, &pi)?;
        img = Self::gated_residual(tape, img, f, mi[5])?;
        let h = Self::modulate(tape, txt, mt[3], mt[4])?;
        let f = self.mlp(tape, h, &pt)?;
        txt = Self::gated_residual(tape, txt, f, mt[5])?;
        Ok((txt, img))
    }

    /// Single-stream block: parallel attention and MLP from one projection,
    /// plus the exposure-modulation branch on bracket tokens.
    pub fn single_block(&mut self, tape: &mut Tape, index: usize, ctx: &SeqContext, x: Var, cond: Var) -> Result<Var> {
        let d = self.cfg.dim;
        let p = format!("single{index}");
        let m = self.linear(tape, cond, &format!("{p}.ada"))?;
        let m = Self::chunks(tape, m, 3, d)?;
        let h = Self::modulate(tape, x, m[0], m[1])?;
        let l1 = self.linear(tape, h, &format!("{p}.lin1"))?;
        let qkv = tape.slice_cols(l1, 0, 3 * d)?;
        let a = Self::attend(tape, qkv, d, self.cfg.heads, &ctx.rope, &ctx.mask)?;
        let f = tape.slice_cols(l1, 3 * d, 2 * d)?;
        let f = tape.silu(f)?;
        let cat = tape.concat_cols(&[a, f])?;
        let o = self.linear(tape, cat, &format!("{p}.lin2"))?;
        let mut x = Self::gated_residual(tape, x, o, m[2])?;
        if self.adapters && self.cfg.modulation.on_single() {
            let start = ctx.layout.bracket_start();
            let hb = tape.slice_rows(h, start, ctx.layout.bracket_tokens())?;
            let delta = self.modulation_branch(tape, &format!("{p}.mod"), ctx, hb)?;
            x = Self::add_rows(tape, x, start, delta)?;
        }
        Ok(x)
    }

    /// Conditioning vector from time and the pooled caption.
    pub fn condition(&mut self, tape: &mut Tape, t: f64, txt: Var) -> Result<Var> {
        let feats = Tensor::new(vec![1, self.cfg.time_features], time_features(t, self.cfg.time_features))?;
        let f = tape.constant(feats);
        let h = self.linear(tape, f, "time.l1")?;
        let h = tape.silu(h)?;
        let temb = self.linear(tape, h, "time.l2")?;
        let pooled = tape.mean_rows(txt)?;
        let pooled = self.linear(tape, pooled, "txt.pool")?;
        let c = tape.add(temb, pooled)?;
        Ok(tape.silu(c)?)
    }

    pub fn embed_text(&mut self, tape: &mut Tape, text: &[usize]) -> Result<Var> {
        if text.len() != self.cfg.text_len {
            return Err(Error::Shape(format!(
                "{} text tokens, expected {}",
                text.len(),
                self.cfg.text_len
            )));
        }
        if let Some(bad) = text.iter().find(|&&id| id > self.cfg.vocab) {
            return Err(Error::InvalidArgument(format!("text token {bad} outside the vocabulary")));
        }
        let table = self.param(tape, "txt.emb")?;
        Ok(tape.gather_rows(table, text)?)
    }

    /// Velocity for every bracket token and for the radiance token.
    pub fn forward(&mut self, tape: &mut Tape, ctx: &SeqContext, input: StepInput<'_>) -> Result<Velocity> {
        let layout = &ctx.layout;
        let c = self.cfg.latent_dim();
        let nbt = layout.bracket_tokens();
        if input.latents.shape() != [nbt, c] {
            return Err(Error::Shape(format!(
                "latents {:?}, expected [{nbt}, {c}]",
                input.latents.shape()
            )));
        }
        if input.radiance.is_some() != layout.radiance {
            return Err(Error::InvalidArgument("radiance token presence does not match the layout".into()));
        }
        if !(0.0..=1.0).contains(&input.t) {
            return Err(Error::InvalidArgument(format!("flow time {} outside [0, 1]", input.t)));
        }

        let txt = self.embed_text(tape, input.text)?;
        let cond = self.condition(tape, input.t, txt)?;
        let z = tape.constant(input.latents.clone());
        let mut img = self.linear(tape, z, "img.in")?;
        if self.adapters && self.cfg.rope_mode.uses_layer_embed() {
            let table = self.param(tape, "layer.emb")?;
            let slots: Vec<usize> = ctx.bracket_of_token.iter().map(|&b| layout.slots[b]).collect();
            let le = tape.gather_rows(table, &slots)?;
            img = tape.add(img, le)?;
        }
        if let Some(r) = input.radiance {
            if r.len() != self.cfg.dim {
                return Err(Error::Shape(format!("radiance token of width {}", r.len())));
            }
            let r = tape.constant(Tensor::new(vec![1, r.len()], r.to_vec())?);
            let r = self.linear(tape, r, "rad.in")?;
            img = tape.concat_rows(&[img, r])?;
        }

        let mut txt = txt;
        for b in 0..self.cfg.mm_blocks {
            (txt, img) = self.mm_block(tape, b, ctx, txt, img, cond)?;
        }
        let mut x = tape.concat_rows(&[txt, img])?;
        for b in 0..self.cfg.single_blocks {
            x = self.single_block(tape, b, ctx, x, cond)?;
        }

        let d = self.cfg.dim;
        let m = self.linear(tape, cond, "final.ada")?;
        let m = Self::chunks(tape, m, 2, d)?;
        let xb = tape.slice_rows(x, layout.bracket_start(), nbt)?;
        let h = Self::modulate(tape, xb, m[0], m[1])?;
        let u_img = self.linear(tape, h, "final.out")?;
        let skip = self.linear(tape, z, "final.skip")?;
        let u_img = tape.add(u_img, skip)?;

        let u_rad = match layout.radiance_index() {
            Some(ri) => {
                let xt = tape.slice_rows(x, 0, layout.text_len)?;
                let pooled = tape.mean_rows(xt)?;
                let xr = tape.slice_rows(x, ri, 1)?;
                let xr = tape.rms_norm(xr)?;
                let cat = tape.concat_cols(&[pooled, xr])?;
                Some(self.linear(tape, cat, "rad.out")?)
            }
            None => None,
        };
        Ok(Velocity { img: u_img, rad: u_rad })
    }
}

/// Evaluates the velocity field without recording gradients.
pub fn velocity(
    cfg: &ModelConfig,
    store: &ParamStore,
    ctx: &SeqContext,
    adapters: bool,
    input: StepInput<'_>,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut model = Model::new(cfg, store, adapters, &[]);
    let v = model.forward(&mut tape, ctx, input)?;
    let img = tape.value(v.img).clone();
    let rad = v.rad.map(|r| tape.value(r).data().to_vec());
    Ok((img, rad))
}
