use bf_tensor::{Tape, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, TrainConfig};
use super::loss::{loss_bracket, loss_img, loss_rad, total_loss};
use super::model::{Model, SeqContext, StepInput};
use super::params::{init_params, Group, ParamStore};
use super::tokens::{encode_frames, SeqLayout};
use crate::linear_image::BracketSet;
use crate::radiance_codec::{one_hot, quantize};
use crate::scene::{pad_caption, DatasetRecord};
use crate::{Error, Result};

/// One training pair in latent form.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// All brackets, `[K·L, p·p·3]`.
    pub latents: Tensor,
    /// The 0 EV bracket alone.
    pub base_latents: Tensor,
    pub text: Vec<usize>,
    pub log_radiance: f64,
}

impl Example {
    pub fn from_record(record: &DatasetRecord, cfg: &ModelConfig) -> Result<Self> {
        Self::new(&record.brackets, &record.caption, record.log_radiance, cfg)
    }

    pub fn new(brackets: &BracketSet, caption: &[usize], log_radiance: f64, cfg: &ModelConfig) -> Result<Self> {
        if brackets.ev_list() != cfg.ev_list.as_slice() {
            return Err(Error::Config(format!(
                "bracket EVs {:?} differ from the model's {:?}",
                brackets.ev_list(),
                cfg.ev_list
            )));
        }
        if (brackets.width(), brackets.height()) != (cfg.width, cfg.height) {
            return Err(Error::Shape(format!(
                "{}x{} brackets for a {}x{} model",
                brackets.width(),
                brackets.height(),
                cfg.width,
                cfg.height
            )));
        }
        let frames = brackets.frames();
        Ok(Example {
            latents: encode_frames(frames, cfg.patch)?,
            base_latents: encode_frames(&frames[cfg.base_index()..=cfg.base_index()], cfg.patch)?,
            text: pad_caption(caption, cfg.text_len),
            log_radiance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Base weights on 0 EV frames.
    Pretrain,
    /// Adapters, modulation and radiance head on full bracket sets.
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }

    pub fn groups(self) -> &'static [Group] {
        match self {
            Phase::Pretrain => &[Group::Base],
            Phase::Finetune => &[Group::Lora, Group::Modulation, Group::Radiance, Group::LayerEmbed],
        }
    }
}

/// Batch means of each loss term for one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub phase: Phase,
    pub img: f64,
    pub rad: f64,
    pub bracket: f64,
    pub total: f64,
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam with decoupled weight decay; moments exist only for parameters that
/// have been updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(params: usize) -> Self {
        AdamW {
            moments: vec![None; params],
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], cfg: &TrainConfig) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let lr = match store.param(i).group {
                Group::Base => cfg.lr_base,
                Group::Modulation => cfg.lr_modulation,
                Group::Codec => continue,
                Group::Lora | Group::Radiance | Group::LayerEmbed => cfg.lr_lora,
            };
            let n = g.numel();
            let mo = self.moments[i].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            mo.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(mo.t as i32);
            let c2 = 1.0 - cfg.beta2.powi(mo.t as i32);
            let p = store.value_mut(i);
            let mut data = p.data().to_vec();
            for (j, (&gj, x)) in g.data().iter().zip(data.iter_mut()).enumerate() {
                mo.m[j] = cfg.beta1 * mo.m[j] + (1.0 - cfg.beta1) * gj;
                mo.v[j] = cfg.beta2 * mo.v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = mo.m[j] / c1;
                let vhat = mo.v[j] / c2;
                *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
            }
            *p = Tensor::new(p.shape().to_vec(), data).map_err(|_| Error::NonFinite("parameter update"))?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer for deriving per-step seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Model, optimizer and step counter. All randomness of a step is derived
/// from `(seed, step)`, so a resumed run continues bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(train.seed, u64::MAX));
        let params = init_params(&model, &mut rng)?;
        let optimizer = AdamW::new(params.len());
        Ok(Trainer {
            model,
            train,
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn total_steps(&self) -> u64 {
        (self.train.pretrain_steps + self.train.finetune_steps) as u64
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.train.pretrain_steps as u64 {
            Phase::Pretrain
        } else {
            Phase::Finetune
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Draws the next batch from `data` and applies one update.
    pub fn step_once(&mut self, data: &[Example]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("no training examples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.train.seed, self.step));
        let b = self.train.batch.min(data.len());
        let batch: Vec<&Example> = sample(&mut rng, data.len(), b).into_iter().map(|i| &data[i]).collect();
        let phase = self.phase_at(self.step);
        self.train_step(phase, &batch, &mut rng)
    }

    /// One optimizer update on `batch` for `phase`.
    pub fn train_step(&mut self, phase: Phase, batch: &[&Example], rng: &mut ChaCha8Rng) -> Result<LossRecord> {
        let (record, grads) = self.loss_and_grads(phase, batch, rng)?;
        self.optimizer.update(&mut self.params, &grads, &self.train)?;
        self.step += 1;
        Ok(record)
    }

    /// Batch loss and its gradient with respect to the phase's groups.
    pub fn loss_and_grads(
        &self,
        phase: Phase,
        batch: &[&Example],
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossRecord, Vec<Option<Tensor>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let cfg = &self.model;
        let layout = match phase {
            Phase::Pretrain => SeqLayout::base_only(cfg),
            Phase::Finetune => SeqLayout::full(cfg),
        };
        let ctx = SeqContext::new(cfg, layout)?;
        let codec = self.params.codec()?;
        let mut tape = Tape::new();
        let mut model = Model::new(cfg, &self.params, phase == Phase::Finetune, phase.groups());
        let (mut sum_img, mut sum_rad, mut sum_br) = (0.0, 0.0, 0.0);
        let mut totals = Vec::with_capacity(batch.len());
        for ex in batch {
            let t: f64 = rng.gen_range(0.0..=1.0);
            let z0 = match phase {
                Phase::Pretrain => &ex.base_latents,
                Phase::Finetune => &ex.latents,
            };
            let z1 = gaussian(rng, z0.numel());
            let zt: Vec<f64> = z0.data().iter().zip(&z1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let target: Vec<f64> = z0.data().iter().zip(&z1).map(|(a, b)| b - a).collect();
            let zt = Tensor::new(z0.shape().to_vec(), zt)?;

            let rad = if phase == Phase::Finetune {
                let r0 = codec.embed(&one_hot(quantize(ex.log_radiance)?))?;
                let r1 = gaussian(rng, r0.len());
                let rt: Vec<f64> = r0.iter().zip(&r1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                let rtarget: Vec<f64> = r0.iter().zip(&r1).map(|(a, b)| b - a).collect();
                Some((rt, rtarget))
            } else {
                None
            };

            let input = StepInput {
                latents: &zt,
                radiance: rad.as_ref().map(|(rt, _)| rt.as_slice()),
                text: &ex.text,
                t,
            };
            let v = model.forward(&mut tape, &ctx, input)?;
            let target = tape.constant(Tensor::new(z0.shape().to_vec(), target)?);
            let li = loss_img(&mut tape, v.img, target)?;
            sum_img += tape.value(li).item()?;
            let (lr, lb) = match (phase, v.rad, rad) {
                (Phase::Finetune, Some(ur), Some((_, rtarget))) => {
                    let n = rtarget.len();
                    let rt = tape.constant(Tensor::new(vec![1, n], rtarget)?);
                    let lr = loss_rad(&mut tape, ur, rt)?;
                    let zt_var = tape.constant(zt.clone());
                    let step = tape.scale(v.img, t)?;
                    let z0_hat = tape.sub(zt_var, step)?;
                    let lb = loss_bracket(&mut tape, z0_hat, cfg)?;
                    sum_rad += tape.value(lr).item()?;
                    sum_br += tape.value(lb).item()?;
                    (Some(lr), Some(lb))
                }
                _ => (None, None),
            };
            totals.push(total_loss(&mut tape, li, lr, lb, self.train.weights)?);
        }
        let mut sum = totals[0];
        for &l in &totals[1..] {
            sum = tape.add(sum, l)?;
        }
        let n = batch.len() as f64;
        let loss = tape.scale(sum, 1.0 / n)?;
        let total = tape.value(loss).item()?;
        if !total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let mut grads = tape.backward(loss)?;
        let grads = model.gradients(&tape, &mut grads);
        let record = LossRecord {
            step: self.step + 1,
            phase,
            img: sum_img / n,
            rad: sum_rad / n,
            bracket: sum_br / n,
            total,
        };
        Ok((record, grads))
    }

    /// Runs to the configured step count, reporting each record.
    pub fn fit(&mut self, data: &[Example], mut on_step: impl FnMut(&LossRecord)) -> Result<()> {
        while !self.is_done() {
            let r = self.step_once(data)?;
            on_step(&r);
        }
        Ok(())
    }
}
