use std::rc::Rc;

use bf_tensor::{Tape, Var};

use super::config::{LossWeights, ModelConfig};
use super::tokens::unpatch_order;
use crate::{Error, Result};

/// Mean squared error over image-token velocities.
pub fn loss_img(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.l2_loss(pred, target)?)
}

/// Mean squared error of the radiance-token velocity.
pub fn loss_rad(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.l2_loss(pred, target)?)
}

/// `Σ_k mean |I_k / 2^{ev_k} − I_{k0}|` over frames given as flat pixel rows
/// in image order.
pub fn loss_bracket_frames(tape: &mut Tape, frames: &[Var], ev_list: &[f64]) -> Result<Var> {
    if frames.len() != ev_list.len() || frames.is_empty() {
        return Err(Error::Shape(format!("{} frames for {} EVs", frames.len(), ev_list.len())));
    }
    let base = ev_list
        .iter()
        .position(|&e| e == 0.0)
        .ok_or_else(|| Error::InvalidEvList("EV list has no 0 entry".into()))?;
    let mut total: Option<Var> = None;
    for (&ev, &f) in ev_list.iter().zip(frames) {
        let scaled = tape.scale(f, (-ev).exp2())?;
        let term = tape.l1_loss(scaled, frames[base])?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("at least one frame"))
}

/// Bracket consistency of the clean-latent estimate `ẑ₀ = z_t − t·û`,
/// decoded to clipped pixels.
pub fn loss_bracket(tape: &mut Tape, z0_hat: Var, cfg: &ModelConfig) -> Result<Var> {
    let k = cfg.brackets();
    let per = cfg.tokens_per_bracket() * cfg.latent_dim();
    if tape.value(z0_hat).numel() != k * per {
        return Err(Error::Shape(format!(
            "{:?} latents for {k} brackets",
            tape.value(z0_hat).shape()
        )));
    }
    let inv = unpatch_order(cfg.height, cfg.width, cfg.patch)?;
    let pixels = tape.add_scalar(z0_hat, 1.0)?;
    let pixels = tape.scale(pixels, 0.5)?;
    let pixels = tape.clip01(pixels)?;
    let frames = (0..k)
        .map(|b| {
            let idx: Vec<usize> = inv.iter().map(|&i| b * per + i).collect();
            Ok(tape.gather(pixels, Rc::new(idx), &[1, per])?)
        })
        .collect::<Result<Vec<_>>>()?;
    loss_bracket_frames(tape, &frames, &cfg.ev_list)
}

/// `L_img + λ_rad·L_rad + λ_bracket·L_bracket`; absent terms count as 0.
pub fn total_loss(tape: &mut Tape, img: Var, rad: Option<Var>, bracket: Option<Var>, w: LossWeights) -> Result<Var> {
    let mut total = img;
    if let Some(r) = rad {
        let r = tape.scale(r, w.radiance)?;
        total = tape.add(total, r)?;
    }
    if let Some(b) = bracket {
        let b = tape.scale(b, w.bracket)?;
        total = tape.add(total, b)?;
    }
    Ok(total)
}
