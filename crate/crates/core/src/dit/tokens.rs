//! Sequence layout: patch tokens, positions, rotary angles and the attention mask.

use bf_tensor::{AttnMask, RotaryAngles, Tensor};

use super::config::ModelConfig;
use crate::linear_image::RgbImage;
use crate::{Error, Result};

/// For each element of the token-major latent `[L, p·p·3]`, the index of the
/// interleaved pixel value it holds. Tokens run row-major over the patch grid;
/// features run `(dy, dx, channel)`.
pub fn patch_order(height: usize, width: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
        return Err(Error::Shape(format!("{height}x{width} image does not tile into {patch}px patches")));
    }
    let mut order = Vec::with_capacity(height * width * 3);
    for gi in 0..height / patch {
        for gj in 0..width / patch {
            for dy in 0..patch {
                for dx in 0..patch {
                    let (y, x) = (gi * patch + dy, gj * patch + dx);
                    for c in 0..3 {
                        order.push((y * width + x) * 3 + c);
                    }
                }
            }
        }
    }
    Ok(order)
}

/// Inverse of [`patch_order`]: for each pixel value, its latent position.
pub fn unpatch_order(height: usize, width: usize, patch: usize) -> Result<Vec<usize>> {
    let order = patch_order(height, width, patch)?;
    let mut inv = vec![0; order.len()];
    for (latent, &pixel) in order.iter().enumerate() {
        inv[pixel] = latent;
    }
    Ok(inv)
}

pub fn patchify(image: &RgbImage, patch: usize) -> Result<Tensor> {
    let order = patch_order(image.height(), image.width(), patch)?;
    let src = image.data();
    let data = order.iter().map(|&i| src[i]).collect();
    let tokens = (image.height() / patch) * (image.width() / patch);
    Ok(Tensor::new(vec![tokens, patch * patch * 3], data)?)
}

pub fn unpatchify(tokens: &Tensor, height: usize, width: usize, patch: usize) -> Result<RgbImage> {
    let inv = unpatch_order(height, width, patch)?;
    if tokens.numel() != inv.len() {
        return Err(Error::Shape(format!(
            "{:?} tokens do not fill a {height}x{width} image",
            tokens.shape()
        )));
    }
    let src = tokens.data();
    RgbImage::new(width, height, inv.iter().map(|&i| src[i]).collect())
}

/// Pixel values in `[0, 1]` map to latents in `[-1, 1]`.
pub fn to_latent(v: f64) -> f64 {
    2.0 * v - 1.0
}

pub fn from_latent(z: f64) -> f64 {
    (z + 1.0) / 2.0
}

/// Patchified latents of several frames stacked bracket-major.
pub fn encode_frames(frames: &[RgbImage], patch: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for f in frames {
        let t = patchify(f, patch)?;
        rows += t.rows();
        cols = t.cols();
        data.extend(t.data().iter().map(|&v| to_latent(v)));
    }
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Inverse of [`encode_frames`] followed by clipping to `[0, 1]`.
pub fn decode_frames(latents: &Tensor, count: usize, height: usize, width: usize, patch: usize) -> Result<Vec<RgbImage>> {
    let per = latents.numel() / count.max(1);
    if count == 0 || per * count != latents.numel() {
        return Err(Error::Shape(format!("{:?} latents for {count} frames", latents.shape())));
    }
    let cols = latents.cols();
    latents
        .data()
        .chunks(per)
        .map(|chunk| {
            let pix: Vec<f64> = chunk.iter().map(|&z| from_latent(z).clamp(0.0, 1.0)).collect();
            unpatchify(&Tensor::new(vec![per / cols, cols], pix)?, height, width, patch)
        })
        .collect()
}

/// Which tokens a sequence holds: text, then the listed brackets, then
/// optionally the radiance token.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub text_len: usize,
    pub tokens_per_bracket: usize,
    pub grid: (usize, usize),
    /// EV of each bracket present.
    pub evs: Vec<f64>,
    /// Bracket index used for positions and layer embeddings.
    pub slots: Vec<usize>,
    pub radiance: bool,
}

impl SeqLayout {
    /// All brackets plus the radiance token.
    pub fn full(cfg: &ModelConfig) -> Self {
        SeqLayout {
            text_len: cfg.text_len,
            tokens_per_bracket: cfg.tokens_per_bracket(),
            grid: cfg.grid(),
            evs: cfg.ev_list.clone(),
            slots: (0..cfg.brackets()).collect(),
            radiance: true,
        }
    }

    /// The 0 EV bracket alone, used while pretraining the base weights.
    pub fn base_only(cfg: &ModelConfig) -> Self {
        SeqLayout {
            text_len: cfg.text_len,
            tokens_per_bracket: cfg.tokens_per_bracket(),
            grid: cfg.grid(),
            evs: vec![0.0],
            slots: vec![cfg.base_index()],
            radiance: false,
        }
    }

    pub fn brackets(&self) -> usize {
        self.evs.len()
    }

    pub fn bracket_tokens(&self) -> usize {
        self.brackets() * self.tokens_per_bracket
    }

    pub fn len(&self) -> usize {
        self.text_len + self.bracket_tokens() + usize::from(self.radiance)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bracket_start(&self) -> usize {
        self.text_len
    }

    pub fn radiance_index(&self) -> Option<usize> {
        self.radiance.then(|| self.text_len + self.bracket_tokens())
    }

    /// Position of the 0 EV bracket within this layout.
    pub fn base_position(&self) -> Option<usize> {
        self.evs.iter().position(|&e| e == 0.0)
    }

    /// Bracket (position in `evs`) of each bracket token.
    pub fn bracket_of_token(&self) -> Vec<usize> {
        (0..self.bracket_tokens()).map(|t| t / self.tokens_per_bracket).collect()
    }

    pub fn token_class(&self, token: usize) -> TokenClass {
        if token < self.text_len {
            TokenClass::Text
        } else if Some(token) == self.radiance_index() {
            TokenClass::Radiance
        } else {
            TokenClass::Bracket((token - self.text_len) / self.tokens_per_bracket)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenClass {
    Text,
    /// Position within the layout's bracket list.
    Bracket(usize),
    Radiance,
}

/// Per-token `(index, i, j)`. Text tokens sit at the origin; the radiance
/// token has no position and is never rotated.
pub fn build_positions(layout: &SeqLayout, bracket_index: bool) -> Vec<Option<[usize; 3]>> {
    let (_, gw) = layout.grid;
    (0..layout.len())
        .map(|t| match layout.token_class(t) {
            TokenClass::Text => Some([0, 0, 0]),
            TokenClass::Radiance => None,
            TokenClass::Bracket(b) => {
                let local = (t - layout.text_len) % layout.tokens_per_bracket;
                let k = if bracket_index { layout.slots[b] } else { 0 };
                Some([k, local / gw, local % gw])
            }
        })
        .collect()
}

/// Rotary angles for a head dim split into three equal groups, one per axis.
/// Within a group, pair `q` turns at `base^(-2q / group)` radians per unit.
pub fn rope_angles(positions: &[Option<[usize; 3]>], head_dim: usize, base: f64) -> Result<RotaryAngles> {
    if head_dim == 0 || head_dim % 6 != 0 {
        return Err(Error::Shape(format!(
            "head dim {head_dim} cannot be split into three even rotary groups"
        )));
    }
    let group = head_dim / 3;
    let pairs = head_dim / 2;
    let freqs: Vec<f64> = (0..group / 2).map(|q| base.powf(-2.0 * q as f64 / group as f64)).collect();
    let mut angles = Vec::with_capacity(positions.len() * pairs);
    for pos in positions {
        for axis in 0..3 {
            for f in &freqs {
                angles.push(pos.map_or(0.0, |p| p[axis] as f64 * f));
            }
        }
    }
    Ok(RotaryAngles::new(positions.len(), pairs, &angles)?)
}

/// Allowed attention between token classes.
///
/// Text and bracket tokens see each other and never the radiance token; the
/// radiance token sees only text and the 0 EV bracket.
pub fn mask_allows(layout: &SeqLayout, query: usize, key: usize) -> bool {
    let base = layout.base_position();
    match (layout.token_class(query), layout.token_class(key)) {
        (_, TokenClass::Radiance) => false,
        (TokenClass::Radiance, TokenClass::Text) => true,
        (TokenClass::Radiance, TokenClass::Bracket(b)) => Some(b) == base,
        _ => true,
    }
}

pub fn build_mask(layout: &SeqLayout) -> Result<AttnMask> {
    Ok(AttnMask::from_allow(layout.len(), |q, k| mask_allows(layout, q, k))?)
}
