use bf_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::model::{velocity, SeqContext, StepInput};
use super::params::ParamStore;
use super::tokens::{decode_frames, SeqLayout};
use super::train::mix_seed;
use crate::linear_image::BracketSet;
use crate::scene::pad_caption;
use crate::{Error, Result};

/// Independent noise seeds for the bracket latents and the radiance token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSeeds {
    pub bracket: u64,
    pub radiance: u64,
}

impl SampleSeeds {
    pub fn from_seed(seed: u64) -> Self {
        SampleSeeds {
            bracket: mix_seed(seed, 0xb7ac),
            radiance: mix_seed(seed, 0x7ad),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub brackets: BracketSet,
    /// Expectation-decoded log10 radiance scale.
    pub log_radiance: f64,
    pub latents: Tensor,
    pub radiance_token: Vec<f64>,
}

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Euler integration of `dz/dt = u(z, t)` from `t = 1` down to `t = 0` in
/// `steps` uniform steps.
pub fn euler_integrate(
    mut z: Vec<f64>,
    steps: usize,
    mut field: impl FnMut(&[f64], f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = (steps - i) as f64 / steps as f64;
        let u = field(&z, t)?;
        if u.len() != z.len() {
            return Err(Error::Shape(format!("velocity of length {} for {} values", u.len(), z.len())));
        }
        for (a, b) in z.iter_mut().zip(&u) {
            *a -= dt * b;
        }
    }
    Ok(z)
}

/// Generates a bracket stack and a radiance estimate for a caption.
pub fn sample(cfg: &ModelConfig, params: &ParamStore, caption: &[usize], seeds: SampleSeeds, steps: usize) -> Result<Sample> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    let text = pad_caption(caption, cfg.text_len);
    let ctx = SeqContext::new(cfg, SeqLayout::full(cfg))?;
    let shape = vec![ctx.layout.bracket_tokens(), cfg.latent_dim()];
    let n_img = shape[0] * shape[1];
    let mut z = noise(seeds.bracket, n_img);
    z.extend(noise(seeds.radiance, cfg.dim));

    let out = euler_integrate(z, steps, |state, t| {
        let latents = Tensor::new(shape.clone(), state[..n_img].to_vec())?;
        let input = StepInput {
            latents: &latents,
            radiance: Some(&state[n_img..]),
            text: &text,
            t,
        };
        let (u, r) = velocity(cfg, params, &ctx, true, input)?;
        let mut all = u.into_data();
        all.extend(r.expect("layout has a radiance token"));
        Ok(all)
    })?;

    let latents = Tensor::new(shape, out[..n_img].to_vec())?;
    let radiance_token = out[n_img..].to_vec();
    let frames = decode_frames(&latents, cfg.brackets(), cfg.height, cfg.width, cfg.patch)?;
    let codec = params.codec()?;
    Ok(Sample {
        brackets: BracketSet::new(cfg.ev_list.clone(), frames)?,
        log_radiance: codec.expectation_decode(&radiance_token)?,
        latents,
        radiance_token,
    })
}
