#![allow(dead_code)]

use bf_tensor::{Tape, Tensor, Var};
use bracketflow::dit::{init_params, Group, ModelConfig, ParamStore};
use bracketflow::linear_image::{LinearImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 8×8 image, two 12-wide heads, one block of each kind.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        dim: 24,
        heads: 2,
        mm_blocks: 1,
        single_blocks: 1,
        lora_rank: 2,
        lora_alpha: 4.0,
        mod_dim: 12,
        mod_heads: 1,
        time_features: 8,
        ev_frequencies: 2,
        ..ModelConfig::default()
    }
}

/// Fresh parameters with LoRA `B`, modulation gates and layer embeddings
/// replaced by random values so every adapter path is live.
pub fn live_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut store = init_params(cfg, &mut r).unwrap();
    for i in 0..store.len() {
        let p = store.param(i);
        let live = p.name.ends_with(".lora_b") || p.name.ends_with(".gate") || p.name == "layer.emb";
        if live {
            let shape = p.value.shape().to_vec();
            *store.value_mut(i) = Tensor::randn(&shape, 0.3, &mut r);
        }
    }
    store
}

pub fn randomize_group(store: &mut ParamStore, group: Group, std: f64, seed: u64) {
    let mut r = rng(seed);
    for i in 0..store.len() {
        if store.param(i).group == group {
            let shape = store.param(i).value.shape().to_vec();
            *store.value_mut(i) = Tensor::randn(&shape, std, &mut r);
        }
    }
}

/// `mean(y ⊙ w)` with fixed random weights, reducing any output to a scalar.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> bf_tensor::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = tape.mul(y, w)?;
    tape.mean(p)
}

pub fn random_image(w: usize, h: usize, lo: f64, hi: f64, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let data = (0..w * h * 3).map(|_| r.gen_range(lo..hi)).collect();
    RgbImage::new(w, h, data).unwrap()
}

/// Per-pixel log-uniform values in `[lo, hi)`.
pub fn log_uniform_image(w: usize, h: usize, lo: f64, hi: f64, seed: u64) -> LinearImage {
    let mut r = rng(seed);
    let (a, b) = (lo.log2(), hi.log2());
    let data = (0..w * h * 3).map(|_| r.gen_range(a..b).exp2()).collect();
    LinearImage::new(RgbImage::new(w, h, data).unwrap()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
