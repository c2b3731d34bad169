//! Log radiance scale ⇄ token conversion.
//!
//! `s_l = log10(s)` is quantized into 20 half-open bins of width 0.5 over
//! `[-6, 4)` (values outside are clamped to the end bins), embedded as a token
//! through a projection `W` with one row per bin, and decoded by taking the
//! softmax of `token · Wᵀ` and the expectation over bin centers.

use bf_tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub const LOG_RADIANCE_MIN: f64 = -6.0;
pub const LOG_RADIANCE_MAX: f64 = 4.0;
pub const NUM_BINS: usize = 20;
pub const BIN_WIDTH: f64 = (LOG_RADIANCE_MAX - LOG_RADIANCE_MIN) / NUM_BINS as f64;

pub fn bin_center(index: usize) -> f64 {
    LOG_RADIANCE_MIN + (index as f64 + 0.5) * BIN_WIDTH
}

pub fn bin_centers() -> [f64; NUM_BINS] {
    std::array::from_fn(bin_center)
}

/// Bin index of a log radiance value.
pub fn quantize(log_radiance: f64) -> Result<usize> {
    if !log_radiance.is_finite() {
        return Err(Error::NonFinite("log radiance"));
    }
    let raw = ((log_radiance - LOG_RADIANCE_MIN) / BIN_WIDTH).floor();
    Ok(raw.clamp(0.0, (NUM_BINS - 1) as f64) as usize)
}

pub fn one_hot(index: usize) -> [f64; NUM_BINS] {
    let mut code = [0.0; NUM_BINS];
    code[index] = 1.0;
    code
}

/// Expectation of bin centers under `softmax(logits)`.
pub fn decode_logits(logits: &[f64]) -> Result<f64> {
    if logits.len() != NUM_BINS {
        return Err(Error::Shape(format!("{} logits for {NUM_BINS} bins", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("radiance logits"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / total * bin_center(i))
        .sum())
}

/// Shared bin projection, one `dim`-wide row per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceCodec {
    projection: Tensor,
}

impl RadianceCodec {
    pub fn new(projection: Tensor) -> Result<Self> {
        if projection.shape().len() != 2 || projection.shape()[0] != NUM_BINS {
            return Err(Error::Shape(format!(
                "codec projection must be [{NUM_BINS}, d], got {:?}",
                projection.shape()
            )));
        }
        Ok(RadianceCodec { projection })
    }

    /// Gaussian rows made mutually orthogonal and rescaled to norm `sqrt(dim)`,
    /// so every bin gets a distinct token with unit per-feature variance and
    /// decoding a clean token is sharp. Requires `dim ≥ 20`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim < NUM_BINS {
            return Err(Error::InvalidArgument(format!(
                "token width {dim} is smaller than the {NUM_BINS} bins"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(NUM_BINS);
        while rows.len() < NUM_BINS {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            // Two Gram-Schmidt passes keep the rows orthogonal to rounding.
            for _ in 0..2 {
                for r in &rows {
                    let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    for (a, b) in v.iter_mut().zip(r) {
                        *a -= d * b;
                    }
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
        let scale = (dim as f64).sqrt();
        let data = rows.into_iter().flatten().map(|a| a * scale).collect();
        RadianceCodec::new(Tensor::new(vec![NUM_BINS, dim], data)?)
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    /// `t_s = s_d · W`; rejects anything that is not a one-hot code.
    pub fn embed(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != NUM_BINS {
            return Err(Error::Shape(format!("{} entries in a {NUM_BINS}-bin code", code.len())));
        }
        let ones = code.iter().filter(|&&v| v == 1.0).count();
        let zeros = code.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != NUM_BINS - 1 {
            return Err(Error::InvalidArgument("radiance code must be one-hot".into()));
        }
        let idx = code.iter().position(|&v| v == 1.0).expect("checked");
        Ok(self.row(idx).to_vec())
    }

    pub fn embed_log_radiance(&self, log_radiance: f64) -> Result<Vec<f64>> {
        self.embed(&one_hot(quantize(log_radiance)?))
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let d = self.dim();
        &self.projection.data()[index * d..(index + 1) * d]
    }

    /// `token · Wᵀ`
    pub fn logits(&self, token: &[f64]) -> Result<Vec<f64>> {
        if token.len() != self.dim() {
            return Err(Error::Shape(format!(
                "token of width {} for a {}-wide codec",
                token.len(),
                self.dim()
            )));
        }
        if token.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("radiance token"));
        }
        Ok((0..NUM_BINS)
            .map(|i| self.row(i).iter().zip(token).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Predicted `s_l`.
    pub fn expectation_decode(&self, token: &[f64]) -> Result<f64> {
        decode_logits(&self.logits(token)?)
    }

    pub fn decode_scale(&self, token: &[f64]) -> Result<f64> {
        Ok(10f64.powf(self.expectation_decode(token)?))
    }
}
