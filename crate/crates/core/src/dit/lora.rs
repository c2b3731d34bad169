use bf_tensor::Tensor;

use super::config::ModelConfig;
use super::params::{lora_targets, ParamStore};
use crate::{Error, Result};

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a.data()[i * k + p];
            for j in 0..n {
                out[i * n + j] += x * b.data()[p * n + j];
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("finite product")
}

/// Folds every adapter into its dense weight, `W' = W + (α/r)·A·B`, and drops
/// the adapter pairs.
pub fn lora_merge(cfg: &ModelConfig, params: &ParamStore) -> Result<ParamStore> {
    let targets = lora_targets(cfg);
    let mut merged = ParamStore::new();
    for p in params.params() {
        if p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b") {
            continue;
        }
        let mut value = p.value.clone();
        if let Some(target) = p.name.strip_suffix(".w").filter(|t| targets.iter().any(|x| x == t)) {
            let a = params.require(&format!("{target}.lora_a"))?;
            let b = params.require(&format!("{target}.lora_b"))?;
            if a.cols() != b.rows() || a.rows() != value.rows() || b.cols() != value.cols() {
                return Err(Error::Shape(format!(
                    "adapter of '{target}' has rank {} / {} for a {:?} weight",
                    a.cols(),
                    b.rows(),
                    value.shape()
                )));
            }
            let delta = matmul(a, b);
            let s = cfg.lora_scale();
            let data = value.data().iter().zip(delta.data()).map(|(w, d)| w + s * d).collect();
            value = Tensor::new(value.shape().to_vec(), data)?;
        }
        merged.insert(p.name.clone(), p.group, value)?;
    }
    Ok(merged)
}
