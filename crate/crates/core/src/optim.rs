//! Trainable parameters, Xavier initialization, Adam, and checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn grad(&self, i: usize) -> Option<&Tensor> {
        self.params[i].grad.as_ref()
    }

    pub(crate) fn ensure_grad(&mut self, i: usize) {
        let p = &mut self.params[i];
        if p.grad.is_none() {
            p.grad = Some(Tensor::zeros(p.value.rows(), p.value.cols()));
        }
    }

    pub(crate) fn add_grad(&mut self, i: usize, g: &Tensor) {
        self.ensure_grad(i);
        self.params[i].grad.as_mut().unwrap().add_scaled(g, 1.0);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// `Σ_θ ‖θ‖²` over every entry.
    pub fn squared_norm(&self) -> f64 {
        self.params.iter().map(|p| p.value.squared_norm()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_vec(rows, cols, data).expect("buffer sized to shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = |p: &Param| Tensor::zeros(p.value.rows(), p.value.cols());
        Adam {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update; clears the gradients afterwards.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Consistency(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            let Some(g) = p.grad.take() else {
                // zero gradient still decays the moments
                self.m[i].data_mut().iter_mut().for_each(|m| *m *= c.beta1);
                self.v[i].data_mut().iter_mut().for_each(|v| *v *= c.beta2);
                update(&mut p.value, &self.m[i], &self.v[i], c, bc1, bc2);
                continue;
            };
            if g.shape() != p.value.shape() {
                return Err(Error::Consistency(format!(
                    "gradient shape mismatch for {}",
                    p.name
                )));
            }
            for ((m, v), &gv) in self.m[i]
                .data_mut()
                .iter_mut()
                .zip(self.v[i].data_mut().iter_mut())
                .zip(g.data())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gv;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gv * gv;
            }
            update(&mut p.value, &self.m[i], &self.v[i], c, bc1, bc2);
            if !p.value.all_finite() {
                return Err(Error::Numeric(format!(
                    "parameter {} became non-finite",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

fn update(value: &mut Tensor, m: &Tensor, v: &Tensor, c: AdamConfig, bc1: f64, bc2: f64) {
    for ((x, &m), &v) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
        let mhat = m / bc1;
        let vhat = v / bc2;
        *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, in values.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    blob: String,
    params: Vec<ManifestEntry>,
}

const CHECKPOINT_FORMAT: &str = "rand-gad-params/1";

/// Writes `<stem>.json` (names and shapes) and `<stem>.bin` (little-endian
/// `f64` values, parameters back to back).
pub fn save_checkpoint(params: &ParamSet, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for p in params.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            offset,
        });
        offset += p.value.len();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        blob: blob_name.clone(),
        params: entries,
    };
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let blob_path = dir.join(blob_name);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<ParamSet> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", json_path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unknown checkpoint format {:?}",
            manifest.format
        )));
    }
    let blob_path = dir.join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(
            "checkpoint blob length is not a multiple of 8".into(),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = ParamSet::new();
    for e in manifest.params {
        let end = e.offset + e.rows * e.cols;
        let slice = values
            .get(e.offset..end)
            .ok_or_else(|| Error::Format(format!("parameter {} overruns the blob", e.name)))?;
        params.push(e.name, Tensor::from_vec(e.rows, e.cols, slice.to_vec())?);
    }
    Ok(params)
}
