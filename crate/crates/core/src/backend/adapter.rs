//! Low-rank adapters on selected weight matrices.
//!
//! Each targeted matrix `W` of shape `[out, in]` gets a factor pair
//! `A: [rank, in]`, `B: [out, rank]`; the effective weight during forward
//! passes is `W + (alpha / rank) * B * A`. `B` starts at zero so a freshly
//! initialized adapter is an exact no-op.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::backend::tensor_file::TensorFile;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Weight matrices an adapter may target, applied to every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMatrix {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
}

impl TargetMatrix {
    pub fn name(&self) -> &'static str {
        match self {
            TargetMatrix::AttnQ => "attn_q",
            TargetMatrix::AttnK => "attn_k",
            TargetMatrix::AttnV => "attn_v",
            TargetMatrix::AttnO => "attn_o",
            TargetMatrix::MlpUp => "mlp_up",
            TargetMatrix::MlpDown => "mlp_down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "attn_q" => Ok(TargetMatrix::AttnQ),
            "attn_k" => Ok(TargetMatrix::AttnK),
            "attn_v" => Ok(TargetMatrix::AttnV),
            "attn_o" => Ok(TargetMatrix::AttnO),
            "mlp_up" => Ok(TargetMatrix::MlpUp),
            "mlp_down" => Ok(TargetMatrix::MlpDown),
            other => Err(Error::UnknownTarget(other.to_string())),
        }
    }

    /// Attention query/value projections: the default target set.
    pub fn defaults() -> Vec<TargetMatrix> {
        vec![TargetMatrix::AttnQ, TargetMatrix::AttnV]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<TargetMatrix>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: TargetMatrix::defaults(),
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("adapter target list is empty".into()));
        }
        Ok(())
    }
}

/// One factor pair for one `(layer, matrix)` site.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub layer: usize,
    pub target: TargetMatrix,
    /// `[rank, in_dim]`, gaussian-initialized.
    pub a: Vec<f64>,
    /// `[out_dim, rank]`, zero-initialized.
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Trainable low-rank delta plus the metadata binding it to a base model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub pairs: Vec<FactorPair>,
    pub base_fingerprint: u64,
    pub seed: u64,
}

impl AdapterState {
    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn pair_for(&self, layer: usize, target: TargetMatrix) -> Option<&FactorPair> {
        self.pairs.iter().find(|p| p.layer == layer && p.target == target)
    }

    /// Gaussian `A`, zero `B`. Factor layout is fixed by `(layers, dims)` of
    /// the base model, captured here via a shape callback so this module
    /// stays independent of the concrete transformer.
    pub fn init(
        config: AdapterConfig,
        n_layers: usize,
        dims_of: impl Fn(TargetMatrix) -> (usize, usize),
        base_fingerprint: u64,
        seed: u64,
    ) -> Result<AdapterState> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut pairs = Vec::new();
        for layer in 0..n_layers {
            for &target in &config.targets {
                let (out_dim, in_dim) = dims_of(target);
                let std = 1.0 / (in_dim as f64).sqrt();
                let a: Vec<f64> = (0..config.rank * in_dim)
                    .map(|_| rng.gaussian() * std)
                    .collect();
                let b = vec![0.0; out_dim * config.rank];
                pairs.push(FactorPair {
                    layer,
                    target,
                    a,
                    b,
                    in_dim,
                    out_dim,
                });
            }
        }
        Ok(AdapterState {
            config,
            pairs,
            base_fingerprint,
            seed,
        })
    }

    /// Dense delta `(alpha/rank) * B * A` for one pair.
    pub fn dense_delta(&self, pair: &FactorPair) -> Vec<f64> {
        let scale = self.scale();
        let r = self.config.rank;
        let mut delta = vec![0.0; pair.out_dim * pair.in_dim];
        for o in 0..pair.out_dim {
            for rho in 0..r {
                let b = pair.b[o * r + rho];
                if b == 0.0 {
                    continue;
                }
                let a_row = &pair.a[rho * pair.in_dim..(rho + 1) * pair.in_dim];
                let d_row = &mut delta[o * pair.in_dim..(o + 1) * pair.in_dim];
                for i in 0..pair.in_dim {
                    d_row[i] += scale * b * a_row[i];
                }
            }
        }
        delta
    }

    pub fn sgd_step(&mut self, grads: &AdapterGrads, lr: f64) {
        for (pair, g) in self.pairs.iter_mut().zip(grads.pairs.iter()) {
            for (w, d) in pair.a.iter_mut().zip(g.a.iter()) {
                *w -= lr * d;
            }
            for (w, d) in pair.b.iter_mut().zip(g.b.iter()) {
                *w -= lr * d;
            }
        }
    }

    fn to_tensor_file(&self) -> TensorFile {
        let meta = serde_json::json!({
            "kind": "lora-adapter",
            "rank": self.config.rank,
            "alpha": self.config.alpha,
            "dropout": self.config.dropout,
            "targets": self.config.targets,
            "base_fingerprint": format!("{:016x}", self.base_fingerprint),
            "seed": self.seed,
        });
        let mut tf = TensorFile::new(meta);
        for pair in &self.pairs {
            let stem = format!("layer.{}.{}", pair.layer, pair.target.name());
            tf.insert(format!("{stem}.A"), pair.a.clone());
            tf.insert(format!("{stem}.B"), pair.b.clone());
        }
        tf
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().write_to(path)
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        self.to_tensor_file().to_bytes()
    }

    pub fn read_checkpoint(path: &Path) -> Result<AdapterState> {
        let tf = TensorFile::read_from(path)?;
        Self::from_tensor_file(tf, &path.display().to_string())
    }

    fn from_tensor_file(tf: TensorFile, path: &str) -> Result<AdapterState> {
        let fail = |detail: String| Error::FileFormat {
            path: path.to_string(),
            detail,
        };
        let meta = &tf.metadata;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("lora-adapter") {
            return Err(fail("not an adapter checkpoint".into()));
        }
        let rank = meta["rank"].as_u64().ok_or_else(|| fail("missing rank".into()))? as usize;
        let alpha = meta["alpha"].as_f64().ok_or_else(|| fail("missing alpha".into()))?;
        let dropout = meta["dropout"].as_f64().ok_or_else(|| fail("missing dropout".into()))?;
        let targets: Vec<TargetMatrix> = serde_json::from_value(meta["targets"].clone())?;
        let base_fingerprint = meta["base_fingerprint"]
            .as_str()
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .ok_or_else(|| fail("missing base_fingerprint".into()))?;
        let seed = meta["seed"].as_u64().ok_or_else(|| fail("missing seed".into()))?;
        let config = AdapterConfig {
            rank,
            alpha,
            dropout,
            targets: targets.clone(),
        };

        let mut pairs = Vec::new();
        // Keys are sorted in the container; reconstruct pairs layer by layer.
        let mut layers: Vec<usize> = tf
            .arrays
            .keys()
            .filter_map(|k| k.split('.').nth(1).and_then(|s| s.parse().ok()))
            .collect();
        layers.sort_unstable();
        layers.dedup();
        for layer in layers {
            for &target in &targets {
                let stem = format!("layer.{}.{}", layer, target.name());
                let a = tf.get(&format!("{stem}.A"), path)?.clone();
                let b = tf.get(&format!("{stem}.B"), path)?.clone();
                if a.len() % rank != 0 || b.len() % rank != 0 {
                    return Err(fail(format!("factor sizes of {stem} not divisible by rank")));
                }
                let in_dim = a.len() / rank;
                let out_dim = b.len() / rank;
                pairs.push(FactorPair {
                    layer,
                    target,
                    a,
                    b,
                    in_dim,
                    out_dim,
                });
            }
        }
        Ok(AdapterState {
            config,
            pairs,
            base_fingerprint,
            seed,
        })
    }
}

/// Gradients aligned 1:1 with the factor pairs of an [`AdapterState`].
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub pairs: Vec<FactorGrads>,
}

#[derive(Debug, Clone)]
pub struct FactorGrads {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &AdapterState) -> AdapterGrads {
        AdapterGrads {
            pairs: adapter
                .pairs
                .iter()
                .map(|p| FactorGrads {
                    a: vec![0.0; p.a.len()],
                    b: vec![0.0; p.b.len()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &AdapterGrads, weight: f64) {
        for (dst, src) in self.pairs.iter_mut().zip(other.pairs.iter()) {
            for (d, s) in dst.a.iter_mut().zip(src.a.iter()) {
                *d += weight * s;
            }
            for (d, s) in dst.b.iter_mut().zip(src.b.iter()) {
                *d += weight * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.pairs {
            for v in g.a.iter_mut().chain(g.b.iter_mut()) {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn dims(_t: TargetMatrix) -> (usize, usize) {
        (16, 16)
    }

    #[test]
    fn rank_zero_rejected() {
        let cfg = AdapterConfig {
            rank: 0,
            ..AdapterConfig::default()
        };
        assert!(AdapterState::init(cfg, 2, dims, 7, 1).is_err());
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let adapter =
            AdapterState::init(AdapterConfig::default(), 2, dims, 7, 1).unwrap();
        for pair in &adapter.pairs {
            let delta = adapter.dense_delta(pair);
            assert!(delta.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut adapter =
            AdapterState::init(AdapterConfig::default(), 2, dims, 0xdead_beef, 42).unwrap();
        // Perturb so the checkpoint is not trivially zero.
        let mut rng = Rng::new(5);
        for pair in &mut adapter.pairs {
            for v in pair.b.iter_mut() {
                *v = rng.gaussian() * 0.01;
            }
        }
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.lac");
        let p2 = dir.path().join("b.lac");
        adapter.write_checkpoint(&p1).unwrap();
        let back = AdapterState::read_checkpoint(&p1).unwrap();
        assert_eq!(back, adapter);
        back.write_checkpoint(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn unknown_target_name_rejected() {
        assert!(matches!(
            TargetMatrix::parse("attn_z"),
            Err(Error::UnknownTarget(_))
        ));
    }
}
