//! TOML run configuration. Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::federation::{FederationConfig, LrSchedule, Mode};
use crate::net::{Activation, NetConfig, Sharing};
use crate::partition::ShiftPreset;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for every random stream.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Number of final CSV rows averaged into the summary.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Checkpoint every this many rounds; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub data: Option<DataConfig>,
    pub partition: Option<PartitionConfig>,
    pub shift: Option<ShiftConfig>,
    pub model: Option<ModelConfig>,
    pub federation: Option<FederationSection>,
    pub theory: Option<TheorySection>,
}

fn default_window() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Features then an integer label per row.
    Tabular { path: PathBuf },
    /// Image binary plus a text file with one label per line.
    Images { path: PathBuf, labels: PathBuf },
    /// Three well-separated Gaussian clients with known Bayes router.
    Routing {
        train_per_client: usize,
        test_per_client: usize,
    },
    /// Clients are tilted Gaussians sharing one random head.
    Synthetic {
        clients: usize,
        classes: usize,
        dim: usize,
        tilt_scale: f64,
        head_scale: f64,
        train_per_client: usize,
        test_per_client: usize,
    },
}

impl DataConfig {
    pub fn is_pooled(&self) -> bool {
        matches!(self, DataConfig::Tabular { .. } | DataConfig::Images { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    Dirichlet { clients: usize, alpha: f64 },
    Shards { clients: usize, shards_per_client: usize },
}

impl PartitionConfig {
    pub fn clients(&self) -> usize {
        match *self {
            PartitionConfig::Dirichlet { clients, .. } | PartitionConfig::Shards { clients, .. } => clients,
        }
    }
}

/// Client `i` gets combination `i mod 8` of the preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub preset: ShiftPreset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub g_layers: Vec<usize>,
    pub h_layers: Vec<usize>,
    #[serde(default)]
    pub sharing: Sharing,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub fixed_embedding: bool,
}

impl ModelConfig {
    pub fn net(&self, input_dim: usize) -> NetConfig {
        NetConfig {
            input_dim,
            g_layers: self.g_layers.clone(),
            h_layers: self.h_layers.clone(),
            sharing: self.sharing,
            activation: self.activation,
            fixed_embedding: self.fixed_embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub lambda: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Omitted means full batch.
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub shared_target: bool,
    #[serde(default)]
    pub mode: Mode,
}

impl FederationSection {
    pub fn to_config(&self, seed: u64) -> FederationConfig {
        FederationConfig {
            rounds: self.rounds,
            local_steps: self.local_steps,
            lr: self.lr,
            lambda: self.lambda,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            schedule: self.schedule,
            batch_size: self.batch_size,
            shared_target: self.shared_target,
            mode: self.mode,
            seed,
        }
    }
}

/// Grids for the fixed-embedding experiments. Every key has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheorySection {
    pub samples: usize,
    pub lambda: f64,
    pub rho: f64,
    pub local_steps: Vec<usize>,
    /// Step size as a multiple of `1 / L_hat`.
    pub lr_scale: f64,
    pub max_rounds: usize,
    pub stat_sizes: Vec<usize>,
    pub stat_seeds: usize,
    pub stat_lambda: f64,
    pub stat_rho: f64,
    pub error_lambdas: Vec<f64>,
    pub error_samples: usize,
    pub error_rho: f64,
    pub tradeoff_lambdas: Vec<f64>,
    pub tradeoff_seeds: usize,
    pub tradeoff_samples: usize,
    pub tradeoff_rounds: usize,
    pub tradeoff_lr: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            samples: 600,
            lambda: 0.6,
            rho: 0.05,
            local_steps: vec![1, 2, 4, 8],
            lr_scale: 1.0 / 32.0,
            max_rounds: 200_000,
            stat_sizes: vec![500, 1000, 2000, 4000, 8000],
            stat_seeds: 20,
            stat_lambda: 0.5,
            stat_rho: 1e-5,
            error_lambdas: vec![0.6, 0.8, 0.9, 0.99],
            error_samples: 2000,
            error_rho: 1e-3,
            tradeoff_lambdas: vec![0.5, 0.6, 0.9, 0.99],
            tradeoff_seeds: 10,
            tradeoff_samples: 1500,
            tradeoff_rounds: 100,
            tradeoff_lr: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("window must be >= 1"));
        }
        if let Some(data) = &self.data {
            match (data.is_pooled(), &self.partition) {
                (true, None) => return Err(Error::config("missing required key `partition` for a pooled dataset")),
                (false, Some(_)) => return Err(Error::config("`partition` applies only to tabular or image data")),
                _ => {}
            }
            if self.shift.is_some() && !matches!(data, DataConfig::Images { .. }) {
                return Err(Error::config("`shift` applies only to image data"));
            }
        }
        if let Some(f) = &self.federation {
            f.to_config(self.seed).validate()?;
        }
        Ok(())
    }

    /// First 8 bytes of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    pub fn require<'a, T>(field: &'a Option<T>, key: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 7
output_dir = "out"

[data]
kind = "routing"
train_per_client = 50
test_per_client = 20

[model]
g_layers = [8]
h_layers = [4]

[federation]
rounds = 3
local_steps = 2
lr = 0.1
lambda = 0.8
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.window, 50);
        let f = cfg.federation.unwrap();
        assert_eq!(f.mode, Mode::Feddrm);
        assert_eq!(f.batch_size, None);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = BASE.replace("lambda = 0.8", "lambda = 0.8\nlamda = 0.3");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("lamda"), "{err}");
        let text = BASE.replace("kind = \"routing\"", "kind = \"routing\"\nextra = 1");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn missing_key_is_named() {
        let text = BASE.replace("lr = 0.1\n", "");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lr"), "{err}");
        let err = RunConfig::from_toml(&BASE.replace("seed = 7\n", "")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn pooled_data_needs_partition() {
        let text = BASE.replace(
            "kind = \"routing\"\ntrain_per_client = 50\ntest_per_client = 20",
            "kind = \"tabular\"\npath = \"x.csv\"",
        );
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("partition"), "{err}");
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = RunConfig::from_toml(BASE).unwrap();
        let b = RunConfig::from_toml(&BASE.replace("seed = 7", "seed   =   7  # same")).unwrap();
        let c = RunConfig::from_toml(&BASE.replace("seed = 7", "seed = 8")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash_hex().len(), 16);
    }

    #[test]
    fn theory_section_defaults_fill_in() {
        let cfg = RunConfig::from_toml("seed = 1\noutput_dir = \"o\"\n[theory]\nsamples = 100\n").unwrap();
        let t = cfg.theory.unwrap();
        assert_eq!(t.samples, 100);
        assert_eq!(t.local_steps, vec![1, 2, 4, 8]);
    }
}
