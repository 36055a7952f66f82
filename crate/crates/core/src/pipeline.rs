//! Trained-model bundles, experiment configuration files and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::cisp::{CispConfig, Encoders};
use crate::data::Sample;
use crate::diffusion::{DiffusionModel, ScheduleConfig, TrainConfig};
use crate::encoders::{ip_encode, ModelConfig};
use crate::featurize::build_bipartite;
use crate::error::{Error, Result};
use crate::generate::Family;
use crate::guidance::GuidanceConfig;
use crate::ip::IpInstance;
use crate::nn::{config_hash, Checkpoint, Matrix, Tape};
use crate::oracle::{DEFAULT_NODE_LIMIT, DEFAULT_POOL_CAP};

/// Encoders plus diffusion model; either part may come from separate runs.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub encoders: Encoders,
    pub diffusion: DiffusionModel,
}

const PREFIXES: [&str; 5] = ["ip_encoder", "sol_encoder", "temperature", "denoiser", "decoder"];

impl TrainedModels {
    pub fn new(model: &ModelConfig, schedule: &ScheduleConfig, seed: u64) -> Result<Self> {
        Ok(TrainedModels {
            encoders: Encoders::new(model, seed)?,
            diffusion: DiffusionModel::new(model, schedule, seed.wrapping_add(1))?,
        })
    }

    /// Instance embedding of one sample.
    pub fn embed(&self, sample: &Sample) -> Matrix {
        let mut t = Tape::frozen();
        let z = self.encoders.ip.forward(&mut t, &sample.graph);
        t.value(z).clone()
    }

    /// Instance embedding of an instance outside any dataset.
    pub fn embed_instance(&self, inst: &IpInstance) -> Result<Matrix> {
        ip_encode(&build_bipartite(inst)?, &self.encoders.ip)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let config = serde_json::json!({
            "model": self.encoders.config,
            "schedule": self.diffusion.schedule_config,
        });
        Checkpoint::new(
            config,
            &[
                (PREFIXES[0], &self.encoders.ip.store),
                (PREFIXES[1], &self.encoders.sol.store),
                (PREFIXES[2], &self.encoders.temperature),
                (PREFIXES[3], &self.diffusion.denoiser.store),
                (PREFIXES[4], &self.diffusion.decoder.store),
            ],
        )
    }

    /// Encoders only, as written after contrastive pretraining.
    pub fn encoder_checkpoint(enc: &Encoders) -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({ "model": enc.config }),
            &[
                (PREFIXES[0], &enc.ip.store),
                (PREFIXES[1], &enc.sol.store),
                (PREFIXES[2], &enc.temperature),
            ],
        )
    }

    pub fn load_encoders(ck: &Checkpoint) -> Result<Encoders> {
        let model: ModelConfig = serde_json::from_value(ck.config["model"].clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut enc = Encoders::new(&model, 0)?;
        ck.restore(PREFIXES[0], &mut enc.ip.store)?;
        ck.restore(PREFIXES[1], &mut enc.sol.store)?;
        ck.restore(PREFIXES[2], &mut enc.temperature)?;
        Ok(enc)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let encoders = Self::load_encoders(ck)?;
        let schedule: ScheduleConfig = serde_json::from_value(ck.config["schedule"].clone())
            .map_err(|e| Error::Checkpoint(format!("schedule config: {e}")))?;
        let mut diffusion = DiffusionModel::new(&encoders.config, &schedule, 0)?;
        ck.restore(PREFIXES[3], &mut diffusion.denoiser.store)?;
        ck.restore(PREFIXES[4], &mut diffusion.decoder.store)?;
        Ok(TrainedModels { encoders, diffusion })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Instance `i` uses `families[i % len]`.
    pub families: Vec<Family>,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub pool_cap: usize,
    pub node_limit: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            families: (15..=25).map(Family::desk_indep_set).collect(),
            train_count: 40,
            test_count: 10,
            seed: 0,
            pool_cap: DEFAULT_POOL_CAP,
            node_limit: DEFAULT_NODE_LIMIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub samples_per_instance: usize,
    pub histogram_samples: usize,
    pub partial_proportion: f64,
    /// Candidate gradient scales and objective weights for tuning.
    pub tune_scales: Vec<f64>,
    pub tune_gammas: Vec<f64>,
    pub tune_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_instance: 30,
            histogram_samples: 1000,
            partial_proportion: 0.2,
            tune_scales: vec![1.0, 3.0, 10.0, 30.0],
            tune_gammas: vec![0.0, 0.1, 0.3],
            tune_samples: 5,
        }
    }
}

/// Everything one experiment needs, read from a TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub cisp: CispConfig,
    pub diffusion: TrainConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

/// Record of one command invocation, written as `manifest.json` in the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub created_unix: u64,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config_hash: config_hash(&config),
            config,
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, run_dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = run_dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_toml("[model]\ndim = 16\n[guidance]\ns = 3.0\n").unwrap();
        assert_eq!(partial.model.dim, 16);
        assert_eq!(partial.guidance.s, 3.0);
        assert!(ExperimentConfig::from_toml("[model]\ndim = \"x\"").is_err());
    }

    #[test]
    fn models_round_trip_through_checkpoint() {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            max_len: 16,
            ..ModelConfig::default()
        };
        let sched = ScheduleConfig {
            steps: 10,
            ..ScheduleConfig::default()
        };
        let models = TrainedModels::new(&cfg, &sched, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        models.save(&path).unwrap();
        let back = TrainedModels::load(&path).unwrap();
        assert_eq!(back.diffusion.denoiser.store.values(), models.diffusion.denoiser.store.values());
        assert_eq!(back.encoders.sol.store.values(), models.encoders.sol.store.values());
        assert_eq!(back.diffusion.schedule, models.diffusion.schedule);
        let enc_only = TrainedModels::encoder_checkpoint(&models.encoders);
        assert!(TrainedModels::from_checkpoint(&enc_only).is_err());
        assert!(TrainedModels::load_encoders(&enc_only).is_ok());
    }

    #[test]
    fn manifest_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::new("gen", serde_json::json!({"a": 1}));
        let path = m.write(dir.path()).unwrap();
        let back: Manifest = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.config_hash, m.config_hash);
    }
}
