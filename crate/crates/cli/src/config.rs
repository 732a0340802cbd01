//! Run configuration: one TOML file with a table per stage. Every table is
//! optional and unknown keys are rejected.

use std::path::Path;

use genret_core::eval::EvalSpec;
use genret_core::index::IndexMode;
use genret_core::model::ModelConfig;
use genret_core::serving::EngineConfig;
use genret_core::synth::WorldConfig;
use genret_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub kind: IndexMode,
    /// IVF lists; 0 picks `sqrt(n)`.
    pub partitions: usize,
    /// Lists probed per query; 0 probes a quarter of them.
    pub nprobe: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig { kind: IndexMode::Exact, partitions: 0, nprobe: 0, kmeans_iters: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Fraction of events, oldest first, written to the batch segment of the
    /// signal store; the rest go to the realtime log.
    pub batch_quantile: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { batch_quantile: 0.9 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub world: WorldConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalSpec,
    pub index: IndexConfig,
    pub engine: EngineConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, String> {
        let cfg: Config = toml::from_str(text).map_err(|e| format!("invalid config: {}", e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Config, String> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                Config::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let sections: [(&str, genret_core::Result<()>); 4] = [
            ("world", self.world.validate()),
            ("model", self.model.validate()),
            ("training", self.training.validate()),
            ("eval", self.eval.validate()),
        ];
        for (name, r) in sections {
            r.map_err(|e| format!("invalid config [{name}]: {e}"))?;
        }
        if !(self.synth.batch_quantile > 0.0 && self.synth.batch_quantile <= 1.0) {
            return Err("invalid config [synth]: batch_quantile must be in (0, 1]".into());
        }
        let e = &self.engine;
        if e.max_items == 0 || e.max_steps == 0 || e.overfetch == 0 {
            return Err("invalid config [engine]: max_items, max_steps and overfetch must be positive".into());
        }
        if !(e.compression_threshold > 0.0 && e.compression_threshold <= 1.0) {
            return Err("invalid config [engine]: compression_threshold must be in (0, 1]".into());
        }
        if self.index.kmeans_iters == 0 {
            return Err("invalid config [index]: kmeans_iters must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = Config::parse("[training]\nepochz = 3\n").unwrap_err();
        assert!(err.contains("epochz"), "{err}");
        let err = Config::parse("[serving]\nport = 1\n").unwrap_err();
        assert!(err.contains("serving"), "{err}");
    }

    #[test]
    fn invalid_values_name_the_section() {
        let err = Config::parse("[training]\nbatch_size = 0\n").unwrap_err();
        assert!(err.contains("[training]") && err.contains("batch_size"), "{err}");
        let err = Config::parse("[index]\nkind = \"hnsw\"\n").unwrap_err();
        assert!(err.contains("hnsw"), "{err}");
    }

    #[test]
    fn sections_override_fields() {
        let cfg = Config::parse("[world]\nnum_users = 40\n[index]\nkind = \"ivf\"\nnprobe = 3\n").unwrap();
        assert_eq!(cfg.world.num_users, 40);
        assert_eq!(cfg.index.kind, IndexMode::Ivf);
        assert_eq!(cfg.index.nprobe, 3);
    }
}
