//! Configuration-driven pipeline: generate -> pretrain -> unlearn ->
//! analyze -> attack -> report, with per-stage persistence and resume.
//!
//! All randomness flows from the single global seed through named
//! sub-seeds, so stages can be rerun independently yet reproducibly. No
//! artifact carries a timestamp: rerunning a config into a fresh directory
//! produces byte-identical outputs.

mod report;
mod stages;

pub use report::{render_report, RunReport};
pub use stages::{run_stages, Stage, ALL_STAGES};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::unlearn::{Method, SsiuuAttrMode};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default = "default_unlearn_sections")]
    pub unlearn: Vec<UnlearnSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub attack: AttackSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub num_entities: u32,
    pub num_relations: u32,
    pub forget_fraction: f64,
    pub retain_fraction: f64,
    pub test_fraction: f64,
    pub benign_size: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            num_entities: 40,
            num_relations: 5,
            forget_fraction: 0.05,
            retain_fraction: 0.10,
            test_fraction: 0.70,
            benign_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    /// 0 derives the vocabulary size from the generated corpus.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_layers: 4,
            d_model: 128,
            num_heads: 4,
            d_ff: 512,
            vocab_size: 0,
            max_seq_len: 32,
            tie_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub memorize_threshold: f64,
    pub eval_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            learning_rate: 1e-3,
            batch_size: 32,
            max_steps: 1500,
            memorize_threshold: 0.995,
            eval_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnSection {
    pub method: Method,
    /// Candidates for the lowest-converging learning-rate search,
    /// walked in ascending order.
    pub learning_rates: Vec<f64>,
    #[serde(default)]
    pub forget_threshold: f64,
    #[serde(default = "default_unlearn_steps")]
    pub max_steps: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub batch_forget: usize,
    #[serde(default)]
    pub batch_retain: usize,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub rmu_alpha: Option<f64>,
    #[serde(default)]
    pub rmu_c: Option<f64>,
    #[serde(default)]
    pub rmu_layer: Option<usize>,
    #[serde(default)]
    pub ssiuu_attr_mode: SsiuuAttrMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_unlearn_steps() -> usize {
    300
}

fn default_one() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// Per-method defaults mirroring the method definitions: DPO/NPO carry a
/// preference temperature, RMU a steering constant and layer, SSIUU the
/// regularization weight.
pub fn default_unlearn_sections() -> Vec<UnlearnSection> {
    use Method::*;
    let base = |method: Method, learning_rates: Vec<f64>| UnlearnSection {
        method,
        learning_rates,
        forget_threshold: 0.0,
        max_steps: default_unlearn_steps(),
        eval_every: 1,
        batch_forget: 0,
        batch_retain: 16,
        lambda: None,
        beta: None,
        rmu_alpha: None,
        rmu_c: None,
        rmu_layer: None,
        ssiuu_attr_mode: SsiuuAttrMode::Params,
        seeds: default_seeds(),
    };
    vec![
        base(Ga, vec![0.002, 0.005]),
        base(Gd, vec![0.002, 0.005]),
        UnlearnSection { beta: Some(0.1), ..base(Dpo, vec![0.005, 0.01]) },
        UnlearnSection { beta: Some(0.1), ..base(Npo, vec![0.002, 0.005]) },
        UnlearnSection {
            rmu_alpha: Some(5.0),
            rmu_c: Some(20.0),
            rmu_layer: Some(1),
            ..base(Rmu, vec![0.005, 0.01])
        },
        UnlearnSection { lambda: Some(10.0), ..base(Ssiuu, vec![0.002, 0.005]) },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub influence_variation: bool,
    pub curves: bool,
    pub grids: bool,
    pub lens: bool,
    pub correlation: bool,
    pub top_m: usize,
    /// 0 derives the grid top-k from the narrowest module (max 100).
    pub grid_top_k: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            influence_variation: true,
            curves: true,
            grids: true,
            lens: true,
            correlation: true,
            top_m: 100,
            grid_top_k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub enabled: bool,
    /// Rescales the published learning-rate grids to the toy model's SGD
    /// loss scale; recorded in every attack report.
    pub lr_multiplier: f64,
    pub harmful_p: Vec<f64>,
    pub harmful_learning_rates: Vec<f64>,
    pub harmful_steps: usize,
    pub benign_learning_rates: Vec<f64>,
    pub benign_steps: usize,
    pub benign_batch: usize,
    pub eval_every: usize,
    pub seeds: Vec<u64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            enabled: true,
            lr_multiplier: 1e3,
            harmful_p: vec![0.1, 0.3],
            harmful_learning_rates: vec![1e-5, 5e-6, 1e-6],
            harmful_steps: 100,
            benign_learning_rates: vec![1e-5, 1e-6, 1e-7],
            benign_steps: 100,
            benign_batch: 8,
            eval_every: 2,
            seeds: vec![0, 1, 2],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.unlearn.is_empty() {
            return Err(Error::Config("no unlearn methods configured".into()));
        }
        for u in &self.unlearn {
            if u.learning_rates.is_empty() || u.learning_rates.iter().any(|&lr| lr <= 0.0) {
                return Err(Error::Config(format!("{}: learning rates must be positive", u.method)));
            }
            if u.seeds.is_empty() {
                return Err(Error::Config(format!("{}: needs at least one seed", u.method)));
            }
        }
        let a = &self.attack;
        if a.enabled {
            for &p in &a.harmful_p {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::Config(format!("harmful p {p} outside (0, 1)")));
                }
            }
            if a.lr_multiplier <= 0.0 {
                return Err(Error::Config("attack lr_multiplier must be positive".into()));
            }
        }
        Ok(())
    }

    /// Stable hash over the canonical JSON encoding: field order in the
    /// TOML source does not matter, field values do.
    pub fn config_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canon.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Question templates used for every evaluation in the pipeline.
    pub fn eval_templates(&self) -> Vec<usize> {
        vec![0, 1]
    }
}

// ── Manifest ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub state: String, // "done" | "failed"
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageStatus>,
}

impl Manifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load_or_new(out_dir: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
        let path = Self::path(out_dir);
        if path.exists() {
            let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if m.config_hash != cfg.config_hash() {
                return Err(Error::Pipeline(format!(
                    "out dir {} was produced by a different config (hash {} vs {}); use a fresh directory",
                    out_dir.display(),
                    m.config_hash,
                    cfg.config_hash()
                )));
            }
            Ok(m)
        } else {
            Ok(Manifest {
                version: CONFIG_VERSION,
                config_hash: cfg.config_hash(),
                seed: cfg.seed,
                stages: BTreeMap::new(),
            })
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path(out_dir), json)?;
        Ok(())
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.stages.get(stage).map(|s| s.state == "done").unwrap_or(false)
    }

    pub fn mark(&mut self, stage: &str, state: &str, detail: &str) {
        self.stages
            .insert(stage.to_string(), StageStatus { state: state.into(), detail: detail.into() });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_and_validates() {
        let cfg = PipelineConfig {
            version: 1,
            seed: 42,
            out_dir: PathBuf::from("runs/x"),
            corpus: Default::default(),
            model: Default::default(),
            pretrain: Default::default(),
            unlearn: default_unlearn_sections(),
            analysis: Default::default(),
            attack: Default::default(),
        };
        cfg.validate().unwrap();
        let toml_str = toml::to_string(&cfg).unwrap();
        let back = PipelineConfig::from_toml_str(&toml_str).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash(), back.config_hash());
    }

    #[test]
    fn unknown_fields_are_errors() {
        let s = r#"
version = 1
seed = 1
bogus_field = true
"#;
        assert!(PipelineConfig::from_toml_str(s).is_err());
    }

    #[test]
    fn field_reordering_hashes_identically() {
        let a = PipelineConfig::from_toml_str("version = 1\nseed = 7\n").unwrap();
        let b = PipelineConfig::from_toml_str("seed = 7\nversion = 1\n").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn wrong_version_rejected() {
        assert!(PipelineConfig::from_toml_str("version = 2\nseed = 0\n").is_err());
    }

    #[test]
    fn manifest_guards_config_changes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::from_toml_str("version = 1\nseed = 1\n").unwrap();
        let m = Manifest::load_or_new(dir.path(), &cfg).unwrap();
        m.save(dir.path()).unwrap();
        let cfg2 = PipelineConfig::from_toml_str("version = 1\nseed = 2\n").unwrap();
        assert!(Manifest::load_or_new(dir.path(), &cfg2).is_err());
    }
}
