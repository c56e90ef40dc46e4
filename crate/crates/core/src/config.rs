//! The run configuration: one TOML file drives every command; command-line
//! `--set key=value` overrides are applied on top and logged.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{GenerationConfig, NucleusConfig};
use crate::coref_eval::{MatchConfig, MergeConfig};
use crate::data_model::{LoadOptions, TrainOntology};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::ModelConfig;
use crate::objects::DetectorConfig;
use crate::seeds::sha256_hex;
use crate::trainer::{OptimizerConfig, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub ontology: PathBuf,
    /// Text-annotated training records.
    pub text: PathBuf,
    /// Image-annotated training records.
    pub image: PathBuf,
    /// Multimedia evaluation records.
    #[serde(default)]
    pub eval: Option<PathBuf>,
    /// Multimedia view of the training documents, for training-set scores.
    #[serde(default)]
    pub train_eval: Option<PathBuf>,
    #[serde(default)]
    pub train_ontology: TrainOntology,
    #[serde(default)]
    pub strict_verbs: bool,
    /// Feature archives for the `precomputed` encoder backend.
    #[serde(default)]
    pub text_features: Option<PathBuf>,
    #[serde(default)]
    pub image_features: Option<PathBuf>,
}

impl DataConfig {
    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            strict_verbs: self.strict_verbs,
            train_ontology: self.train_ontology,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub heads: usize,
    pub fusion_mode: FusionMode,
    pub mask_roles: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            heads: m.heads,
            fusion_mode: m.fusion_mode,
            mask_roles: m.mask_roles,
        }
    }
}

/// An external client: the built-in toy implementation, or a subprocess
/// speaking JSON on stdin/stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClientSpec {
    Builtin(String),
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        tag: String,
    },
}

impl Default for ClientSpec {
    fn default() -> Self {
        Self::Builtin("toy".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSection {
    pub cache: PathBuf,
    pub neg_k: usize,
    pub generator: ClientSpec,
    pub captioner: ClientSpec,
    pub generation: GenerationConfig,
    pub nucleus: NucleusConfig,
    pub retries: usize,
}

impl Default for AugmentationSection {
    fn default() -> Self {
        Self {
            cache: "cache".into(),
            neg_k: 4,
            generator: ClientSpec::default(),
            captioner: ClientSpec::default(),
            generation: GenerationConfig::default(),
            nucleus: NucleusConfig::default(),
            retries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub threshold: f64,
    /// Fixture table of sentence-image similarities.
    pub similarity: Option<PathBuf>,
}

impl Default for MergeSection {
    fn default() -> Self {
        Self {
            threshold: MergeConfig::default().threshold,
            similarity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub fixture: Option<PathBuf>,
    pub command: Option<ClientSpec>,
    pub max_objects: usize,
    pub score_floor: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        Self {
            fixture: None,
            command: None,
            max_objects: d.max_objects,
            score_floor: d.score_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Seeds model initialisation, toy encoders and data shuffling.
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub augmentation: AugmentationSection,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub merge: MergeSection,
    #[serde(default)]
    pub matching: MatchConfig,
    #[serde(default)]
    pub detector: DetectorSection,
}

fn default_out_dir() -> PathBuf {
    "runs".into()
}

/// Applies `a.b.c=value` to a TOML table. The value is parsed as TOML when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// A parsed configuration together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Directory that relative paths are resolved against.
    pub base_dir: PathBuf,
    /// SHA-256 of the configuration (after overrides, before path resolution).
    pub hash: String,
}

impl LoadedConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base, overrides)
    }

    pub fn from_str(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for o in overrides {
            log::info!("config override: {o}");
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let hash = sha256_hex(&serde_json::to_vec(&config)?);
        let loaded = Self {
            config,
            base_dir: base_dir.to_path_buf(),
            hash,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir).join(&self.config.run_id)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.config.encoder.clone(),
            heads: self.config.model.heads,
            fusion_mode: self.config.model.fusion_mode,
            mask_roles: self.config.model.mask_roles,
        }
    }

    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            threshold: self.config.merge.threshold,
            scorer: if self.config.merge.similarity.is_some() {
                "fixture"
            } else {
                "none"
            }
            .into(),
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            max_objects: self.config.detector.max_objects,
            score_floor: self.config.detector.score_floor,
        }
    }

    /// Optimizer settings with the shuffle seed taken from the run seed.
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: self.config.seed,
            ..self.config.optimizer.clone()
        }
    }

    /// Every problem found, one `field: message` line each.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let mut problems: Vec<String> = Vec::new();
        let mut need = |field: &str, p: Option<&PathBuf>| {
            if let Some(p) = p {
                let full = self.resolve(p);
                if !full.exists() {
                    problems.push(format!("{field}: {} does not exist", full.display()));
                }
            }
        };
        need("data.ontology", Some(&c.data.ontology));
        need("data.text", Some(&c.data.text));
        need("data.image", Some(&c.data.image));
        need("data.eval", c.data.eval.as_ref());
        need("data.train_eval", c.data.train_eval.as_ref());
        need("data.text_features", c.data.text_features.as_ref());
        need("data.image_features", c.data.image_features.as_ref());
        need("merge.similarity", c.merge.similarity.as_ref());
        need("detector.fixture", c.detector.fixture.as_ref());
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        if c.run_id.trim().is_empty() || c.run_id.contains(['/', '\\']) {
            check("run_id", Err(Error::Config("must be a non-empty plain name".into())));
        }
        check("encoder", c.encoder.validate());
        if !matches!(c.encoder.backend.as_str(), "toy" | "precomputed") {
            check(
                "encoder.backend",
                Err(Error::Config(format!(
                    "unknown backend `{}` (toy or precomputed)",
                    c.encoder.backend
                ))),
            );
        }
        if c.encoder.backend == "precomputed" && (c.data.text_features.is_none() || c.data.image_features.is_none()) {
            check(
                "data.text_features",
                Err(Error::Config(
                    "the precomputed backend needs both feature archives".into(),
                )),
            );
        }
        if c.model.heads == 0 || !c.encoder.d.is_multiple_of(c.model.heads) {
            check(
                "model.heads",
                Err(Error::Config(format!(
                    "{} heads do not divide d = {}",
                    c.model.heads, c.encoder.d
                ))),
            );
        }
        check("optimizer", c.optimizer.validate());
        check("augmentation.generation", c.augmentation.generation.validate());
        check("augmentation.nucleus", c.augmentation.nucleus.validate());
        check("merge.threshold", self.merge_config().validate());
        if !(0.0..=1.0).contains(&c.matching.iou_threshold) {
            check("matching.iou_threshold", Err(Error::Config("must be in [0, 1]".into())));
        }
        for (field, spec) in [
            ("augmentation.generator", Some(&c.augmentation.generator)),
            ("augmentation.captioner", Some(&c.augmentation.captioner)),
            ("detector.command", c.detector.command.as_ref()),
        ] {
            if let Some(ClientSpec::Builtin(name)) = spec {
                if name != "toy" {
                    check(field, Err(Error::Config(format!("unknown built-in client `{name}`"))));
                }
            }
        }
        let sched = &c.schedule;
        if sched.stage1_visual_epochs == 0
            || sched.stage1_text_epochs == 0
            || sched.later_epochs == 0
            || sched.combined_epochs == 0
        {
            check("schedule", Err(Error::Config("epoch counts must be at least 1".into())));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid configuration:\n  {}",
                problems.join("\n  ")
            )))
        }
    }
}
