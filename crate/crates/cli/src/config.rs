//! Run configuration files.
//!
//! TOML by default; a `.json` extension is read as JSON so a `run.json`
//! written by a previous run can be fed back with `--config`.

use std::path::{Path, PathBuf};

use gridbench::harness::{ObjectiveConfig, RunConfig, Task};
use gridbench::models::ModelConfig;
use gridbench::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub run: RunSection,
}

impl Default for CliConfigFile {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: None,
            threads: None,
            out: None,
            data: DataSection::default(),
            run: RunSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Case files; each is split with `ratios` and `split_seed`.
    #[serde(default)]
    pub cases: Vec<PathBuf>,
    /// Dataset manifests carrying their own split.
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratios: Option<[f64; 3]>,
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
}

/// Every field of [`RunConfig`] except the seed, all optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_cases: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_cases: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_every_samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restore_optimizer: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_shunts: Option<bool>,
}

impl RunSection {
    /// Fills unset fields from `base`.
    pub fn resolve(&self, mut base: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(x) = &self.$f {
                    base.$f = x.clone();
                }
            )*};
        }
        take!(
            task,
            model,
            objective,
            cost_weight,
            train_cases,
            eval_cases,
            budget_samples,
            batch_size,
            lr,
            weight_decay,
            grad_clip,
            restore_optimizer,
            include_shunts
        );
        if self.val_every_samples.is_some() {
            base.val_every_samples = self.val_every_samples;
        }
        if self.finetune_fraction.is_some() {
            base.finetune_fraction = self.finetune_fraction;
        }
        if self.pretrained.is_some() {
            base.pretrained = self.pretrained.clone();
        }
        base
    }

    /// Every field set, from a resolved config.
    pub fn from_resolved(cfg: &RunConfig) -> Self {
        Self {
            task: Some(cfg.task),
            model: Some(cfg.model.clone()),
            objective: Some(cfg.objective.clone()),
            cost_weight: Some(cfg.cost_weight),
            train_cases: Some(cfg.train_cases.clone()),
            eval_cases: Some(cfg.eval_cases.clone()),
            budget_samples: Some(cfg.budget_samples),
            batch_size: Some(cfg.batch_size),
            lr: Some(cfg.lr),
            weight_decay: Some(cfg.weight_decay),
            grad_clip: Some(cfg.grad_clip),
            val_every_samples: Some(cfg.val_every()),
            finetune_fraction: Some(cfg.finetune_fraction()),
            pretrained: cfg.pretrained.clone(),
            restore_optimizer: Some(cfg.restore_optimizer),
            include_shunts: Some(cfg.include_shunts),
        }
    }
}

pub fn load(path: &Path) -> Result<CliConfigFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let schema = |message: String| Error::Schema {
        path: path.display().to_string(),
        message,
    };
    let cfg: CliConfigFile = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| schema(e.message().to_string()))?
    };
    if cfg.schema_version != CONFIG_SCHEMA_VERSION {
        return Err(Error::IncompatibleSchema(format!(
            "config schema_version {}, expected {CONFIG_SCHEMA_VERSION}",
            cfg.schema_version
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(rebase(cfg, base))
}

/// Makes relative paths in a loaded config relative to its directory.
fn rebase(mut cfg: CliConfigFile, dir: &Path) -> CliConfigFile {
    let fix = |p: &PathBuf| gridbench::ingest::resolve_path(p, Some(dir));
    cfg.data.cases = cfg.data.cases.iter().map(fix).collect();
    cfg.data.manifests = cfg.data.manifests.iter().map(fix).collect();
    cfg.run.pretrained = cfg.run.pretrained.as_ref().map(fix);
    cfg.out = cfg.out.as_ref().map(|p| if p.is_absolute() { p.clone() } else { dir.join(p) });
    cfg
}

pub fn default_model() -> ModelConfig {
    ModelConfig::new(gridbench::models::ModelKind::Gcn, 2, 32)
}
