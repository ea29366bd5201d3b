//! Run configuration and the end-to-end pipeline: build the task, attach
//! uniform adapters, allocate ranks, and collect results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{budget_check, run_allocation, AllocationConfig, AllocationOutcome};
use crate::backbone::{Backbone, Example, Head, ModelConfig, ModuleId};
use crate::bench::{gen_teacher_task, rank_recovery_metric, read_task_jsonl, read_task_spec, smoke_sentiment_task, RankRecovery, TeacherSpec};
use crate::network::{SuperNetwork, HEAD_INIT_STD};
use crate::rng::SeedTree;
use crate::scoring::Scorer;
use crate::trainer::{split_dataset, MetricsRecord, TrainConfig, Trainer};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSource {
    /// Synthetic teacher-labelled data.
    Teacher(TeacherSpec),
    /// JSON-lines file of `{tokens, label}` records.
    File(PathBuf),
    /// The bundled character-level sentiment snippets.
    Smoke,
}

/// Everything one run needs. Missing sections take their defaults; the
/// resolved form is written next to the run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub alloc: AllocationConfig,
    #[serde(default = "default_scorer")]
    pub scorer: Scorer,
    #[serde(default = "default_task")]
    pub task: TaskSource,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_scorer() -> Scorer {
    Scorer::Ablora
}

fn default_task() -> TaskSource {
    TaskSource::Teacher(TeacherSpec::default_for(&ModelConfig::default(), 0))
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("alora_run")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            alloc: AllocationConfig::default(),
            scorer: default_scorer(),
            task: default_task(),
            out_dir: default_out_dir(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The run's top-level seed; every other seed is derived from it by name.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate("model.")?;
        self.train.validate("train.")?;
        self.alloc.validate(&self.model, "alloc.")?;
        match &self.task {
            TaskSource::Teacher(spec) => spec.validate(&self.model, "task.teacher.")?,
            TaskSource::File(path) if path.as_os_str().is_empty() => {
                return Err(Error::config("task.file", "empty path"));
            }
            _ => {}
        }
        if self.model.n_classes < 2 && matches!(self.task, TaskSource::Smoke) {
            return Err(Error::config("model.n_classes", "the smoke task needs 2 classes"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::config("out_dir", "empty path"));
        }
        Ok(())
    }
}

/// Task data and the frozen starting point of the student.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub examples: Vec<Example>,
    pub backbone: Backbone,
    pub head: Head,
    pub true_ranks: Option<BTreeMap<ModuleId, usize>>,
}

pub fn prepare_task(cfg: &RunConfig) -> Result<PreparedTask> {
    let seeds = SeedTree::new(cfg.seed());
    let sidecar = match &cfg.task {
        TaskSource::File(path) => read_task_spec(path)?,
        _ => None,
    };
    match &cfg.task {
        TaskSource::Teacher(spec) => {
            let task = gen_teacher_task(&cfg.model, spec)?;
            Ok(PreparedTask {
                true_ranks: Some(task.true_ranks()),
                examples: task.examples,
                backbone: task.base,
                head: task.head,
            })
        }
        TaskSource::File(path) if sidecar.is_some() => {
            // the sidecar regenerates the teacher's frozen weights and true ranks
            let task = gen_teacher_task(&cfg.model, sidecar.as_ref().unwrap())?;
            let examples = read_task_jsonl(path)?;
            validate_examples(&examples, &cfg.model)?;
            Ok(PreparedTask {
                true_ranks: Some(task.true_ranks()),
                examples,
                backbone: task.base,
                head: task.head,
            })
        }
        other => {
            let examples = match other {
                TaskSource::File(path) => read_task_jsonl(path)?,
                _ => smoke_sentiment_task(&cfg.model, seeds.seed("data")),
            };
            validate_examples(&examples, &cfg.model)?;
            Ok(PreparedTask {
                examples,
                backbone: Backbone::random(&cfg.model, &mut seeds.rng("backbone")),
                head: Head::random(&cfg.model, HEAD_INIT_STD, &mut seeds.rng("head")),
                true_ranks: None,
            })
        }
    }
}

fn validate_examples(examples: &[Example], model: &ModelConfig) -> Result<()> {
    for (i, e) in examples.iter().enumerate() {
        if e.label >= model.n_classes {
            return Err(Error::config("task", format!("example {i} has label {} >= n_classes", e.label)));
        }
        if e.tokens.is_empty() || e.tokens.len() > model.max_seq_len {
            return Err(Error::config("task", format!("example {i} has length {}", e.tokens.len())));
        }
        if let Some(t) = e.tokens.iter().find(|&&t| t >= model.vocab_size) {
            return Err(Error::config("task", format!("example {i} has token {t} >= vocab_size")));
        }
    }
    Ok(())
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub net: SuperNetwork,
    /// The network right after adapter initialisation.
    pub initial: SuperNetwork,
    pub outcome: AllocationOutcome,
    pub metrics: Vec<MetricsRecord>,
    pub dev_loss: f64,
    pub test_loss: f64,
    pub allocation: BTreeMap<ModuleId, usize>,
    pub recovery: Option<RankRecovery>,
}

/// Validates `cfg`, builds the task and runs the full allocation workflow.
/// Nothing is written to disk.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let task = prepare_task(cfg)?;
    let seeds = SeedTree::new(cfg.seed());
    let splits = split_dataset(&task.examples, seeds.seed("data"))?;
    let mut net = SuperNetwork::new(cfg.model, task.backbone, task.head);
    net.attach_uniform(cfg.alloc.r_init, &mut seeds.rng("init"));
    let initial = net.clone();
    let train_cfg = TrainConfig {
        seed: seeds.seed("batches"),
        ..cfg.train
    };
    let mut trainer = Trainer::new(train_cfg, splits)?;
    let outcome = run_allocation(&mut net, &cfg.alloc, &mut trainer, cfg.scorer, seeds.child("alloc"))?;
    let allocation = budget_check(&net, cfg.alloc.r_target)?.per_module;
    let recovery = task.true_ranks.as_ref().map(|t| rank_recovery_metric(&allocation, t));
    let test_loss = net.dataset_loss(&trainer.splits().test, None)?;
    Ok(RunOutput {
        dev_loss: outcome.final_dev_loss,
        test_loss,
        metrics: trainer.log().to_vec(),
        net,
        initial,
        outcome,
        allocation,
        recovery,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"scorer": "dnas", "train": {"lr_peak": 0.01}}"#).unwrap();
        assert_eq!(cfg.scorer, Scorer::Dnas);
        assert_eq!(cfg.train.lr_peak, 0.01);
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.alloc, AllocationConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn validation_names_field() {
        let mut cfg = RunConfig::default();
        cfg.alloc.r_init = 7;
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "alloc.r_init"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.train.warmup_frac = 0.0;
        match cfg.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.warmup_frac"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_task_with_sidecar_matches_teacher_task() {
        let dir = std::env::temp_dir().join(format!("alora_sidecar_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("task.jsonl");
        let mut cfg = RunConfig::default();
        let TaskSource::Teacher(spec) = cfg.task.clone() else { unreachable!() };
        let spec = TeacherSpec { n_examples: 60, ..spec };
        cfg.task = TaskSource::Teacher(spec.clone());
        let direct = prepare_task(&cfg).unwrap();
        crate::bench::write_task_with_spec(&path, &direct.examples, &spec).unwrap();
        cfg.task = TaskSource::File(path.clone());
        let from_file = prepare_task(&cfg).unwrap();
        assert_eq!(from_file.examples, direct.examples);
        assert_eq!(from_file.backbone, direct.backbone);
        assert_eq!(from_file.true_ranks, direct.true_ranks);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        let smoke = RunConfig::from_json(r#"{"task": "smoke"}"#).unwrap();
        assert_eq!(smoke.task, TaskSource::Smoke);
    }
}
