//! The run config: one TOML file drives every command.
//!
//! All seeds are derived from the global `seed`, so a config file alone
//! pins every artifact. See `configs/standard.toml` for the annotated
//! schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tft_core::eval::EvalMode;
use tft_core::model::{ModelConfig, SamplingSpec};
use tft_core::pipeline::{OptimSpec, StageSpec};
use tft_core::taskgen::{DatasetSpec, TaskKind, DEFAULT_MARKER_RATE};
use tft_core::taskgen::Dataset;
use tft_core::tokenizer::EOS;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "TFT_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            context_len: 128,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub task_kind: TaskKind,
    pub difficulty: u32,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub hard: usize,
    pub marker_rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            task_kind: TaskKind::ChainArith,
            difficulty: 3,
            train: 10_000,
            validation: 1_000,
            test: 1_000,
            hard: 1_000,
            marker_rate: DEFAULT_MARKER_RATE,
        }
    }
}

/// Shared by both stages; stage 2 starts from fresh optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// No-think share of the stage-1 (hybrid) mix.
    pub hybrid_nothink_fraction: f64,
    pub optim: OptimSpec,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            hybrid_nothink_fraction: 0.5,
            optim: OptimSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub temperature: f64,
    /// 0 keeps the whole vocabulary.
    pub top_k: usize,
    pub max_new_tokens_think: usize,
    pub max_new_tokens_nothink: usize,
    pub benchmarks: Vec<Benchmark>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_k: 20,
            max_new_tokens_think: 256,
            max_new_tokens_nothink: 64,
            benchmarks: vec![
                Benchmark {
                    split: "test".into(),
                    n_samples: 1,
                },
                Benchmark {
                    split: "hard".into(),
                    n_samples: 1,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub split: String,
    pub n_samples: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/standard"),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Every seed used by a run, derived from the global one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub global: u64,
    pub model: u64,
    pub data: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub eval: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model_config(1).validate().map_err(|e| e.to_string())?;
        if self.data.difficulty == 0 {
            return Err("data.difficulty must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.data.marker_rate) {
            return Err("data.marker_rate must lie in [0, 1]".into());
        }
        if self.data.train == 0 {
            return Err("data.train must be positive".into());
        }
        self.stage_spec("stage1", self.train.hybrid_nothink_fraction, self.seeds().stage1)
            .validate()
            .map_err(|e| format!("train: {e}"))?;
        for mode in [EvalMode::Think, EvalMode::Nothink] {
            self.sampling(mode).validate().map_err(|e| format!("eval: {e}"))?;
        }
        if self.eval.benchmarks.is_empty() {
            return Err("eval.benchmarks must name at least one split".into());
        }
        for b in &self.eval.benchmarks {
            if !Dataset::SPLITS.contains(&b.split.as_str()) {
                return Err(format!(
                    "eval.benchmarks: unknown split {:?} (expected one of {})",
                    b.split,
                    Dataset::SPLITS.join(", ")
                ));
            }
            if b.n_samples == 0 {
                return Err(format!("eval.benchmarks: split {} needs n_samples >= 1", b.split));
            }
        }
        Ok(())
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn seeds(&self) -> Seeds {
        let g = self.seed;
        Seeds {
            global: g,
            model: g,
            data: g,
            stage1: g.wrapping_add(1),
            stage2: g.wrapping_add(2),
            eval: g.wrapping_add(3),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_len: self.model.context_len,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            n_layers: self.model.n_layers,
            seed: self.seeds().model,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            task_kind: d.task_kind,
            difficulty: d.difficulty,
            train: d.train,
            validation: d.validation,
            test: d.test,
            hard: d.hard,
            seed: self.seeds().data,
            marker_rate: d.marker_rate,
        }
    }

    pub fn stage_spec(&self, name: &str, nothink_fraction: f64, seed: u64) -> StageSpec {
        StageSpec {
            name: name.to_string(),
            nothink_fraction,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optim: self.train.optim,
            seed,
        }
    }

    pub fn hybrid_stage(&self) -> StageSpec {
        self.stage_spec("hybrid", self.train.hybrid_nothink_fraction, self.seeds().stage1)
    }

    pub fn stage2(&self, variant: &str) -> StageSpec {
        // nothink fraction is set by the variant
        self.stage_spec(variant, 0.0, self.seeds().stage2)
    }

    pub fn sampling(&self, mode: EvalMode) -> SamplingSpec {
        SamplingSpec {
            temperature: self.eval.temperature,
            top_k: (self.eval.top_k > 0).then_some(self.eval.top_k),
            max_new_tokens: match mode {
                EvalMode::Think => self.eval.max_new_tokens_think,
                EvalMode::Nothink => self.eval.max_new_tokens_nothink,
            },
            stop_token_ids: vec![EOS],
            seed: self.seeds().eval,
        }
    }

    /// The part of the config that determines trained weights. Stage-1
    /// checkpoints are reused only when this matches.
    pub fn training_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            model: &'a ModelSection,
            data: &'a DataSection,
            train: &'a TrainSection,
            eval: &'a EvalSection,
        }
        let key = Key {
            seed: self.seed,
            model: &self.model,
            data: &self.data,
            train: &self.train,
            // self-distillation decodes with the eval settings
            eval: &self.eval,
        };
        crate::sha256_hex(serde_json::to_string(&key).expect("key serializes").as_bytes())
    }
}
