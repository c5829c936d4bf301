//! Two-stage training: a hybrid think/no-think stage, then a stage-2 variant
//! (think-only for the standard procedure).

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tft_tensor::{adamw_step, clip_grad_norm, AdamWConfig, AdamWState, LrSchedule, TensorError};

use crate::eval::{evaluate, EvalError, EvalMode};
use crate::model::{ModelError, PackedBatch, SamplingSpec, TransformerModel};
use crate::taskgen::{check_answer, Triplet};
use crate::templating::{strip_reasoning, RenderMode, RenderedSequence, TemplateError, Templater};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("non-finite {what} at step {step}; batch uids: {}", uids.join(", "))]
    NonFinite {
        what: &'static str,
        step: u64,
        uids: Vec<String>,
    },
    #[error("mixing ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error("mixing needs {needed} no-think samples, only {available} given")]
    InsufficientNothink { needed: usize, available: usize },
    #[error("variant {0} needs the stage-1 hybrid checkpoint")]
    MissingHybrid(String),
    #[error("unknown stage-2 variant {0:?}")]
    UnknownVariant(String),
    #[error("invalid stage spec: {0}")]
    Spec(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("self-distillation kept none of {generated} generated answers")]
    NothingDistilled { generated: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub min_lr_ratio: f64,
    pub clip_norm: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            warmup_frac: 0.05,
            min_lr_ratio: 0.1,
            clip_norm: 1.0,
        }
    }
}

impl OptimSpec {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Fraction of no-think renders; the think fraction is the remainder.
    pub nothink_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimSpec,
    pub seed: u64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nothink_fraction) {
            return Err(PipelineError::Ratio(self.nothink_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PipelineError::Spec("epochs and batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(PipelineError::Spec("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn think_fraction(&self) -> f64 {
        1.0 - self.nothink_fraction
    }

    pub fn steps(&self, n: usize) -> u64 {
        (n.div_ceil(self.batch_size) * self.epochs) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
}

/// Outcome of one stage. Everything but `wall_seconds` is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLog {
    pub name: String,
    pub n_sequences: usize,
    pub nothink_count: usize,
    pub steps_per_epoch: usize,
    pub losses: Vec<LossRecord>,
    pub wall_seconds: f64,
}

impl StageLog {
    pub fn epoch_means(&self) -> Vec<f64> {
        self.losses
            .chunks(self.steps_per_epoch.max(1))
            .map(|c| c.iter().map(|r| f64::from(r.loss)).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss,lr\n");
        for r in &self.losses {
            out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
        }
        out
    }
}

/// Replaces a `round(rho * n)` subset of think renders (chosen by a seeded
/// shuffle) with the no-think render of the same index, then shuffles.
pub fn mix_datasets(
    think: &[RenderedSequence],
    nothink: &[RenderedSequence],
    rho: f64,
    seed: u64,
) -> Result<Vec<RenderedSequence>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(PipelineError::Ratio(rho));
    }
    let n = think.len();
    let count = (rho * n as f64).round() as usize;
    if count > 0 && nothink.len() < n {
        return Err(PipelineError::InsufficientNothink {
            needed: n,
            available: nothink.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut use_nothink = vec![false; n];
    for &i in &order[..count] {
        use_nothink[i] = true;
    }
    let mut out: Vec<RenderedSequence> = (0..n)
        .map(|i| if use_nothink[i] { nothink[i].clone() } else { think[i].clone() })
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn render_all(
    templater: &Templater<'_>,
    pool: &[Triplet],
    mode: RenderMode,
) -> Result<Vec<RenderedSequence>> {
    pool.iter()
        .map(|tr| match mode {
            RenderMode::TrainThink => templater.render_train_think(tr),
            _ => templater.render_train_nothink(tr),
        })
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

fn count_nothink(data: &[RenderedSequence]) -> usize {
    data.iter().filter(|r| r.mode == RenderMode::TrainNothink).count()
}

/// Epochs of shuffled mini-batches with warmup-cosine AdamW and global-norm
/// clipping. Starts from fresh optimizer state. `on_step` sees every loss
/// record as it is produced.
pub fn train_stage(
    model: &mut TransformerModel,
    data: &[RenderedSequence],
    spec: &StageSpec,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<(StageLog, AdamWState, ChaCha8Rng)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let started = Instant::now();
    let steps_per_epoch = data.len().div_ceil(spec.batch_size);
    let total = spec.steps(data.len());
    let schedule = LrSchedule::warmup_cosine(spec.optim.lr, total, spec.optim.warmup_frac, spec.optim.min_lr_ratio);
    let mut state = AdamWState::new(model.params(), spec.optim.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut losses = Vec::with_capacity(total as usize);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0u64;
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.batch_size) {
            let batch = PackedBatch::for_training(
                chunk
                    .iter()
                    .map(|&i| (data[i].ids.as_slice(), data[i].loss_mask.as_slice())),
            );
            let uids = || chunk.iter().map(|&i| data[i].uid.clone()).collect();
            let loss = model.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(PipelineError::NonFinite {
                    what: "loss",
                    step,
                    uids: uids(),
                });
            }
            clip_grad_norm(model.params_mut(), spec.optim.clip_norm);
            let lr = schedule.lr_at(step);
            match adamw_step(model.params_mut(), &mut state, lr) {
                Ok(()) => {}
                Err(TensorError::NonFiniteGradient { .. }) => {
                    return Err(PipelineError::NonFinite {
                        what: "gradient",
                        step,
                        uids: uids(),
                    })
                }
                Err(e) => return Err(ModelError::from(e).into()),
            }
            let rec = LossRecord { step, loss, lr };
            on_step(&rec);
            losses.push(rec);
            step += 1;
        }
    }
    for p in model.params_mut() {
        p.zero_grad();
    }
    let log = StageLog {
        name: spec.name.clone(),
        n_sequences: data.len(),
        nothink_count: count_nothink(data),
        steps_per_epoch,
        losses,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((log, state, rng))
}

/// What a stage-2 variant gets to build its dataset from.
pub struct Stage2Inputs<'a, 't> {
    pub pool: &'a [Triplet],
    pub templater: &'a Templater<'t>,
    pub hybrid: Option<&'a TransformerModel>,
    pub seed: u64,
    /// Decoding used by self-distillation.
    pub distill: &'a SamplingSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Data {
    pub sequences: Vec<RenderedSequence>,
    /// Free-form facts for the run manifest, e.g. distillation yield.
    pub notes: BTreeMap<String, String>,
}

/// A stage-2 dataset recipe.
pub trait Stage2Variant: Send + Sync {
    fn name(&self) -> String;
    fn nothink_fraction(&self) -> f64;
    fn build(&self, inputs: &Stage2Inputs<'_, '_>) -> Result<Stage2Data>;
}

/// Think renders with a `rho` share swapped for no-think renders. `rho = 0`
/// is the standard procedure.
pub struct MixRho(pub f64);

impl Stage2Variant for MixRho {
    fn name(&self) -> String {
        format!("mix:{}", self.0)
    }

    fn nothink_fraction(&self) -> f64 {
        self.0
    }

    fn build(&self, inputs: &Stage2Inputs<'_, '_>) -> Result<Stage2Data> {
        let think = render_all(inputs.templater, inputs.pool, RenderMode::TrainThink)?;
        let nothink = if self.0 > 0.0 {
            render_all(inputs.templater, inputs.pool, RenderMode::TrainNothink)?
        } else {
            Vec::new()
        };
        let sequences = mix_datasets(&think, &nothink, self.0, inputs.seed)?;
        let mut notes = BTreeMap::new();
        notes.insert("nothink_count".into(), count_nothink(&sequences).to_string());
        Ok(Stage2Data { sequences, notes })
    }
}

/// Think-only stage 2.
pub struct Standard;

impl Stage2Variant for Standard {
    fn name(&self) -> String {
        "standard".into()
    }

    fn nothink_fraction(&self) -> f64 {
        0.0
    }

    fn build(&self, inputs: &Stage2Inputs<'_, '_>) -> Result<Stage2Data> {
        let data = MixRho(0.0).build(inputs)?;
        assert!(
            data.sequences.iter().all(|r| r.mode == RenderMode::TrainThink),
            "standard stage 2 must be think-only"
        );
        Ok(data)
    }
}

/// The think pool with reasoning stripped, rendered without a trace.
pub struct NothinkT1;

impl Stage2Variant for NothinkT1 {
    fn name(&self) -> String {
        "t1".into()
    }

    fn nothink_fraction(&self) -> f64 {
        1.0
    }

    fn build(&self, inputs: &Stage2Inputs<'_, '_>) -> Result<Stage2Data> {
        let stripped: Vec<Triplet> = inputs.pool.iter().map(strip_reasoning).collect();
        let mut sequences = render_all(inputs.templater, &stripped, RenderMode::TrainNothink)?;
        sequences.shuffle(&mut ChaCha8Rng::seed_from_u64(inputs.seed));
        let mut notes = BTreeMap::new();
        notes.insert("nothink_count".into(), sequences.len().to_string());
        Ok(Stage2Data { sequences, notes })
    }
}

/// No-think renders of the hybrid model's own no-think answers, keeping only
/// the ones judged correct.
pub struct NothinkT2;

impl Stage2Variant for NothinkT2 {
    fn name(&self) -> String {
        "t2".into()
    }

    fn nothink_fraction(&self) -> f64 {
        1.0
    }

    fn build(&self, inputs: &Stage2Inputs<'_, '_>) -> Result<Stage2Data> {
        let hybrid = inputs
            .hybrid
            .ok_or_else(|| PipelineError::MissingHybrid(self.name()))?;
        let spec = SamplingSpec {
            seed: inputs.seed,
            ..inputs.distill.clone()
        };
        let records = evaluate(hybrid, inputs.templater, inputs.pool, EvalMode::Nothink, 1, &spec)?;
        let mut kept = Vec::new();
        for (tr, rec) in inputs.pool.iter().zip(&records) {
            let Some(answer) = rec.answer.as_deref().filter(|_| rec.correct) else {
                continue;
            };
            debug_assert!(check_answer(&tr.x, answer));
            let distilled = Triplet {
                a: answer.to_string(),
                ..strip_reasoning(tr)
            };
            kept.push(inputs.templater.render_train_nothink(&distilled)?);
        }
        if kept.is_empty() {
            return Err(PipelineError::NothingDistilled {
                generated: records.len(),
            });
        }
        kept.shuffle(&mut ChaCha8Rng::seed_from_u64(inputs.seed));
        let mut notes = BTreeMap::new();
        notes.insert("distill_generated".into(), records.len().to_string());
        notes.insert("distill_kept".into(), kept.len().to_string());
        notes.insert("distill_filter".into(), "check_answer == true".into());
        notes.insert("nothink_count".into(), kept.len().to_string());
        Ok(Stage2Data {
            sequences: kept,
            notes,
        })
    }
}

type VariantFactory = fn(Option<&str>) -> Result<Box<dyn Stage2Variant>>;

/// Stage-2 variants by name. A name may take one `:`-separated argument,
/// as in `mix:0.25`.
pub struct VariantRegistry {
    factories: BTreeMap<String, VariantFactory>,
}

fn no_arg(name: &str, arg: Option<&str>) -> Result<()> {
    match arg {
        None => Ok(()),
        Some(_) => Err(PipelineError::UnknownVariant(name.to_string())),
    }
}

impl Default for VariantRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("standard", |arg| {
            no_arg("standard", arg)?;
            Ok(Box::new(Standard))
        });
        r.register("t1", |arg| {
            no_arg("t1", arg)?;
            Ok(Box::new(NothinkT1))
        });
        r.register("t2", |arg| {
            no_arg("t2", arg)?;
            Ok(Box::new(NothinkT2))
        });
        r.register("mix", |arg| {
            let raw = arg.ok_or_else(|| PipelineError::UnknownVariant("mix".into()))?;
            let rho: f64 = raw
                .parse()
                .map_err(|_| PipelineError::UnknownVariant(format!("mix:{raw}")))?;
            if !(0.0..=1.0).contains(&rho) {
                return Err(PipelineError::Ratio(rho));
            }
            Ok(Box::new(MixRho(rho)))
        });
        r
    }
}

impl VariantRegistry {
    pub fn register(&mut self, name: &str, factory: VariantFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn parse(&self, spec: &str) -> Result<Box<dyn Stage2Variant>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| PipelineError::UnknownVariant(spec.to_string()))?;
        factory(arg)
    }
}

pub fn parse_variant(spec: &str) -> Result<Box<dyn Stage2Variant>> {
    VariantRegistry::default().parse(spec)
}

/// Stage 1: the hybrid model, trained on a think/no-think mix of `pool`.
pub fn train_hybrid(
    model: &mut TransformerModel,
    templater: &Templater<'_>,
    pool: &[Triplet],
    spec: &StageSpec,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<(StageLog, AdamWState, ChaCha8Rng)> {
    let think = render_all(templater, pool, RenderMode::TrainThink)?;
    let nothink = render_all(templater, pool, RenderMode::TrainNothink)?;
    let data = mix_datasets(&think, &nothink, spec.nothink_fraction, spec.seed)?;
    train_stage(model, &data, spec, on_step)
}

/// Result of a stage-2 run on top of a hybrid model.
pub struct Stage2Run {
    pub model: TransformerModel,
    pub log: StageLog,
    pub optimizer: AdamWState,
    pub rng: ChaCha8Rng,
    pub notes: BTreeMap<String, String>,
}

pub fn train_stage2(
    hybrid: &TransformerModel,
    variant: &dyn Stage2Variant,
    templater: &Templater<'_>,
    pool: &[Triplet],
    spec: &StageSpec,
    distill: &SamplingSpec,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<Stage2Run> {
    let inputs = Stage2Inputs {
        pool,
        templater,
        hybrid: Some(hybrid),
        seed: spec.seed,
        distill,
    };
    let data = variant.build(&inputs)?;
    let spec = StageSpec {
        nothink_fraction: variant.nothink_fraction(),
        ..spec.clone()
    };
    let mut model = hybrid.clone();
    let (log, optimizer, rng) = train_stage(&mut model, &data.sequences, &spec, on_step)?;
    Ok(Stage2Run {
        model,
        log,
        optimizer,
        rng,
        notes: data.notes,
    })
}
