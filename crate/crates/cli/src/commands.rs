//! The four commands. Each writes under the resolved output directory:
//!
//! ```text
//! data/{train,validation,test,hard}.jsonl, data/manifest.json
//! checkpoints/vocab.txt, checkpoints/hybrid.ckpt, checkpoints/<variant>.ckpt
//! train/<stage>/{manifest.json, loss.csv, timing.json}
//! eval/<method>/{report.json, <split>.records.jsonl}
//! report/{table.txt, table.csv}
//! ```
//!
//! `timing.json` holds wall-clock figures; every other file is a pure
//! function of the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tft_core::checkpoint::{Checkpoint, RngState};
use tft_core::eval::{
    build_table, evaluate, read_records_jsonl, render_table, table_to_csv, write_records_jsonl, EvalMode,
    EvalReport, GenerationRecord, TableRow,
};
use tft_core::model::{init_model, TransformerModel};
use tft_core::pipeline::{parse_variant, train_hybrid, train_stage2, LossRecord, PipelineError, StageLog};
use tft_core::taskgen::{make_dataset, Dataset, DatasetSpec, Triplet};
use tft_core::templating::Templater;
use tft_core::tokenizer::{build_vocab, Vocab};

use crate::config::{RunConfig, Seeds};
use crate::sha256_hex;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("refusing to overwrite {}; pass --force", .0.display())]
    Refused(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// 0 success, 2 config/input, 3 refusal, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::Refused(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("manifest serializes");
    s.push('\n');
    s.into_bytes()
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    match paths.iter().find(|p| p.exists()) {
        Some(p) if !force => Err(CliError::Refused(p.clone())),
        _ => Ok(()),
    }
}

/// Where a config's artifacts live.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn for_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.resolved_output_dir())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_file(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.jsonl"))
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("{}.ckpt", slug(stage)))
    }

    pub fn vocab_file(&self) -> PathBuf {
        self.checkpoint_dir().join("vocab.txt")
    }

    pub fn train_dir(&self, stage: &str) -> PathBuf {
        self.root.join("train").join(slug(stage))
    }

    pub fn eval_dir(&self, method: &str) -> PathBuf {
        self.root.join("eval").join(slug(method))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// File-name form of a stage or method name (`mix:0.25` -> `mix-0.25`).
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '-' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub spec: DatasetSpec,
    pub files: BTreeMap<String, FileEntry>,
    /// Hash over the per-file hashes in split order.
    pub content_hash: String,
}

fn content_hash(files: &BTreeMap<String, FileEntry>) -> String {
    let joined: Vec<&str> = Dataset::SPLITS
        .iter()
        .filter_map(|s| files.get(*s).map(|f| f.sha256.as_str()))
        .collect();
    sha256_hex(joined.join("\n").as_bytes())
}

fn triplets_jsonl(split: &[Triplet]) -> String {
    let mut out = String::new();
    for tr in split {
        out.push_str(&serde_json::to_string(tr).expect("triplet serializes"));
        out.push('\n');
    }
    out
}

/// `gen-data`: writes every split plus a manifest with content hashes.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<DataManifest> {
    let layout = Layout::for_config(cfg);
    let mut targets: Vec<PathBuf> = Dataset::SPLITS.iter().map(|s| layout.split_file(s)).collect();
    targets.push(layout.data_manifest());
    refuse_existing(&targets, force)?;
    let spec = cfg.dataset_spec();
    let ds = make_dataset(&spec).map_err(|e| CliError::Config(e.to_string()))?;
    let mut files = BTreeMap::new();
    for name in Dataset::SPLITS {
        let split = ds.split(name).expect("known split");
        let text = triplets_jsonl(split);
        write_file(&layout.split_file(name), text.as_bytes())?;
        files.insert(
            name.to_string(),
            FileEntry {
                path: format!("{name}.jsonl"),
                sha256: sha256_hex(text.as_bytes()),
                count: split.len(),
            },
        );
    }
    let manifest = DataManifest {
        spec,
        content_hash: content_hash(&files),
        files,
    };
    write_file(&layout.data_manifest(), &to_json(&manifest))?;
    Ok(manifest)
}

/// Reads the dataset written by `gen-data`, checking it against the
/// manifest and the config.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, DataManifest)> {
    let layout = Layout::for_config(cfg);
    let manifest_path = layout.data_manifest();
    if !manifest_path.exists() {
        return Err(CliError::Input(format!(
            "no dataset at {}; run gen-data first",
            layout.data_dir().display()
        )));
    }
    let manifest: DataManifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", manifest_path.display())))?;
    if manifest.spec != cfg.dataset_spec() {
        return Err(CliError::Input(
            "dataset was generated from a different data config; rerun gen-data --force".into(),
        ));
    }
    let mut splits: BTreeMap<&str, Vec<Triplet>> = BTreeMap::new();
    for name in Dataset::SPLITS {
        let entry = manifest
            .files
            .get(name)
            .ok_or_else(|| CliError::Input(format!("dataset manifest lacks split {name}")))?;
        let path = layout.data_dir().join(&entry.path);
        if !path.exists() {
            return Err(CliError::Input(format!("missing dataset file {}", path.display())));
        }
        let bytes = read_file(&path)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(CliError::Input(format!("{} does not match its manifest hash", path.display())));
        }
        let text = String::from_utf8(bytes).map_err(|_| CliError::Input(format!("{} is not UTF-8", path.display())))?;
        let split = text
            .lines()
            .map(serde_json::from_str)
            .collect::<Result<Vec<Triplet>, _>>()
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        splits.insert(name, split);
    }
    let mut take = |n: &str| splits.remove(n).unwrap_or_default();
    let ds = Dataset {
        train: take("train"),
        validation: take("validation"),
        test: take("test"),
        hard: take("hard"),
    };
    Ok((ds, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub n_sequences: usize,
    pub nothink_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub epoch_mean_loss: Vec<f64>,
    pub final_loss: f32,
    pub loss_csv: FileEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub stage: String,
    pub config: RunConfig,
    pub training_fingerprint: String,
    pub seeds: Seeds,
    pub dataset_hash: String,
    pub datasets: BTreeMap<String, String>,
    pub summary: StageSummary,
    pub notes: BTreeMap<String, String>,
    /// Stage name -> checkpoint entry (the hybrid plus this stage's output).
    pub checkpoints: BTreeMap<String, FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timing {
    wall_seconds: f64,
    steps_per_second: f64,
}

/// What a `train` invocation produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub hybrid: TrainManifest,
    /// Whether stage 1 ran in this invocation (false when reused).
    pub hybrid_trained: bool,
    pub stage2: TrainManifest,
    pub hybrid_log: Option<StageLog>,
    pub stage2_log: StageLog,
}

fn checkpoint_entry(path: &Path, bytes: &[u8]) -> FileEntry {
    FileEntry {
        path: path.file_name().expect("file name").to_string_lossy().into_owned(),
        sha256: sha256_hex(bytes),
        count: bytes.len(),
    }
}

fn dataset_hashes(manifest: &DataManifest) -> BTreeMap<String, String> {
    manifest
        .files
        .iter()
        .map(|(k, v)| (k.clone(), v.sha256.clone()))
        .collect()
}

fn summarize(log: &StageLog, spec_seed: u64, cfg: &RunConfig, loss_csv: &[u8]) -> StageSummary {
    StageSummary {
        name: log.name.clone(),
        n_sequences: log.n_sequences,
        nothink_count: log.nothink_count,
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        steps: log.losses.len(),
        seed: spec_seed,
        epoch_mean_loss: log.epoch_means(),
        final_loss: log.losses.last().map_or(f32::NAN, |r| r.loss),
        loss_csv: FileEntry {
            path: "loss.csv".into(),
            sha256: sha256_hex(loss_csv),
            count: log.losses.len(),
        },
    }
}

fn write_stage(
    layout: &Layout,
    log: &StageLog,
    manifest: &TrainManifest,
    loss_csv: &[u8],
) -> Result<()> {
    let dir = layout.train_dir(&manifest.stage);
    write_file(&dir.join("loss.csv"), loss_csv)?;
    write_file(&dir.join("manifest.json"), &to_json(manifest))?;
    let timing = Timing {
        wall_seconds: log.wall_seconds,
        steps_per_second: log.losses.len() as f64 / log.wall_seconds.max(1e-9),
    };
    write_file(&dir.join("timing.json"), &to_json(&timing))
}

/// Loads a checkpoint and checks it against the task vocabulary (and the
/// `vocab.txt` stored next to it, when present).
pub fn load_checkpoint(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Input(format!("no checkpoint at {}", path.display())));
    }
    let ck = Checkpoint::load(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let size = ck.model.config().vocab_size;
    if size != vocab.len() {
        return Err(CliError::Input(format!(
            "checkpoint vocabulary has {size} tokens, the task vocabulary {}",
            vocab.len()
        )));
    }
    let stored = path.with_file_name("vocab.txt");
    if stored.exists() {
        let text = String::from_utf8(read_file(&stored)?)
            .map_err(|_| CliError::Input(format!("{} is not UTF-8", stored.display())))?;
        let theirs = Vocab::from_file_string(&text).map_err(|e| CliError::Input(format!("{}: {e}", stored.display())))?;
        if &theirs != vocab {
            return Err(CliError::Input(format!(
                "{} does not match the task vocabulary",
                stored.display()
            )));
        }
    }
    Ok(ck)
}

fn read_train_manifest(path: &Path) -> Result<TrainManifest> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// `train`: stage 1 (reused when a matching hybrid checkpoint exists) then
/// the stage-2 `variant`. `t2` needs an existing hybrid checkpoint.
pub fn train(cfg: &RunConfig, variant_spec: &str, force: bool, verbose: bool) -> Result<TrainOutcome> {
    let variant = parse_variant(variant_spec).map_err(|e| CliError::Config(e.to_string()))?;
    let stage2_name = variant.name();
    let layout = Layout::for_config(cfg);
    let (ds, data_manifest) = load_dataset(cfg)?;
    let vocab = build_vocab();
    let model_cfg = cfg.model_config(vocab.len());
    let templater = Templater::new(&vocab, model_cfg.context_len);
    for tr in &ds.train {
        templater
            .render_train_think(tr)
            .and_then(|_| templater.render_train_nothink(tr))
            .map_err(|e| CliError::Config(format!("model.context_len too small: {e}")))?;
    }

    let final_path = layout.checkpoint(&stage2_name);
    refuse_existing(
        &[final_path.clone(), layout.train_dir(&stage2_name).join("manifest.json")],
        force,
    )?;

    let seeds = cfg.seeds();
    let fingerprint = cfg.training_fingerprint();
    let datasets = dataset_hashes(&data_manifest);
    let hybrid_path = layout.checkpoint("hybrid");
    let hybrid_manifest_path = layout.train_dir("hybrid").join("manifest.json");
    let needs_existing = variant_spec == "t2";
    let reusable = hybrid_path.exists() && hybrid_manifest_path.exists();
    if needs_existing && !reusable {
        return Err(CliError::Input(format!(
            "variant t2 distills from the stage-1 checkpoint, but {} does not exist; run `train --variant standard` first",
            hybrid_path.display()
        )));
    }
    write_file(&layout.vocab_file(), vocab.to_file_string().as_bytes())?;

    let verbose_cb = |stage: String| {
        move |r: &LossRecord| {
            if verbose && (r.step % 50 == 0) {
                eprintln!("[{stage}] step {} loss {:.4} lr {:.3e}", r.step, r.loss, r.lr);
            }
        }
    };

    let (hybrid_model, hybrid_manifest, hybrid_log) = if reusable && (needs_existing || !force) {
        let m = read_train_manifest(&hybrid_manifest_path)?;
        if m.training_fingerprint != fingerprint {
            return Err(CliError::Input(format!(
                "{} was trained from a different config; pass --force to retrain it",
                hybrid_path.display()
            )));
        }
        let ck = load_checkpoint(&hybrid_path, &vocab)?;
        let bytes = read_file(&hybrid_path)?;
        if m.checkpoints.get("hybrid").map(|e| e.sha256.as_str()) != Some(sha256_hex(&bytes).as_str()) {
            return Err(CliError::Input(format!("{} does not match its manifest hash", hybrid_path.display())));
        }
        (ck.model, m, None)
    } else {
        let spec = cfg.hybrid_stage();
        let mut model = init_model(model_cfg).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cb = verbose_cb("hybrid".into());
        let (log, opt, rng) = train_hybrid(&mut model, &templater, &ds.train, &spec, &mut cb)?;
        let ck = Checkpoint {
            model,
            optimizer: Some(opt),
            rng: Some(RngState::capture(&rng)),
        };
        let bytes = ck.to_bytes();
        write_file(&hybrid_path, &bytes)?;
        let csv = log.loss_csv();
        let mut checkpoints = BTreeMap::new();
        checkpoints.insert("hybrid".to_string(), checkpoint_entry(&hybrid_path, &bytes));
        let mut notes = BTreeMap::new();
        notes.insert("nothink_fraction".into(), spec.nothink_fraction.to_string());
        let manifest = TrainManifest {
            stage: "hybrid".into(),
            config: cfg.clone(),
            training_fingerprint: fingerprint.clone(),
            seeds,
            dataset_hash: data_manifest.content_hash.clone(),
            datasets: datasets.clone(),
            summary: summarize(&log, spec.seed, cfg, csv.as_bytes()),
            notes,
            checkpoints,
        };
        write_stage(&layout, &log, &manifest, csv.as_bytes())?;
        (ck.model, manifest, Some(log))
    };

    let spec = cfg.stage2(&stage2_name);
    let distill = cfg.sampling(EvalMode::Nothink);
    let mut cb = verbose_cb(stage2_name.clone());
    let run = train_stage2(
        &hybrid_model,
        variant.as_ref(),
        &templater,
        &ds.train,
        &spec,
        &distill,
        &mut cb,
    )?;
    let ck = Checkpoint {
        model: run.model,
        optimizer: Some(run.optimizer),
        rng: Some(RngState::capture(&run.rng)),
    };
    let bytes = ck.to_bytes();
    write_file(&final_path, &bytes)?;
    let csv = run.log.loss_csv();
    let mut checkpoints = hybrid_manifest.checkpoints.clone();
    checkpoints.insert(stage2_name.clone(), checkpoint_entry(&final_path, &bytes));
    let mut notes = run.notes;
    notes.insert("nothink_fraction".into(), variant.nothink_fraction().to_string());
    notes.insert("optimizer_state".into(), "fresh".into());
    let manifest = TrainManifest {
        stage: stage2_name,
        config: cfg.clone(),
        training_fingerprint: fingerprint,
        seeds,
        dataset_hash: data_manifest.content_hash.clone(),
        datasets,
        summary: summarize(&run.log, spec.seed, cfg, csv.as_bytes()),
        notes,
        checkpoints,
    };
    write_stage(&layout, &run.log, &manifest, csv.as_bytes())?;
    Ok(TrainOutcome {
        hybrid: hybrid_manifest,
        hybrid_trained: hybrid_log.is_some(),
        stage2: manifest,
        hybrid_log,
        stage2_log: run.log,
    })
}

/// Loads the reports written by `eval` (a JSON list per file).
pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub struct EvalOptions<'a> {
    pub checkpoint: &'a Path,
    pub mode: EvalMode,
    /// Method name in reports; defaults to `<checkpoint stem>-<mode>`.
    pub method: Option<&'a str>,
    /// A think-mode `report.json` to take compression ratios against.
    pub reference: Option<&'a Path>,
    pub force: bool,
}

/// `eval`: every configured benchmark split, raw records plus reports.
pub fn eval(cfg: &RunConfig, opts: &EvalOptions<'_>) -> Result<Vec<EvalReport>> {
    let layout = Layout::for_config(cfg);
    let vocab = build_vocab();
    let ck = load_checkpoint(opts.checkpoint, &vocab)?;
    let method = match opts.method {
        Some(m) => m.to_string(),
        None => {
            let stem = opts
                .checkpoint
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            format!("{stem}-{}", opts.mode.as_str())
        }
    };
    let dir = layout.eval_dir(&method);
    refuse_existing(&[dir.join("report.json")], opts.force)?;
    let references = match opts.reference {
        Some(p) => {
            let r = read_reports(p)?;
            if r.iter().any(|x| x.mode != EvalMode::Think) {
                return Err(CliError::Input(format!("{} is not a think-mode report", p.display())));
            }
            Some(r)
        }
        None => None,
    };
    let (ds, _) = load_dataset(cfg)?;
    let model: TransformerModel = ck.model;
    let templater = Templater::new(&vocab, model.config().context_len);
    let spec = cfg.sampling(opts.mode);
    let markers = vocab.special().markers.clone();
    let mut reports = Vec::new();
    for bench in &cfg.eval.benchmarks {
        let problems = ds.split(&bench.split).expect("validated split");
        let records = evaluate(&model, &templater, problems, opts.mode, bench.n_samples, &spec)
            .map_err(|e| CliError::Input(e.to_string()))?;
        write_file(
            &dir.join(format!("{}.records.jsonl", bench.split)),
            write_records_jsonl(&records).as_bytes(),
        )?;
        let mut report = EvalReport::from_records(&method, &bench.split, opts.mode, &records, &markers)
            .map_err(|e| CliError::Input(e.to_string()))?;
        if let Some(refs) = &references {
            let r = refs.iter().find(|r| r.split == bench.split).ok_or_else(|| {
                CliError::Input(format!("reference report has no {} split", bench.split))
            })?;
            report = report
                .with_reference(r)
                .map_err(|e| CliError::Input(e.to_string()))?;
        }
        reports.push(report);
    }
    write_file(&dir.join("report.json"), &to_json(&reports))?;
    Ok(reports)
}

/// Recomputes a report from its persisted records.
pub fn recompute_report(report: &EvalReport, records_path: &Path) -> Result<EvalReport> {
    let text = String::from_utf8(read_file(records_path)?)
        .map_err(|_| CliError::Input(format!("{} is not UTF-8", records_path.display())))?;
    let records: Vec<GenerationRecord> =
        read_records_jsonl(&text).map_err(|e| CliError::Input(format!("{}: {e}", records_path.display())))?;
    let markers = build_vocab().special().markers.clone();
    let mut fresh = EvalReport::from_records(&report.method, &report.split, report.mode, &records, &markers)
        .map_err(|e| CliError::Input(e.to_string()))?;
    fresh.reference = report.reference.clone();
    Ok(fresh)
}

pub struct ReportOutput {
    pub rows: Vec<TableRow>,
    pub warnings: Vec<String>,
    pub text: String,
    pub csv: String,
}

/// `report`: one table over several `report.json` files.
pub fn report(cfg: &RunConfig, inputs: &[PathBuf], reference: Option<&str>, force: bool) -> Result<ReportOutput> {
    if inputs.is_empty() {
        return Err(CliError::Input("no report files given".into()));
    }
    let layout = Layout::for_config(cfg);
    let dir = layout.report_dir();
    refuse_existing(&[dir.join("table.txt"), dir.join("table.csv")], force)?;
    let mut all = Vec::new();
    for p in inputs {
        all.extend(read_reports(p)?);
    }
    if let Some(name) = reference {
        if !all.iter().any(|r| r.method == name) {
            return Err(CliError::Input(format!("no report for reference method {name}")));
        }
    }
    let (rows, warnings) = build_table(&all, reference);
    let text = render_table(&rows);
    let csv = table_to_csv(&rows).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(&dir.join("table.txt"), text.as_bytes())?;
    write_file(&dir.join("table.csv"), csv.as_bytes())?;
    Ok(ReportOutput {
        rows,
        warnings,
        text,
        csv,
    })
}

/// sha256 of every file under `root` except `timing.json`, keyed by
/// relative path.
pub fn artifact_hashes(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .collect::<Result<_, _>>()
            .map_err(io_err(dir))?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != "timing.json") {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&read_file(&path)?));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}
