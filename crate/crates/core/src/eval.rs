//! Sampling-based evaluation: answer extraction, judging, pass@k / avg@k,
//! token accounting, compression ratios and reasoning-marker counts.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{generate, ModelError, SamplingSpec, TransformerModel};
use crate::taskgen::{check_answer, Triplet};
use crate::templating::{TemplateError, Templater};
use crate::tokenizer::{TokenId, Vocab, ANSWER_TAG, EOS, IM_END, PAD, THINK_CLOSE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")]
    PassAtK { n: u64, c: u64, k: u64 },
    #[error("avg@k of an empty sample set")]
    NoSamples,
    #[error("reference token count must be positive, got {0}")]
    ZeroReference(f64),
    #[error("marker average over zero questions")]
    NoQuestions,
    #[error("n_samples must be at least 1")]
    ZeroSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("report table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalMode {
    Think,
    Nothink,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Think => "think",
            EvalMode::Nothink => "nothink",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "think" => Ok(EvalMode::Think),
            "nothink" => Ok(EvalMode::Nothink),
            other => Err(format!("unknown mode {other:?} (expected think or nothink)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub uid: String,
    pub mode: EvalMode,
    pub sample: u32,
    pub output_ids: Vec<TokenId>,
    pub text: String,
    pub answer: Option<String>,
    pub correct: bool,
    pub visible_tokens: usize,
    pub think_tokens: usize,
    /// Prompt or generation ran out of context.
    pub overflow: bool,
}

/// Unbiased estimator `1 - C(n-c, k) / C(n, k)` as a running product.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    if c > n || k == 0 || k > n {
        return Err(EvalError::PassAtK { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if k == 1 {
        // exact, so that avg@n == pass@1 bit for bit
        return Ok(c as f64 / n as f64);
    }
    // C(n-c, k) / C(n, k) = prod_{i=0}^{k-1} (n-c-i) / (n-i)
    let mut miss = 1.0f64;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok(1.0 - miss)
}

pub fn avg_at_k(flags: &[bool]) -> Result<f64, EvalError> {
    if flags.is_empty() {
        return Err(EvalError::NoSamples);
    }
    let hits = flags.iter().filter(|&&f| f).count();
    Ok(hits as f64 / flags.len() as f64)
}

/// Text between the first `<answer>` and the next `<|im_end|>`, `<eos>` or
/// `<answer>` (or the end of the output).
pub fn extract_answer(vocab: &Vocab, ids: &[TokenId]) -> Option<String> {
    let start = ids.iter().position(|&t| t == ANSWER_TAG)? + 1;
    let len = ids[start..]
        .iter()
        .position(|&t| matches!(t, IM_END | EOS | ANSWER_TAG))
        .unwrap_or(ids.len() - start);
    vocab.decode(&ids[start..start + len]).ok()
}

/// `(visible_total, think_span)` of a generation. In think mode the prompt
/// ends inside an open think block, so the span runs from the first
/// generated id to the first `</think>`. In no-think mode the think block
/// is part of the prompt and the span is 0.
pub fn count_tokens(ids: &[TokenId], mode: EvalMode) -> (usize, usize) {
    let visible = ids.iter().filter(|&&t| t != PAD).count();
    let think = match mode {
        EvalMode::Nothink => 0,
        EvalMode::Think => {
            let end = ids.iter().position(|&t| t == THINK_CLOSE).unwrap_or(ids.len());
            ids[..end].iter().filter(|&&t| t != PAD).count()
        }
    };
    (visible, think)
}

/// `100 * method / reference`, rounded to one decimal.
pub fn compression_ratio(tokens_method: f64, tokens_reference: f64) -> Result<f64, EvalError> {
    if !(tokens_reference > 0.0) {
        return Err(EvalError::ZeroReference(tokens_reference));
    }
    Ok((1000.0 * tokens_method / tokens_reference).round() / 10.0)
}

/// Average of `total` over `questions`, rounded to two decimals.
pub fn marker_average(total: u64, questions: usize) -> Result<f64, EvalError> {
    if questions == 0 {
        return Err(EvalError::NoQuestions);
    }
    Ok((100.0 * total as f64 / questions as f64).round() / 100.0)
}

/// Total marker occurrences across `records` and the per-question average.
pub fn count_markers(records: &[GenerationRecord], markers: &[TokenId]) -> Result<(u64, f64), EvalError> {
    let total = records
        .iter()
        .flat_map(|r| &r.output_ids)
        .filter(|t| markers.contains(t))
        .count() as u64;
    let mut uids: Vec<&str> = records.iter().map(|r| r.uid.as_str()).collect();
    uids.sort_unstable();
    uids.dedup();
    Ok((total, marker_average(total, uids.len())?))
}

/// Seed of one `(problem, sample)` generation, independent of scheduling.
pub fn sample_seed(base: u64, uid: &str, sample: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(uid.as_bytes());
    h.update(sample.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Generates `n_samples` outputs per problem and judges them. Records come
/// back ordered by (problem order, sample index) whatever the thread count.
pub fn evaluate(
    model: &TransformerModel,
    templater: &Templater<'_>,
    problems: &[Triplet],
    mode: EvalMode,
    n_samples: u32,
    spec: &SamplingSpec,
) -> Result<Vec<GenerationRecord>, EvalError> {
    if n_samples == 0 {
        return Err(EvalError::ZeroSamples);
    }
    spec.validate()?;
    let vocab = templater.vocab();
    let jobs: Vec<(&Triplet, u32)> = problems
        .iter()
        .flat_map(|p| (0..n_samples).map(move |s| (p, s)))
        .collect();
    jobs.par_iter()
        .map(|&(p, sample)| {
            let prompt = match mode {
                EvalMode::Think => templater.render_infer_think(&p.uid, &p.x),
                EvalMode::Nothink => templater.render_infer_nothink(&p.uid, &p.x),
            };
            let prompt = match prompt {
                Ok(ids) => ids,
                Err(TemplateError::ContextOverflow { .. }) => {
                    return Ok(GenerationRecord {
                        uid: p.uid.clone(),
                        mode,
                        sample,
                        output_ids: Vec::new(),
                        text: String::new(),
                        answer: None,
                        correct: false,
                        visible_tokens: 0,
                        think_tokens: 0,
                        overflow: true,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            let sample_spec = SamplingSpec {
                seed: sample_seed(spec.seed, &p.uid, sample),
                ..spec.clone()
            };
            let out = generate(model, &prompt, &sample_spec)?;
            let stopped = out.last().is_some_and(|t| spec.stop_token_ids.contains(t));
            let overflow = !stopped && prompt.len() + out.len() >= templater.context_len();
            let answer = extract_answer(vocab, &out);
            let correct = !overflow && answer.as_deref().is_some_and(|a| check_answer(&p.x, a));
            let (visible_tokens, think_tokens) = count_tokens(&out, mode);
            Ok(GenerationRecord {
                uid: p.uid.clone(),
                mode,
                sample,
                text: vocab.decode(&out).unwrap_or_default(),
                output_ids: out,
                answer,
                correct,
                visible_tokens,
                think_tokens,
                overflow,
            })
        })
        .collect()
}

/// Aggregates of one evaluation. A pure function of its records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub mode: EvalMode,
    pub n_problems: usize,
    pub n_samples: u32,
    /// Mean per-sample correctness (avg@n).
    pub accuracy: f64,
    /// Mean over problems of pass@n.
    pub pass_at_n: f64,
    pub mean_tokens: f64,
    pub mean_think_tokens: f64,
    pub overflow_count: usize,
    pub marker_total: u64,
    pub marker_avg: f64,
    pub reference: Option<ReferenceRatio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRatio {
    pub method: String,
    pub mean_tokens: f64,
    pub ratio_percent: f64,
}

impl EvalReport {
    pub fn from_records(
        method: &str,
        split: &str,
        mode: EvalMode,
        records: &[GenerationRecord],
        markers: &[TokenId],
    ) -> Result<Self, EvalError> {
        if records.is_empty() {
            return Err(EvalError::NoSamples);
        }
        // group by uid in first-seen order
        let mut groups: Vec<(&str, Vec<bool>)> = Vec::new();
        for r in records {
            match groups.last_mut() {
                Some((uid, flags)) if *uid == r.uid => flags.push(r.correct),
                _ => groups.push((&r.uid, vec![r.correct])),
            }
        }
        let n_samples = groups[0].1.len() as u32;
        if groups.iter().any(|(_, f)| f.len() as u32 != n_samples) {
            return Err(EvalError::Table("uneven sample counts per problem".into()));
        }
        let flags: Vec<bool> = records.iter().map(|r| r.correct).collect();
        let mut pass = 0.0;
        for (_, f) in &groups {
            let c = f.iter().filter(|&&x| x).count() as u64;
            pass += pass_at_k(n_samples as u64, c, n_samples as u64)?;
        }
        let n = records.len() as f64;
        let (marker_total, marker_avg) = count_markers(records, markers)?;
        Ok(Self {
            method: method.to_string(),
            split: split.to_string(),
            mode,
            n_problems: groups.len(),
            n_samples,
            accuracy: avg_at_k(&flags)?,
            pass_at_n: pass / groups.len() as f64,
            mean_tokens: records.iter().map(|r| r.visible_tokens as f64).sum::<f64>() / n,
            mean_think_tokens: records.iter().map(|r| r.think_tokens as f64).sum::<f64>() / n,
            overflow_count: records.iter().filter(|r| r.overflow).count(),
            marker_total,
            marker_avg,
            reference: None,
        })
    }

    pub fn with_reference(mut self, reference: &EvalReport) -> Result<Self, EvalError> {
        self.reference = Some(ReferenceRatio {
            method: reference.method.clone(),
            mean_tokens: reference.mean_tokens,
            ratio_percent: compression_ratio(self.mean_tokens, reference.mean_tokens)?,
        });
        Ok(self)
    }
}

pub fn write_records_jsonl(records: &[GenerationRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_records_jsonl(text: &str) -> Result<Vec<GenerationRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub split: String,
    pub method: String,
    /// Accuracy in percent.
    pub acc: f64,
    pub tok: f64,
    /// Percent of the split's Thinking row; absent without a reference.
    pub ratio: Option<f64>,
}

/// Rows grouped by split (first-seen order). Within a split, the ratio is
/// taken against the think-mode report named `reference`, or the first
/// think-mode report when `reference` is `None`. Splits without one get no
/// ratios and a warning.
pub fn build_table(reports: &[EvalReport], reference: Option<&str>) -> (Vec<TableRow>, Vec<String>) {
    let mut splits: Vec<&str> = Vec::new();
    for r in reports {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for split in splits {
        let group: Vec<&EvalReport> = reports.iter().filter(|r| r.split == split).collect();
        let think = group.iter().find(|r| {
            r.mode == EvalMode::Think && reference.is_none_or(|name| r.method == name)
        });
        let single = group.len() == 1;
        let base = match think {
            Some(t) => Some(t.mean_tokens),
            None if single => Some(group[0].mean_tokens),
            None => {
                warnings.push(format!("split {split}: no Thinking reference, ratios omitted"));
                None
            }
        };
        for r in group {
            rows.push(TableRow {
                split: split.to_string(),
                method: r.method.clone(),
                acc: 100.0 * r.accuracy,
                tok: r.mean_tokens,
                ratio: base.and_then(|b| compression_ratio(r.mean_tokens, b).ok()),
            });
        }
    }
    (rows, warnings)
}

pub fn render_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let mut split: Option<&str> = None;
    for r in rows {
        if split != Some(r.split.as_str()) {
            if split.is_some() {
                out.push('\n');
            }
            writeln!(out, "[{}]", r.split).unwrap();
            writeln!(out, "{:<width$}  {:>6}  {:>7}  {:>6}", "Method", "Acc.", "Tok.", "Ratio").unwrap();
            split = Some(&r.split);
        }
        let ratio = r.ratio.map_or("-".to_string(), |x| format!("{x:.1}%"));
        writeln!(out, "{:<width$}  {:>6.1}  {:>7.1}  {:>6}", r.method, r.acc, r.tok, ratio).unwrap();
    }
    out
}

pub fn table_to_csv(rows: &[TableRow]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Table(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Table(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Table(e.to_string()))
}

pub fn table_from_csv(text: &str) -> Result<Vec<TableRow>, EvalError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| EvalError::Table(e.to_string()))
}
