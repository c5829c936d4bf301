//! Synthetic arithmetic problems with step-by-step traces.
//!
//! Each task family sits behind [`TaskFamily`] and is looked up by name in a
//! [`TaskRegistry`]. Answers are checked by [`oracle_answer`], a standalone
//! parser that never touches the generators.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const OPERAND_MIN: i64 = 10;
const OPERAND_MAX: i64 = 99;
const VALUE_LIMIT: i64 = 999;
const MOD_PRIMES: [i64; 3] = [7, 11, 13];
pub const DEFAULT_MARKER_RATE: f64 = 0.3;
pub const MARKER: &str = "check";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskKind {
    ChainArith,
    ModArith,
}

impl TaskKind {
    pub fn short(self) -> &'static str {
        match self {
            TaskKind::ChainArith => "chain",
            TaskKind::ModArith => "mod",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::ChainArith => "CHAIN_ARITH",
            TaskKind::ModArith => "MOD_ARITH",
        })
    }
}

/// One problem: input `x`, optional reasoning trace `t`, answer `a`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub uid: String,
    pub task_kind: TaskKind,
    pub difficulty: u32,
    pub x: String,
    pub t: Option<String>,
    pub a: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
}

impl Op {
    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
        }
    }

    fn apply(self, lhs: i64, rhs: i64) -> i64 {
        match self {
            Op::Add => lhs + rhs,
            Op::Sub => lhs - rhs,
        }
    }
}

pub fn problem_uid(kind: TaskKind, difficulty: u32, x: &str) -> String {
    let digest = Sha256::digest(x.as_bytes());
    format!("{}-d{}-{}", kind.short(), difficulty, hex::encode(&digest[..8]))
}

fn push_step(lines: &mut Vec<String>, step: String, marker: bool) {
    let check = marker.then(|| format!("{MARKER} {step}"));
    lines.push(step);
    lines.extend(check);
}

/// Builds a chain problem from explicit operands. `markers[i]` adds a
/// verification line after step `i`.
pub fn chain_triplet(operands: &[i64], ops: &[Op], markers: &[bool]) -> Triplet {
    assert_eq!(operands.len(), ops.len() + 1, "one operator between each pair");
    let mut x = operands[0].to_string();
    for (op, v) in ops.iter().zip(&operands[1..]) {
        x.push(op.symbol());
        x.push_str(&v.to_string());
    }
    x.push('=');
    let mut acc = operands[0];
    let mut lines = Vec::new();
    for (i, (op, &v)) in ops.iter().zip(&operands[1..]).enumerate() {
        let next = op.apply(acc, v);
        let step = format!("{acc}{}{v}={next}", op.symbol());
        push_step(&mut lines, step, markers.get(i).copied().unwrap_or(false));
        acc = next;
    }
    let difficulty = ops.len() as u32;
    Triplet {
        uid: problem_uid(TaskKind::ChainArith, difficulty, &x),
        task_kind: TaskKind::ChainArith,
        difficulty,
        x,
        t: Some(lines.join("\n")),
        a: acc.to_string(),
    }
}

/// Builds a modular chain problem. The trace first reduces the leading
/// operand, then applies each operation to the running residue.
pub fn mod_triplet(operands: &[i64], ops: &[Op], modulus: i64, markers: &[bool]) -> Triplet {
    assert_eq!(operands.len(), ops.len() + 1, "one operator between each pair");
    let mut x = format!("({}", operands[0]);
    for (op, v) in ops.iter().zip(&operands[1..]) {
        x.push(op.symbol());
        x.push_str(&v.to_string());
    }
    x.push_str(&format!(") mod {modulus}="));
    let mut lines = Vec::new();
    let mut residue = operands[0].rem_euclid(modulus);
    push_step(
        &mut lines,
        format!("{} mod {modulus}={residue}", operands[0]),
        markers.first().copied().unwrap_or(false),
    );
    for (i, (op, &v)) in ops.iter().zip(&operands[1..]).enumerate() {
        let raw = op.apply(residue, v);
        let next = raw.rem_euclid(modulus);
        let step = format!("{residue}{}{v}={raw} mod {modulus}={next}", op.symbol());
        push_step(&mut lines, step, markers.get(i + 1).copied().unwrap_or(false));
        residue = next;
    }
    let difficulty = ops.len() as u32;
    Triplet {
        uid: problem_uid(TaskKind::ModArith, difficulty, &x),
        task_kind: TaskKind::ModArith,
        difficulty,
        x,
        t: Some(lines.join("\n")),
        a: residue.to_string(),
    }
}

fn draw_chain(difficulty: u32, rng: &mut dyn RngCore) -> (Vec<i64>, Vec<Op>) {
    let n = difficulty as usize + 1;
    let operands: Vec<i64> = (0..n).map(|_| rng.random_range(OPERAND_MIN..=OPERAND_MAX)).collect();
    let mut ops = Vec::with_capacity(n - 1);
    let mut acc = operands[0];
    for &v in &operands[1..] {
        let mut op = if rng.random_bool(0.5) { Op::Add } else { Op::Sub };
        if op.apply(acc, v).abs() > VALUE_LIMIT {
            op = if op == Op::Add { Op::Sub } else { Op::Add };
        }
        acc = op.apply(acc, v);
        ops.push(op);
    }
    (operands, ops)
}

fn draw_markers(steps: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<bool> {
    (0..steps).map(|_| rng.random_bool(rate.clamp(0.0, 1.0))).collect()
}

/// A family of generated problems.
pub trait TaskFamily: Send + Sync {
    fn kind(&self) -> TaskKind;

    /// Draws one problem with `difficulty` operations.
    fn generate(&self, difficulty: u32, marker_rate: f64, rng: &mut dyn RngCore) -> Triplet;

    /// Number of distinct problem texts at `difficulty`.
    fn capacity(&self, difficulty: u32) -> u128;
}

fn chain_capacity(difficulty: u32) -> u128 {
    let operands = (OPERAND_MAX - OPERAND_MIN + 1) as u128;
    operands
        .saturating_pow(difficulty + 1)
        .saturating_mul(2u128.saturating_pow(difficulty))
}

pub struct ChainArith;

impl TaskFamily for ChainArith {
    fn kind(&self) -> TaskKind {
        TaskKind::ChainArith
    }

    fn generate(&self, difficulty: u32, marker_rate: f64, rng: &mut dyn RngCore) -> Triplet {
        let (operands, ops) = draw_chain(difficulty.max(1), rng);
        let markers = draw_markers(ops.len(), marker_rate, rng);
        chain_triplet(&operands, &ops, &markers)
    }

    fn capacity(&self, difficulty: u32) -> u128 {
        // Clamping can merge a few sign patterns; the bound is an upper one.
        chain_capacity(difficulty)
    }
}

pub struct ModArith;

impl TaskFamily for ModArith {
    fn kind(&self) -> TaskKind {
        TaskKind::ModArith
    }

    fn generate(&self, difficulty: u32, marker_rate: f64, rng: &mut dyn RngCore) -> Triplet {
        let (operands, ops) = draw_chain(difficulty.max(1), rng);
        let modulus = MOD_PRIMES[rng.random_range(0..MOD_PRIMES.len())];
        let markers = draw_markers(ops.len() + 1, marker_rate, rng);
        mod_triplet(&operands, &ops, modulus, &markers)
    }

    fn capacity(&self, difficulty: u32) -> u128 {
        chain_capacity(difficulty).saturating_mul(MOD_PRIMES.len() as u128)
    }
}

/// Task families keyed by name.
pub struct TaskRegistry {
    families: BTreeMap<String, Box<dyn TaskFamily>>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        let mut r = Self {
            families: BTreeMap::new(),
        };
        r.register("chain_arith", Box::new(ChainArith));
        r.register("mod_arith", Box::new(ModArith));
        r
    }
}

impl TaskRegistry {
    pub fn register(&mut self, name: &str, family: Box<dyn TaskFamily>) {
        self.families.insert(name.to_string(), family);
    }

    pub fn get(&self, name: &str) -> Option<&dyn TaskFamily> {
        self.families.get(name).map(Box::as_ref)
    }

    pub fn by_kind(&self, kind: TaskKind) -> Option<&dyn TaskFamily> {
        self.families.values().find(|f| f.kind() == kind).map(Box::as_ref)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.families.keys().map(String::as_str)
    }
}

/// Draws one problem of `kind` from the builtin families.
pub fn gen_problem(kind: TaskKind, difficulty: u32, marker_rate: f64, rng: &mut dyn RngCore) -> Triplet {
    match kind {
        TaskKind::ChainArith => ChainArith.generate(difficulty, marker_rate, rng),
        TaskKind::ModArith => ModArith.generate(difficulty, marker_rate, rng),
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskError {
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("requested {requested} distinct problems at difficulty {difficulty}, only {capacity} exist")]
    Capacity {
        requested: u128,
        capacity: u128,
        difficulty: u32,
    },
    #[error("difficulty must be at least 1")]
    Difficulty,
    #[error("no task family registered for {0}")]
    UnknownFamily(String),
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn fail<T>(&self, message: &str) -> Result<T, TaskError> {
        Err(TaskError::Parse {
            position: self.pos,
            message: message.to_string(),
        })
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.src[self.pos..].starts_with(s.as_bytes()) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn number(&mut self) -> Result<i64, TaskError> {
        let start = self.pos;
        while matches!(self.peek(), Some(b'0'..=b'9')) {
            self.pos += 1;
        }
        if start == self.pos {
            return self.fail("expected a number");
        }
        let digits = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii digits");
        match digits.parse() {
            Ok(v) => Ok(v),
            Err(_) => {
                self.pos = start;
                self.fail("number too large")
            }
        }
    }

    fn term(&mut self) -> Result<i64, TaskError> {
        if self.eat("(") {
            let v = self.expr()?;
            if !self.eat(")") {
                return self.fail("expected ')'");
            }
            return Ok(v);
        }
        if self.eat("-") {
            return Ok(-self.number()?);
        }
        self.number()
    }

    fn expr(&mut self) -> Result<i64, TaskError> {
        let mut acc = self.term()?;
        loop {
            if self.eat("+") {
                acc = acc.checked_add(self.term()?).ok_or(TaskError::Parse {
                    position: self.pos,
                    message: "overflow".into(),
                })?;
            } else if self.eat("-") {
                acc = acc.checked_sub(self.term()?).ok_or(TaskError::Parse {
                    position: self.pos,
                    message: "overflow".into(),
                })?;
            } else {
                return Ok(acc);
            }
        }
    }
}

/// Evaluates a problem statement such as `23+45-17=` or `(23+45) mod 7=`.
pub fn oracle_value(x: &str) -> Result<i64, TaskError> {
    let mut p = Parser {
        src: x.as_bytes(),
        pos: 0,
    };
    let mut value = p.expr()?;
    if p.eat(" mod ") {
        let modulus = p.number()?;
        if modulus == 0 {
            return p.fail("modulus must be positive");
        }
        value = value.rem_euclid(modulus);
    }
    if !p.eat("=") {
        return p.fail("expected '='");
    }
    if p.pos != p.src.len() {
        return p.fail("trailing input");
    }
    Ok(value)
}

pub fn oracle_answer(x: &str) -> Result<String, TaskError> {
    oracle_value(x).map(|v| v.to_string())
}

fn normalize_integer(candidate: &str) -> Option<i64> {
    let s = candidate.trim();
    let (negative, digits) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let trimmed = digits.trim_start_matches('0');
    let magnitude: i64 = if trimmed.is_empty() { 0 } else { trimmed.parse().ok()? };
    Some(if negative { -magnitude } else { magnitude })
}

/// True iff `candidate`, after trimming whitespace, leading zeros and sign
/// normalization, equals the oracle answer for `x`.
pub fn check_answer(x: &str, candidate: &str) -> bool {
    match (oracle_value(x), normalize_integer(candidate)) {
        (Ok(want), Some(got)) => want == got,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task_kind: TaskKind,
    /// Difficulty of the train/validation/test splits; the hard split uses
    /// one more operation.
    pub difficulty: u32,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub hard: usize,
    pub seed: u64,
    pub marker_rate: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task_kind: TaskKind::ChainArith,
            difficulty: 3,
            train: 10_000,
            validation: 1_000,
            test: 1_000,
            hard: 1_000,
            seed: 7,
            marker_rate: DEFAULT_MARKER_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Triplet>,
    pub validation: Vec<Triplet>,
    pub test: Vec<Triplet>,
    pub hard: Vec<Triplet>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Triplet]> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            "hard" => Some(&self.hard),
            _ => None,
        }
    }

    pub const SPLITS: [&'static str; 4] = ["train", "validation", "test", "hard"];
}

fn draw_distinct(
    family: &dyn TaskFamily,
    difficulty: u32,
    marker_rate: f64,
    counts: &[usize],
    rng: &mut ChaCha8Rng,
    seen: &mut HashSet<String>,
) -> Result<Vec<Vec<Triplet>>, TaskError> {
    let requested: u128 = counts.iter().map(|&c| c as u128).sum();
    let capacity = family.capacity(difficulty);
    if requested > capacity {
        return Err(TaskError::Capacity {
            requested,
            capacity,
            difficulty,
        });
    }
    // The capacity is an upper bound, so rejection sampling is also capped.
    let budget = requested.saturating_mul(64).saturating_add(10_000);
    let mut attempts = 0u128;
    let mut out = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut split = Vec::with_capacity(count);
        while split.len() < count {
            attempts += 1;
            if attempts > budget {
                return Err(TaskError::Capacity {
                    requested,
                    capacity: seen.len() as u128,
                    difficulty,
                });
            }
            let tr = family.generate(difficulty, marker_rate, rng);
            if seen.insert(tr.x.clone()) {
                split.push(tr);
            }
        }
        out.push(split);
    }
    Ok(out)
}

/// Generates all splits. Problems are distinct across splits by text (and
/// hence by uid); the result depends only on `spec`.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset, TaskError> {
    make_dataset_with(&TaskRegistry::default(), spec)
}

pub fn make_dataset_with(registry: &TaskRegistry, spec: &DatasetSpec) -> Result<Dataset, TaskError> {
    if spec.difficulty == 0 {
        return Err(TaskError::Difficulty);
    }
    let family = registry
        .by_kind(spec.task_kind)
        .ok_or_else(|| TaskError::UnknownFamily(spec.task_kind.to_string()))?;
    let mut seen = HashSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut main = draw_distinct(
        family,
        spec.difficulty,
        spec.marker_rate,
        &[spec.train, spec.validation, spec.test],
        &mut rng,
        &mut seen,
    )?;
    let mut hard_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    hard_rng.set_stream(1);
    let mut hard = draw_distinct(
        family,
        spec.difficulty + 1,
        spec.marker_rate,
        &[spec.hard],
        &mut hard_rng,
        &mut seen,
    )?;
    let test = main.pop().expect("three splits");
    let validation = main.pop().expect("three splits");
    let train = main.pop().expect("three splits");
    Ok(Dataset {
        train,
        validation,
        test,
        hard: hard.pop().expect("one split"),
    })
}
