//! Decoder-only transformer: learned absolute positions, pre-norm blocks with
//! causal multi-head attention and a GELU MLP, tied input/output embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tft_tensor::{gradcheck, Element, Graph, Segment, Tensor, TensorError, Var};

use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const MLP_RATIO: usize = 4;
/// Tensors per transformer block, in [`block_param_names`] order.
const PER_BLOCK: usize = 12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        MLP_RATIO * self.d_model
    }
}

fn block_param_names(layer: usize) -> [String; PER_BLOCK] {
    [
        "ln1.gamma",
        "ln1.beta",
        "attn.qkv.weight",
        "attn.qkv.bias",
        "attn.proj.weight",
        "attn.proj.bias",
        "ln2.gamma",
        "ln2.beta",
        "mlp.fc.weight",
        "mlp.fc.bias",
        "mlp.proj.weight",
        "mlp.proj.bias",
    ]
    .map(|s| format!("blocks.{layer}.{s}"))
}

/// Parameter names and shapes in storage order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff());
    let mut out = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.context_len, d]),
    ];
    for layer in 0..cfg.n_layers {
        let shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ];
        out.extend(block_param_names(layer).into_iter().zip(shapes));
    }
    out.push(("ln_f.gamma".to_string(), vec![d]));
    out.push(("ln_f.beta".to_string(), vec![d]));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Normal(0, 0.02) weights, residual projections scaled by 1/sqrt(2 L),
/// zero biases, unit layer-norm gains.
pub fn init_model(config: ModelConfig) -> Result<TransformerModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, shape) in parameter_layout(&config) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".gamma") {
            vec![1.0; n]
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            vec![0.0; n]
        } else {
            let std = if name.ends_with("attn.proj.weight") || name.ends_with("mlp.proj.weight") {
                residual_std
            } else {
                INIT_STD
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        names.push(name);
        params.push(Tensor::new(shape, data)?.with_grad());
    }
    Ok(TransformerModel {
        config,
        names,
        params,
    })
}

/// Sequences packed row-wise for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    /// Rows whose next-token prediction enters the loss.
    pub loss_rows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl PackedBatch {
    /// Packs `(ids, loss_mask)` pairs for next-token training: row `i`
    /// predicts `ids[i + 1]` and counts iff `loss_mask[i + 1]`.
    pub fn for_training<'a, I>(seqs: I) -> Self
    where
        I: IntoIterator<Item = (&'a [TokenId], &'a [bool])>,
    {
        let mut b = PackedBatch {
            tokens: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
            loss_rows: Vec::new(),
            targets: Vec::new(),
        };
        for (ids, mask) in seqs {
            if ids.len() < 2 {
                continue;
            }
            let start = b.tokens.len();
            let len = ids.len() - 1;
            for i in 0..len {
                b.tokens.push(ids[i] as usize);
                b.positions.push(i);
                if mask[i + 1] {
                    b.loss_rows.push(start + i);
                    b.targets.push(ids[i + 1] as usize);
                }
            }
            b.segments.push(Segment { start, len });
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

impl TransformerModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Rebuilds a model from named tensors; names and shapes must match the
    /// layout implied by `config`.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != named.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for ((want_name, want_shape), (name, mut t)) in layout.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            t.set_requires_grad(true);
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Flat copy of every parameter, in storage order.
    pub fn to_flat(&self) -> Vec<f32> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    fn check_tokens(&self, tokens: &[usize], positions: &[usize]) -> Result<()> {
        for &t in tokens {
            if t >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id: t as TokenId,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.context_len {
                return Err(ModelError::ContextOverflow {
                    len: p + 1,
                    context_len: self.config.context_len,
                });
            }
        }
        Ok(())
    }

    /// Logits `[T x V]` for every position of `tokens`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor> {
        self.forward_rows(tokens, None)
    }

    /// Logits for the final position only.
    pub fn next_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let last = tokens.len() - 1;
        Ok(self.forward_rows(tokens, Some(&[last]))?.into_data())
    }

    fn forward_rows(&self, tokens: &[TokenId], rows: Option<&[usize]>) -> Result<Tensor> {
        if tokens.len() > self.config.context_len {
            return Err(ModelError::ContextOverflow {
                len: tokens.len(),
                context_len: self.config.context_len,
            });
        }
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let toks: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..toks.len()).collect();
        self.check_tokens(&toks, &positions)?;
        let segments = [Segment {
            start: 0,
            len: toks.len(),
        }];
        let mut g = Graph::<f32>::new();
        let vars = self.param_leaves(&mut g, false);
        let logits = build_logits(&mut g, &self.config, &vars, &toks, &positions, &segments, rows)?;
        Ok(g.to_tensor(logits))
    }

    fn param_leaves(&self, g: &mut Graph<f32>, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.zero_grad();
                t.set_requires_grad(track);
                g.leaf(t)
            })
            .collect()
    }

    /// Masked mean cross-entropy of a packed batch. Gradients are written
    /// into the parameters' grad buffers (replacing any previous ones).
    pub fn loss_and_grad(&mut self, batch: &PackedBatch) -> Result<f32> {
        if batch.loss_rows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        self.check_tokens(&batch.tokens, &batch.positions)?;
        let mut g = Graph::<f32>::new();
        let vars = self.param_leaves(&mut g, true);
        let loss = batch_loss(&mut g, &self.config, &vars, batch)?;
        let value = g.scalar_value(loss).expect("scalar loss");
        let mut grads = g.backward(loss)?;
        for (p, v) in self.params.iter_mut().zip(&vars) {
            let grad = grads.take(*v).unwrap_or_else(|| vec![0.0; p.len()]);
            p.set_grad(Some(grad))?;
        }
        Ok(value)
    }

    /// Loss only, no graph retained.
    pub fn loss(&self, batch: &PackedBatch) -> Result<f32> {
        if batch.loss_rows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        self.check_tokens(&batch.tokens, &batch.positions)?;
        let mut g = Graph::<f32>::new();
        let vars = self.param_leaves(&mut g, false);
        let loss = batch_loss(&mut g, &self.config, &vars, batch)?;
        Ok(g.scalar_value(loss).expect("scalar loss"))
    }
}

/// Cross-entropy of `batch` with parameters bound to `vars`. Generic so the
/// same code runs in `f64` under gradient checking.
pub fn batch_loss<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &[Var],
    batch: &PackedBatch,
) -> Result<Var> {
    let logits = build_logits(
        g,
        cfg,
        vars,
        &batch.tokens,
        &batch.positions,
        &batch.segments,
        Some(&batch.loss_rows),
    )?;
    let mask = vec![true; batch.targets.len()];
    Ok(g.cross_entropy(logits, &batch.targets, &mask)?)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of the batch loss, over every parameter tensor, evaluated in
/// `f64`.
pub fn gradcheck_parameters(model: &TransformerModel, batch: &PackedBatch, eps: f64) -> Result<f64> {
    let cfg = model.config;
    let params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.cast()).collect();
    let mut worst = 0.0f64;
    for target in 0..params.len() {
        let err = gradcheck(
            |g, x| {
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(i, p)| if i == target { x } else { g.leaf(p.clone()) })
                    .collect();
                batch_loss(g, &cfg, &vars, batch).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::Invalid(other.to_string()),
                })
            },
            &params[target],
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// The forward pass proper. `rows` restricts the output head to a subset of
/// positions.
pub fn build_logits<T: Element>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &[Var],
    tokens: &[usize],
    positions: &[usize],
    segments: &[Segment],
    rows: Option<&[usize]>,
) -> Result<Var> {
    let eps = T::from_f64_lossy(LN_EPS);
    let (tok_emb, pos_emb) = (vars[0], vars[1]);
    let te = g.embedding(tok_emb, tokens)?;
    let pe = g.embedding(pos_emb, positions)?;
    let mut x = g.add(te, pe)?;
    for layer in 0..cfg.n_layers {
        let p = &vars[2 + layer * PER_BLOCK..2 + (layer + 1) * PER_BLOCK];
        let h = g.layer_norm(x, p[0], p[1], eps)?;
        let qkv = g.matmul(h, p[2])?;
        let qkv = g.add_bias(qkv, p[3])?;
        let att = g.causal_attention(qkv, segments, cfg.n_heads)?;
        let proj = g.matmul(att, p[4])?;
        let proj = g.add_bias(proj, p[5])?;
        x = g.add(x, proj)?;
        let h = g.layer_norm(x, p[6], p[7], eps)?;
        let fc = g.matmul(h, p[8])?;
        let fc = g.add_bias(fc, p[9])?;
        let act = g.gelu(fc);
        let out = g.matmul(act, p[10])?;
        let out = g.add_bias(out, p[11])?;
        x = g.add(x, out)?;
    }
    let n = vars.len();
    if let Some(rows) = rows {
        x = g.select_rows(x, rows)?;
    }
    let x = g.layer_norm(x, vars[n - 2], vars[n - 1], eps)?;
    Ok(g.matmul_bt(x, tok_emb)?)
}

/// Decoding parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    pub temperature: f64,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub stop_token_ids: Vec<TokenId>,
    pub seed: u64,
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(ModelError::Config("temperature must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(ModelError::Config("max_new_tokens must be at least 1".into()));
        }
        if self.top_k == Some(0) {
            return Err(ModelError::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

/// Temperature-scaled, top-k truncated categorical draw. Candidates are
/// ranked by logit, ties broken toward the lower id.
pub fn sample_next<R: Rng + ?Sized>(logit_row: &[f32], spec: &SamplingSpec, rng: &mut R) -> TokenId {
    let mut order: Vec<usize> = (0..logit_row.len()).collect();
    order.sort_by(|&a, &b| logit_row[b].total_cmp(&logit_row[a]).then(a.cmp(&b)));
    let k = spec.top_k.unwrap_or(order.len()).clamp(1, order.len());
    order.truncate(k);
    let u: f64 = rng.random();
    if k == 1 {
        return order[0] as TokenId;
    }
    let max = f64::from(logit_row[order[0]]);
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((f64::from(logit_row[i]) - max) / spec.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut target = u * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if target < w {
            return i as TokenId;
        }
        target -= w;
    }
    // rounding left a sliver past the last bucket
    order[k - 1] as TokenId
}

/// Autoregressive continuation of `prompt`, excluding the prompt. Stops
/// after the first stop token, after `max_new_tokens`, or when the context
/// is full.
pub fn generate(model: &TransformerModel, prompt: &[TokenId], spec: &SamplingSpec) -> Result<Vec<TokenId>> {
    spec.validate()?;
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let context_len = model.config().context_len;
    if prompt.len() >= context_len {
        return Err(ModelError::ContextOverflow {
            len: prompt.len() + 1,
            context_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < spec.max_new_tokens && seq.len() < context_len {
        let logits = model.next_logits(&seq)?;
        let next = sample_next(&logits, spec, &mut rng);
        seq.push(next);
        out.push(next);
        if spec.stop_token_ids.contains(&next) {
            break;
        }
    }
    Ok(out)
}
