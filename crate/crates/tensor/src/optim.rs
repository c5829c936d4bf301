use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counter, one `m`/`v` pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            config,
        }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// Parameters without a gradient buffer are treated as having a zero
/// gradient. Any non-finite gradient aborts before anything is modified.
pub fn adamw_step(params: &mut [Tensor], state: &mut AdamWState, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(TensorError::Invalid(format!(
            "optimizer holds {} moment buffers for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (pi, p) in params.iter().enumerate() {
        if state.m[pi].len() != p.len() || state.v[pi].len() != p.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: vec![state.m[pi].len()],
            });
        }
        if let Some(g) = p.grad() {
            if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGradient { param: pi, index });
            }
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = (1.0 - c.beta1.powi(t)) as f32;
    let bc2 = (1.0 - c.beta2.powi(t)) as f32;
    let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
    let lr32 = lr as f32;
    let decay = (1.0 - lr * c.weight_decay) as f32;
    let eps = c.eps as f32;

    for (pi, p) in params.iter_mut().enumerate() {
        let (data, grad) = p.data_and_grad_mut();
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        for i in 0..data.len() {
            let g = grad.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] * decay - lr32 * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = (max_norm / norm) as f32;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
    norm
}

/// Linear warmup followed by cosine decay to `min_ratio * peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn warmup_cosine(peak: f64, total_steps: u64, warmup_fraction: f64, min_ratio: f64) -> Self {
        let warmup_steps = ((total_steps as f64) * warmup_fraction).round() as u64;
        Self {
            peak,
            warmup_steps,
            total_steps,
            min_ratio,
        }
    }

    /// Learning rate for the zero-based optimizer `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let floor = self.peak * self.min_ratio;
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
