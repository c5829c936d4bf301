//! Finite-difference checks of every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tft_tensor::{gradcheck, relative_error, Graph, Result, Segment, Tensor, Var};

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// Runs `build` over 20 seeds; the closure gets its own rng to draw any
/// constants, and must return the input to differentiate plus the function.
fn check_op<F>(name: &str, shape: Vec<usize>, build: F)
where
    F: Fn(&mut ChaCha8Rng, &mut Graph<f64>, Var) -> Result<Var>,
{
    check_op_mapped(name, shape, |x| x, build);
}

fn check_op_mapped<F>(name: &str, shape: Vec<usize>, map: fn(f64) -> f64, build: F)
where
    F: Fn(&mut ChaCha8Rng, &mut Graph<f64>, Var) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random(&mut rng, shape.clone(), 1.5);
        x.data_mut().iter_mut().for_each(|v| *v = map(*v));
        let state = rng.clone();
        let err = gradcheck(
            |g, v| {
                let mut r = state.clone();
                build(&mut r, g, v)
            },
            &x,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

/// Projects onto fixed random weights so that the scalar output depends on
/// every element non-uniformly.
fn weighted_sum(rng: &mut ChaCha8Rng, g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.leaf(random(rng, shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn sum_of_squares() {
    let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
    let err = gradcheck(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn elementwise_ops() {
    check_op("add", vec![3, 4], |rng, g, x| {
        let c = g.leaf(random(rng, vec![3, 4], 1.0));
        let y = g.add(x, c)?;
        weighted_sum(rng, g, y)
    });
    check_op("mul", vec![3, 4], |rng, g, x| {
        let y = g.mul(x, x)?;
        weighted_sum(rng, g, y)
    });
    check_op("scale", vec![5], |rng, g, x| {
        let y = g.scale(x, -2.5);
        weighted_sum(rng, g, y)
    });
    // GELU has a stationary point near -0.7518 where the true derivative
    // vanishes and the relative error is dominated by O(eps^2) truncation.
    let off_stationary = |x: f64| if (x + 0.7518).abs() < 0.1 { x + 0.2 } else { x };
    check_op_mapped("gelu", vec![3, 5], off_stationary, |rng, g, x| {
        let y = g.gelu(x);
        weighted_sum(rng, g, y)
    });
}

#[test]
fn add_bias_both_inputs() {
    check_op("add_bias/x", vec![4, 3], |rng, g, x| {
        let b = g.leaf(random(rng, vec![3], 1.0));
        let y = g.add_bias(x, b)?;
        weighted_sum(rng, g, y)
    });
    check_op("add_bias/bias", vec![3], |rng, g, b| {
        let x = g.leaf(random(rng, vec![4, 3], 1.0));
        let y = g.add_bias(x, b)?;
        weighted_sum(rng, g, y)
    });
}

#[test]
fn matmul_variants() {
    check_op("matmul/a", vec![3, 4], |rng, g, a| {
        let b = g.leaf(random(rng, vec![4, 2], 1.0));
        let y = g.matmul(a, b)?;
        weighted_sum(rng, g, y)
    });
    check_op("matmul/b", vec![4, 2], |rng, g, b| {
        let a = g.leaf(random(rng, vec![3, 4], 1.0));
        let y = g.matmul(a, b)?;
        weighted_sum(rng, g, y)
    });
    check_op("matmul_bt/a", vec![3, 4], |rng, g, a| {
        let b = g.leaf(random(rng, vec![5, 4], 1.0));
        let y = g.matmul_bt(a, b)?;
        weighted_sum(rng, g, y)
    });
    check_op("matmul_bt/b", vec![5, 4], |rng, g, b| {
        let a = g.leaf(random(rng, vec![3, 4], 1.0));
        let y = g.matmul_bt(a, b)?;
        weighted_sum(rng, g, y)
    });
    check_op("transpose", vec![2, 5], |rng, g, a| {
        let y = g.transpose(a)?;
        weighted_sum(rng, g, y)
    });
}

#[test]
fn softmax_each_axis() {
    for axis in 0..3 {
        check_op("softmax", vec![2, 3, 4], move |rng, g, x| {
            let y = g.softmax(x, axis)?;
            weighted_sum(rng, g, y)
        });
    }
}

#[test]
fn layer_norm_all_inputs() {
    check_op("layer_norm/x", vec![3, 6], |rng, g, x| {
        let gamma = g.leaf(random(rng, vec![6], 1.0));
        let beta = g.leaf(random(rng, vec![6], 1.0));
        let y = g.layer_norm(x, gamma, beta, 1e-5)?;
        weighted_sum(rng, g, y)
    });
    check_op("layer_norm/gamma", vec![6], |rng, g, gamma| {
        let x = g.leaf(random(rng, vec![3, 6], 1.0));
        let beta = g.leaf(random(rng, vec![6], 1.0));
        let y = g.layer_norm(x, gamma, beta, 1e-5)?;
        weighted_sum(rng, g, y)
    });
    check_op("layer_norm/beta", vec![6], |rng, g, beta| {
        let x = g.leaf(random(rng, vec![3, 6], 1.0));
        let gamma = g.leaf(random(rng, vec![6], 1.0));
        let y = g.layer_norm(x, gamma, beta, 1e-5)?;
        weighted_sum(rng, g, y)
    });
}

#[test]
fn gather_ops() {
    check_op("embedding", vec![5, 3], |rng, g, table| {
        let y = g.embedding(table, &[4, 0, 4, 2])?;
        weighted_sum(rng, g, y)
    });
    check_op("select_rows", vec![5, 3], |rng, g, x| {
        let y = g.select_rows(x, &[1, 1, 3])?;
        weighted_sum(rng, g, y)
    });
}

#[test]
fn cross_entropy_after_softmax_logits() {
    check_op("cross_entropy", vec![4, 6], |_, g, logits| {
        g.cross_entropy(logits, &[1, 5, 0, 2], &[true, true, false, true])
    });
}

#[test]
fn causal_attention_packed() {
    let segments = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }];
    check_op("causal_attention", vec![5, 12], move |rng, g, qkv| {
        let y = g.causal_attention(qkv, &segments, 2)?;
        weighted_sum(rng, g, y)
    });
}

/// Pre-norm attention block with residual, trained through cross-entropy.
fn attention_block_loss(rng: &mut ChaCha8Rng, g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let d = 8;
    let segs = [Segment { start: 0, len: 4 }];
    let gamma = g.leaf(Tensor::filled(vec![d], 1.0));
    let beta = g.leaf(Tensor::zeros(vec![d]));
    let w_qkv = g.leaf(random(rng, vec![d, 3 * d], 0.5));
    let w_o = g.leaf(random(rng, vec![d, d], 0.5));
    let w_out = g.leaf(random(rng, vec![5, d], 0.5));
    let h = g.layer_norm(x, gamma, beta, 1e-5)?;
    let qkv = g.matmul(h, w_qkv)?;
    let a = g.causal_attention(qkv, &segs, 2)?;
    let proj = g.matmul(a, w_o)?;
    let res = g.add(x, proj)?;
    let logits = g.matmul_bt(res, w_out)?;
    g.cross_entropy(logits, &[1, 3, 0, 4], &[false, true, true, true])
}

#[test]
fn single_attention_block_loss() {
    check_op("attention block", vec![4, 8], attention_block_loss);
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
}
