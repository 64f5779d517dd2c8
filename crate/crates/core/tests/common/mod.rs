//! Helpers shared by the integration tests: finite-difference gradient
//! checks and small tensor utilities.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use gesture_video::diffusion::attention::Attention;
use gesture_video::diffusion::layers::ResBlock;
use gesture_video::diffusion::params::ParamBuilder;
use gesture_video::diffusion::unet::{PlainAttention, TransformerBlock};
use gesture_video::diffusion::{face_enhance_attention, gamma_of, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b)
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> Tensor {
    (a * b).unwrap().sum_all().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// `||a - n|| / max(||a||, ||n||)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let base = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            let p = Tensor::from_vec(plus, x.dims(), x.device()).unwrap();
            let m = Tensor::from_vec(minus, x.dims(), x.device()).unwrap();
            (f(&p) - f(&m)) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Analytic gradient of `f` at `x` through candle's autograd.
pub fn analytic_grad(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let var = Var::from_tensor(x).unwrap();
    let out = f(var.as_tensor());
    let grads = out.backward().unwrap();
    grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Compares autograd with central differences for the scalar `f`.
pub fn check(x: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let a = analytic_grad(x, &f);
    let n = numeric_grad(x, |t| scalar(&f(t)));
    relative_error(&a, &n)
}

fn random_attention(seed: u64, dim: usize, heads: usize) -> Attention {
    let mut pb = ParamBuilder::new(seed, DType::F64, &Device::Cpu);
    Attention::new(&mut pb, "attn", dim, dim, heads).unwrap()
}

/// One gradient-check instance.
pub struct GradCase {
    pub label: String,
    pub rel_err: f64,
}

/// Face enhancement attention on random tokens: gradients with respect to
/// the tokens and to the raw gain.
pub fn face_enhance_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..7);
    let heads = rng.random_range(1..3);
    let c = 2 * heads * rng.random_range(1..3);
    let attn = random_attention(seed, c, heads);
    let flags: Vec<bool> = (0..n).map(|i| i == 0 || rng.random_bool(0.4)).collect();
    let tokens = uniform(&mut rng, &[1, n, c], -1.0, 1.0);
    let weights = uniform(&mut rng, &[1, n, c], -1.0, 1.0);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let theta = Tensor::new(&[sign * rng.random_range(0.2..2.5)], &Device::Cpu).unwrap();

    let gamma = gamma_of(&theta.get(0).unwrap()).unwrap();
    let wrt_tokens = check(&tokens, |x| {
        dot(&face_enhance_attention(&attn, x, &flags, &gamma).unwrap(), &weights)
    });
    let wrt_theta = check(&theta, |th| {
        let g = gamma_of(&th.get(0).unwrap()).unwrap();
        dot(&face_enhance_attention(&attn, &tokens, &flags, &g).unwrap(), &weights)
    });
    vec![
        GradCase {
            label: format!("fea/tokens seed {seed}"),
            rel_err: wrt_tokens,
        },
        GradCase {
            label: format!("fea/theta seed {seed}"),
            rel_err: wrt_theta,
        },
    ]
}

fn block_config(c: usize) -> ModelConfig {
    ModelConfig {
        channels: vec![c],
        heads: 2,
        groups: 2,
        context_dim: 3,
        ..Default::default()
    }
}

/// A full transformer block and a residual block of the backbone, checked
/// with respect to their input feature maps and one weight matrix.
pub fn backbone_block_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let c = 4 * rng.random_range(1..3);
    let (h, w) = (rng.random_range(2..4), rng.random_range(2..4));
    let cfg = block_config(c);
    let mut pb = ParamBuilder::new(seed, DType::F64, &Device::Cpu);
    pb.set_trainable(true);
    let block = TransformerBlock::new(&mut pb, "blk", c, &cfg).unwrap();
    let res = ResBlock::new(&mut pb, "res", c, 2 * c, 6, 2).unwrap();
    let store = pb.finish().unwrap();

    let x = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
    let context = uniform(&mut rng, &[1, 1, 3], -1.0, 1.0);
    let emb = uniform(&mut rng, &[1, 6], -1.0, 1.0);
    let wt = uniform(&mut rng, &[1, c, h, w], -1.0, 1.0);
    let wr = uniform(&mut rng, &[1, 2 * c, h, w], -1.0, 1.0);

    let run_block = |x: &Tensor| dot(&block.forward(x, &context, 0, &mut PlainAttention).unwrap(), &wt);
    let run_res = |x: &Tensor| dot(&res.forward(x, &emb).unwrap(), &wr);
    let mut cases = vec![
        GradCase {
            label: format!("transformer/input seed {seed}"),
            rel_err: check(&x, run_block),
        },
        GradCase {
            label: format!("resblock/input seed {seed}"),
            rel_err: check(&x, run_res),
        },
    ];

    // Weight gradient through the self-attention query projection.
    let var = store.get("blk.attn1.to_q.weight").and_then(|p| p.var.clone()).expect("trainable weight");
    let original = var.as_tensor().copy().unwrap();
    let grads = run_block(&x).backward().unwrap();
    let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let numeric = numeric_grad(&original, |wq| {
        var.set(wq).unwrap();
        scalar(&run_block(&x))
    });
    var.set(&original).unwrap();
    cases.push(GradCase {
        label: format!("transformer/to_q seed {seed}"),
        rel_err: relative_error(&analytic, &numeric),
    });
    cases
}
