//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use inrpack::model::{init_params, mse_loss, predict, Linear, ResidualBlockParams};
use inrpack::{DenseMatrix, HeadMode, NetworkConfig, NetworkParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum_k x[k] * W[k][j] + b[j]`, one output at a time.
fn dense(x: &[f64], layer: &Linear<f64>) -> Vec<f64> {
    let (rows, cols) = layer.weight.shape();
    assert_eq!(rows, x.len());
    (0..cols)
        .map(|j| {
            let mut acc = layer.bias[j];
            for (k, &xk) in x.iter().enumerate() {
                acc += xk * layer.weight.get(k, j);
            }
            acc
        })
        .collect()
}

pub fn scalar_block(h: &[f64], block: &ResidualBlockParams<f64>) -> Vec<f64> {
    let a1: Vec<f64> = dense(h, &block.first).into_iter().map(f64::sin).collect();
    let a2: Vec<f64> = dense(&a1, &block.second).into_iter().map(f64::sin).collect();
    h.iter().zip(&a2).map(|(x, y)| 0.5 * (x + y)).collect()
}

pub fn scalar_encode(p: &[f64; 4], frequencies: usize, raw: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for &v in p {
        if raw {
            out.push(v);
        }
        for k in 0..frequencies {
            let a = 2f64.powi(k as i32) * std::f64::consts::PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Straight-line evaluation of one network at one point.
pub fn scalar_network(params: &NetworkParams<f64>, p: &[f64; 4]) -> Vec<f64> {
    let cfg = &params.config;
    let enc = scalar_encode(p, cfg.pe.num_frequencies, cfg.pe.include_raw_input);
    let mut h: Vec<f64> = dense(&enc, &params.input_projection)
        .into_iter()
        .map(|z| (cfg.omega_first * z).sin())
        .collect();
    for block in &params.gfe_blocks {
        h = scalar_block(&h, block);
    }
    let mut out = Vec::new();
    for (branch, head) in params.lfe_branches.iter().zip(&params.output_heads) {
        let mut b = h.clone();
        for block in branch {
            b = scalar_block(&b, block);
        }
        out.extend(dense(&b, head));
    }
    assert_eq!(out.len(), cfg.num_variables);
    out
}

/// Random network with jittered (nonzero) biases.
pub fn random_network(rng: &mut ChaCha8Rng, width: usize, m: usize, mode: HeadMode) -> NetworkParams<f64> {
    let mut cfg = NetworkConfig::new(width, m);
    cfg.head_mode = mode;
    let mut params = init_params::<f64>(&cfg, rng.gen()).unwrap();
    let mut flat = params.to_flat();
    for v in &mut flat {
        *v += rng.gen_range(-0.05..0.05);
    }
    params.load_flat(&flat).unwrap();
    params
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix<f64> {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Richardson-extrapolated central difference of `f` at `x[i]`.
pub fn richardson_derivative(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let central = |h: f64| {
        let mut y = x.to_vec();
        y[i] = x[i] + h;
        let plus = f(&y);
        y[i] = x[i] - h;
        let minus = f(&y);
        (plus - minus) / (2.0 * h)
    };
    (4.0 * central(h / 2.0) - central(h)) / 3.0
}

/// Finite-difference comparison of one network's gradient.
pub struct GradientCheck {
    /// Worst entry whose absolute error is at least the floor:
    /// `(index, relative error, absolute error)`.
    pub failing: Option<(usize, f64, f64)>,
    pub max_abs: f64,
    /// Largest relative error among entries with `|gradient| > 1e-4`.
    pub max_rel_significant: f64,
}

/// Compares `analytic` with finite differences of the MSE loss. Entries whose
/// absolute error is below `abs_floor` count as matching.
pub fn network_gradient_mismatch(
    params: &NetworkParams<f64>,
    x: &DenseMatrix<f64>,
    y: &DenseMatrix<f64>,
    analytic: &[f64],
    abs_floor: f64,
) -> GradientCheck {
    let base = params.to_flat();
    let loss = |flat: &[f64]| {
        let mut p = params.clone();
        p.load_flat(flat).unwrap();
        mse_loss(&predict(&p, x).unwrap(), y).unwrap().0
    };
    let mut out = GradientCheck {
        failing: None,
        max_abs: 0.0,
        max_rel_significant: 0.0,
    };
    for i in 0..base.len() {
        let fd = richardson_derivative(&loss, &base, i, 3e-5);
        let abs = (fd - analytic[i]).abs();
        let rel = abs / fd.abs().max(analytic[i].abs()).max(f64::MIN_POSITIVE);
        out.max_abs = out.max_abs.max(abs);
        if fd.abs() > 1e-4 {
            out.max_rel_significant = out.max_rel_significant.max(rel);
        }
        if abs >= abs_floor && out.failing.is_none_or(|(_, r, _)| rel > r) {
            out.failing = Some((i, rel, abs));
        }
    }
    out
}

/// Mean squared error, accumulated in the simplest possible way.
pub fn brute_mse(gt: &[f32], pred: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..gt.len() {
        s += (gt[i] as f64 - pred[i] as f64) * (gt[i] as f64 - pred[i] as f64);
    }
    s / gt.len() as f64
}

pub fn brute_psnr(gt: &[f32], pred: &[f32], range: f64) -> f64 {
    10.0 * (range * range / brute_mse(gt, pred)).log10()
}

pub fn brute_nrmse(gt: &[f32], pred: &[f32], range: f64) -> f64 {
    brute_mse(gt, pred).sqrt() / range
}

pub fn brute_r2(gt: &[f32], pred: &[f32]) -> f64 {
    let mean = gt.iter().map(|&v| v as f64).sum::<f64>() / gt.len() as f64;
    let mut res = 0.0;
    let mut tot = 0.0;
    for i in 0..gt.len() {
        res += (gt[i] as f64 - pred[i] as f64).powi(2);
        tot += (gt[i] as f64 - mean).powi(2);
    }
    1.0 - res / tot
}

pub fn synth(fields: &[inrpack::FieldKind], points: usize, timesteps: usize, seed: u64) -> inrpack::Dataset {
    inrpack::data::synthesize(&inrpack::SynthSpec {
        point_count: points,
        timesteps,
        fields: fields.to_vec(),
        noise: 0.0,
        seed,
        clustered: false,
    })
    .unwrap()
}

/// A network and schedule small enough for debug-speed tests.
pub fn small_pipeline(width: usize, k: usize, max_epochs: usize) -> inrpack::PipelineConfig {
    let mut cfg = inrpack::PipelineConfig {
        width,
        num_frequencies: 2,
        gfe_blocks: 1,
        lfe_blocks: 1,
        ..Default::default()
    };
    cfg.train.k = k;
    cfg.train.batch_size = 64;
    cfg.train.initial_lr = 1e-3;
    cfg.train.max_epochs = Some(max_epochs);
    cfg.meta.meta_iterations = 5;
    cfg
}
