//! Finite-difference verification of every differentiable operation in 64-bit.
//!
//! Each check draws random inputs from a seed, records a scalar objective on a
//! fresh graph, and compares the reverse-mode gradient of every input with
//! central differences. Operations with non-scalar output are reduced with a
//! fixed random projection so the whole Jacobian participates.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::{LossConfig, RunConfig};
use crate::error::Result;
use crate::losses::{adversarial_losses, gaze_regression_loss, perceptual_loss, recon_loss, total_d, total_g, FeatureExtractor, GeneratorTerms, LossWeights};
use crate::networks::{CoarseModel, MultiTaskDiscriminator, RefineGenerator};
use crate::par;
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Smallest step tried when refining around a breakpoint.
pub const MIN_STEP: f64 = 1e-7;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Coordinates checked per input tensor; larger tensors are subsampled.
const MAX_COORDS: usize = 96;

type Objective = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + Sync;

/// Relative error of one gradient tensor: `max|a − n| / max(max|a|, max|n|)`,
/// taken over the checked coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

fn evaluate(f: &Objective, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    g.value(out).item()
}

/// Worst relative error over all inputs of `f`, using central differences.
pub fn check(f: &Objective, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
    check_impl(f, inputs, rng, false)
}

/// Like [`check`] for objectives with ReLU or sampling-lattice breakpoints.
///
/// A breakpoint inside the ±STEP stencil makes the central difference a blend
/// of two slopes. Such coordinates show up as disagreeing forward and backward
/// differences; the step is then shrunk tenfold until the two sides agree,
/// down to [`MIN_STEP`].
pub fn check_piecewise(f: &Objective, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
    check_impl(f, inputs, rng, true)
}

fn check_impl(f: &Objective, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, piecewise: bool) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let f0 = g.value(out).item()?;
    let grads = g.backward(out)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(ids[k]);
        let coords: Vec<usize> = if input.len() <= MAX_COORDS {
            (0..input.len()).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.gen_range(0..input.len())).collect()
        };
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &j in &coords {
            let mut shifted = inputs.to_vec();
            shifted[k].data_mut()[j] += STEP;
            let plus = evaluate(f, &shifted)?;
            shifted[k].data_mut()[j] -= 2.0 * STEP;
            let minus = evaluate(f, &shifted)?;
            let aj = analytic.data()[j];
            let mut numeric = (plus - minus) / (2.0 * STEP);
            if piecewise {
                numeric = refine_at_breakpoint(f, inputs, (k, j), f0, (plus, minus))?;
            }
            a.push(aj);
            n.push(numeric);
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(worst)
}

fn refine_at_breakpoint(f: &Objective, inputs: &[Tensor<f64>], (k, j): (usize, usize), f0: f64, (mut plus, mut minus): (f64, f64)) -> Result<f64> {
    let x = inputs[k].data()[j];
    let mut h = STEP;
    loop {
        let (fwd, bwd) = ((plus - f0) / h, (f0 - minus) / h);
        if (fwd - bwd).abs() <= TOLERANCE * fwd.abs().max(bwd.abs()) || h / 10.0 < MIN_STEP {
            return Ok((plus - minus) / (2.0 * h));
        }
        h /= 10.0;
        let mut shifted = inputs.to_vec();
        shifted[k].data_mut()[j] = x + h;
        plus = evaluate(f, &shifted)?;
        shifted[k].data_mut()[j] = x - h;
        minus = evaluate(f, &shifted)?;
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ y ⊙ w` for a fixed random `w` with the shape of `y`.
fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let w = uniform(&mut rng, g.value(y).shape(), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// One named check: builds inputs and an objective from a seed.
pub struct Case {
    pub name: &'static str,
    pub build: fn(u64) -> (Vec<Tensor<f64>>, Box<Objective>),
    /// ReLU stacks and warps with learned flow hit breakpoints; see [`check_piecewise`].
    pub piecewise: bool,
}

impl Case {
    pub fn check(&self, seed: u64) -> Result<f64> {
        let (inputs, f) = (self.build)(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
        if self.piecewise {
            check_piecewise(f.as_ref(), &inputs, &mut rng)
        } else {
            check(f.as_ref(), &inputs, &mut rng)
        }
    }
}

fn conv_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, o) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
    let (h, w) = (r.gen_range(4..8), r.gen_range(4..8));
    let k = if r.gen_bool(0.5) { 3 } else { 1 };
    let stride = r.gen_range(1..3);
    let pad = r.gen_range(0..2);
    let inputs = vec![
        uniform(&mut r, &[n, c, h, w], -1.0, 1.0),
        uniform(&mut r, &[o, c, k, k], -1.0, 1.0),
        uniform(&mut r, &[o], -0.5, 0.5),
    ];
    (
        inputs,
        Box::new(move |g, x| {
            let y = g.conv2d(x[0], x[1], stride, pad)?;
            let y = g.add_channel_bias(y, x[2])?;
            project(g, y, seed)
        }),
    )
}

fn warp_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (r.gen_range(1..3), r.gen_range(1..3));
    let (h, w) = (r.gen_range(4..8), r.gen_range(4..8));
    let image = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
    // Offset 0.3 keeps every sample point off the integer lattice.
    let flow = Tensor::from_fn(&[n, 2, h, w], |_| 0.3 + r.gen_range(-0.1..0.1) + r.gen_range(-2i32..2) as f64);
    (vec![image, flow], Box::new(move |g, x| {
        let y = g.bilinear_warp(x[0], x[1])?;
        project(g, y, seed)
    }))
}

fn elementwise_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(2..5), r.gen_range(2..5));
    let a = uniform(&mut r, &[n, c, h, w], -2.0, 2.0);
    let b = uniform(&mut r, &[n, c, h, w], -2.0, 2.0);
    let (oh, ow) = (r.gen_range(2..9), r.gen_range(2..9));
    (vec![a, b], Box::new(move |g, x| {
        let t = g.tanh(x[0])?;
        let l = g.leaky_relu(x[1], 0.2)?;
        let s = g.softplus(x[1])?;
        let m = g.mul(t, s)?;
        let d = g.sub(m, l)?;
        let d = g.scale(d, 0.7)?;
        let cat = g.concat(&[d, x[0]], 1)?;
        let up = g.resample_nearest(cat, oh, ow)?;
        let p = project(g, up, seed)?;
        let mean = g.mean(x[1])?;
        g.add(p, mean)
    }))
}

fn dense_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..6));
    let inputs = vec![
        uniform(&mut r, &[n, i], -1.0, 1.0),
        uniform(&mut r, &[i, o], -1.0, 1.0),
        uniform(&mut r, &[o], -1.0, 1.0),
    ];
    (inputs, Box::new(move |g, x| {
        let y = g.matmul(x[0], x[1])?;
        let y = g.add_row_bias(y, x[2])?;
        let y = g.reshape(y, &[y_len(g, y)])?;
        project(g, y, seed)
    }))
}

fn y_len(g: &Graph<f64>, y: NodeId) -> usize {
    g.value(y).len()
}

fn gram_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(2..5), r.gen_range(2..5)];
    (vec![uniform(&mut r, &shape, -1.0, 1.0)], Box::new(move |g, x| {
        let y = g.gram(x[0])?;
        project(g, y, seed)
    }))
}

fn recon_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [r.gen_range(1..4), 1, r.gen_range(2..6), r.gen_range(2..6)];
    let inputs = vec![uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)];
    (inputs, Box::new(|g, x| recon_loss(g, x[0], x[1])))
}

fn gaze_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(1..6);
    let inputs = vec![uniform(&mut r, &[n, 2], -1.0, 1.0), uniform(&mut r, &[n, 2], -1.0, 1.0)];
    (inputs, Box::new(|g, x| gaze_regression_loss(g, x[0], x[1])))
}

fn adversarial_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = r.gen_range(1..6);
    let inputs = vec![
        uniform(&mut r, &[n, 1], -4.0, 4.0),
        uniform(&mut r, &[n, 1], -4.0, 4.0),
        uniform(&mut r, &[n, 1], -4.0, 4.0),
    ];
    (inputs, Box::new(|g, x| {
        let (d, gen) = adversarial_losses(g, Some(x[0]), Some(x[1]), Some(x[2]))?;
        g.add(d.expect("d"), gen.expect("g"))
    }))
}

fn small_loss_config() -> LossConfig {
    LossConfig {
        extractor_channels: vec![3, 4, 4, 5, 5],
        ..LossConfig::default()
    }
}

fn perceptual_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let size = 8;
    let ex = FeatureExtractor::<f64>::new(&small_loss_config(), 1, size).expect("valid extractor config");
    let shape = [r.gen_range(1..3), 1, size, size];
    let inputs = vec![uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0)];
    (inputs, Box::new(move |g, x| perceptual_loss(g, &ex, x[0], x[1])))
}

fn totals_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..6).map(|_| Tensor::scalar(r.gen_range(-2.0..2.0))).collect();
    (inputs, Box::new(|g, x| {
        let w = LossWeights::default();
        let terms = GeneratorTerms {
            recon: x[0],
            perceptual: Some(x[1]),
            gaze: x[2],
            adversarial: x[3],
        };
        let tg = total_g(g, &w, &terms)?;
        let td = total_d(g, &w, x[4], x[5])?;
        let td = g.mul(td, td)?;
        g.add(tg, td)
    }))
}

/// conv (stride 2) → leaky → conv → tanh → dense, every parameter checked.
fn stack_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, size) = (2, 2, 6);
    let (c1, c2, out) = (3, 2, 3);
    let flat = c2 * 3 * 3;
    let inputs = vec![
        uniform(&mut r, &[n, c, size, size], -1.0, 1.0),
        uniform(&mut r, &[c1, c, 3, 3], -0.5, 0.5),
        uniform(&mut r, &[c1], -0.2, 0.2),
        uniform(&mut r, &[c2, c1, 3, 3], -0.5, 0.5),
        uniform(&mut r, &[c2], -0.2, 0.2),
        uniform(&mut r, &[flat, out], -0.5, 0.5),
        uniform(&mut r, &[out], -0.2, 0.2),
    ];
    (inputs, Box::new(move |g, x| {
        let h = g.conv2d(x[0], x[1], 2, 1)?;
        let h = g.add_channel_bias(h, x[2])?;
        let h = g.leaky_relu(h, 0.2)?;
        let h = g.conv2d(h, x[3], 1, 1)?;
        let h = g.add_channel_bias(h, x[4])?;
        let h = g.tanh(h)?;
        let h = g.reshape(h, &[n, flat])?;
        let y = g.matmul(h, x[5])?;
        let y = g.add_row_bias(y, x[6])?;
        project(g, y, seed)
    }))
}

fn tiny_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::smoke();
    cfg.model.init_seed = seed;
    cfg.model.enc_channels = vec![2, 3];
    cfg.model.disc_channels = vec![2, 3];
    cfg.model.gen_channels = 3;
    cfg.model.disc_hidden = 4;
    cfg
}

fn model_inputs(r: &mut ChaCha8Rng, cfg: &RunConfig, cond_channels: usize) -> Vec<Tensor<f64>> {
    let s = cfg.model.image_size;
    vec![
        uniform(r, &[1, 1, s, s], -1.0, 1.0),
        uniform(r, &[1, 1, s, s], -0.5, 0.5),
        uniform(r, &[1, cond_channels, s, s], -1.0, 1.0),
    ]
}

/// Coarse model: gradients with respect to the image and every weight.
fn coarse_model_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let cfg = tiny_run_config(seed);
    let model = CoarseModel::<f64>::new(&cfg.model, &cfg.train.ablations);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = model_inputs(&mut r, &cfg, 6);
    inputs.extend(model.params.tensors().iter().cloned());
    (inputs, Box::new(move |g, x| {
        let bound = crate::networks::Bound::from_ids(x[3..].to_vec());
        let (_, out) = model.forward(g, &bound, x[0], x[1], x[2])?;
        project(g, out, seed)
    }))
}

fn generator_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let cfg = tiny_run_config(seed);
    let model = RefineGenerator::<f64>::new(&cfg.model, &cfg.train.ablations);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = model_inputs(&mut r, &cfg, 6);
    let s = cfg.model.image_size;
    inputs.push(uniform(&mut r, &[1, 1, s, s], -1.0, 1.0));
    inputs.extend(model.params.tensors().iter().cloned());
    (inputs, Box::new(move |g, x| {
        let bound = crate::networks::Bound::from_ids(x[4..].to_vec());
        let out = model.forward(g, &bound, x[3], x[0], x[1], x[2])?;
        project(g, out.refined, seed)
    }))
}

fn discriminator_case(seed: u64) -> (Vec<Tensor<f64>>, Box<Objective>) {
    let cfg = tiny_run_config(seed);
    let model = MultiTaskDiscriminator::<f64>::new(&cfg.model);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.model.image_size;
    let mut inputs = vec![uniform(&mut r, &[2, 1, s, s], -1.0, 1.0)];
    inputs.extend(model.params.tensors().iter().cloned());
    (inputs, Box::new(move |g, x| {
        let bound = crate::networks::Bound::from_ids(x[1..].to_vec());
        let d = model.forward(g, &bound, x[0])?;
        let a = project(g, d.adv_logit, seed)?;
        let b = project(g, d.gaze, seed + 1)?;
        g.add(a, b)
    }))
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "conv2d", build: conv_case, piecewise: false },
        Case { name: "bilinear_warp", build: warp_case, piecewise: false },
        Case { name: "elementwise", build: elementwise_case, piecewise: false },
        Case { name: "dense", build: dense_case, piecewise: false },
        Case { name: "gram", build: gram_case, piecewise: false },
        Case { name: "recon_loss", build: recon_case, piecewise: false },
        Case { name: "gaze_loss", build: gaze_case, piecewise: false },
        Case { name: "adversarial_loss", build: adversarial_case, piecewise: false },
        Case { name: "perceptual_loss", build: perceptual_case, piecewise: true },
        Case { name: "loss_totals", build: totals_case, piecewise: false },
        Case { name: "three_layer_stack", build: stack_case, piecewise: false },
        Case { name: "coarse_model", build: coarse_model_case, piecewise: true },
        Case { name: "generator", build: generator_case, piecewise: true },
        Case { name: "discriminator", build: discriminator_case, piecewise: true },
    ]
}

/// Outcome of one case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: usize,
    pub worst: f64,
    pub worst_seed: u64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }
}

/// Runs every case over seeds `0..seeds`.
pub fn run_suite(seeds: usize) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut reports = Vec::new();
    for case in cases() {
        let errs = par::map_indexed(seeds, |s| case.check(s as u64));
        let mut worst = (0.0f64, 0u64);
        for (s, e) in errs.into_iter().enumerate() {
            let e = e?;
            if e > worst.0 || e.is_nan() {
                worst = (e, s as u64);
            }
        }
        reports.push(CaseReport {
            name: case.name,
            seeds,
            worst: worst.0,
            worst_seed: worst.1,
        });
    }
    Ok(SuiteReport {
        cases: reports,
        elapsed: start.elapsed(),
    })
}
