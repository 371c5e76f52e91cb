//! Two-stage optimization: the coarse encoder-decoder on reconstruction, then
//! alternating discriminator and generator steps with the coarse branch frozen.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::{RunConfig, TrainConfig};
use crate::data::{normalize_angles, Checkpoint, CheckpointMeta, RedirectionPair};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, gaze_regression_loss, perceptual_loss, recon_loss, total_d, total_g, FeatureExtractor,
    GeneratorTerms, LossWeights,
};
use crate::networks::{head_planes, stack_conditions, Bound, CoarseModel, MultiTaskDiscriminator, ParamStore, RefineGenerator};
use crate::npg::build_condition;
use crate::tensor::{Real, Tensor};

/// Adam moment accumulators for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptimState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(t: &TrainConfig, lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

/// One bias-corrected Adam update. Refuses to touch anything when a gradient
/// is non-finite.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimState<T>, h: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Invalid(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(h.lr > 0.0) {
        return Err(Error::Invalid(format!("adam: learning rate {} must be positive", h.lr)));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iter: state.step as usize,
                what: format!("gradient of parameter {i} (shape {:?}) is {:?} at element {j}", g.shape(), g.data()[j]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(h.beta1), T::lit(h.beta2));
    let c1 = T::one() - T::lit(h.beta1.powi(t));
    let c2 = T::one() - T::lit(h.beta2.powi(t));
    let (lr, eps) = (T::lit(h.lr), T::lit(h.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub coarse: f64,
    pub gan: f64,
}

/// `coarse` is constant; `gan` holds until `decay_start_iter` of the fine
/// stage, then falls linearly to 0 at `fine_iters`.
pub fn lr_schedule(iter: usize, t: &TrainConfig) -> LearningRates {
    let total = t.fine_iters;
    let start = t.decay_start_iter.min(total);
    let gan = if iter >= total {
        0.0
    } else if iter <= start {
        t.lr_gan
    } else {
        t.lr_gan * (total - iter) as f64 / (total - start) as f64
    };
    LearningRates { coarse: t.lr_coarse, gan }
}

/// One row of a loss trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub name: String,
    pub value: f64,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["iter", "loss_name", "value"]).map_err(err)?;
    for r in rows {
        w.write_record([r.iter.to_string(), r.name.clone(), format!("{:e}", r.value)]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 2)))?;
        let bad = || Error::Data(format!("{} line {}: malformed trace row", path.display(), i + 2));
        out.push(TraceRow {
            iter: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            name: rec.get(1).ok_or_else(bad)?.to_string(),
            value: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
        })
    }
    Ok(out)
}

/// Values of one named series, in iteration order.
pub fn series(rows: &[TraceRow], name: &str) -> Vec<f64> {
    rows.iter().filter(|r| r.name == name).map(|r| r.value).collect()
}

/// Network inputs for a batch of pairs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x_a: Tensor<f32>,
    pub x_b: Tensor<f32>,
    pub heads: Tensor<f32>,
    pub cond: Tensor<f32>,
    /// Normalized target angles `[n, 2]`.
    pub labels_b: Tensor<f32>,
}

pub fn assemble_batch(pairs: &[&RedirectionPair], cfg: &RunConfig) -> Result<Batch> {
    let m = &cfg.model;
    let gazemaps = !cfg.train.ablations.no_gazemap;
    let x_a = Tensor::stack(&pairs.iter().map(|p| p.source.image.clone()).collect::<Vec<_>>())?;
    let x_b = Tensor::stack(&pairs.iter().map(|p| p.target.image.clone()).collect::<Vec<_>>())?;
    let expect = [pairs.len(), m.image_channels, m.image_size, m.image_size];
    if x_a.shape() != expect {
        return Err(Error::shape("assemble_batch", &expect, x_a.shape()));
    }
    let heads: Vec<_> = pairs.iter().map(|p| p.source.head).collect();
    let conds = pairs
        .iter()
        .map(|p| build_condition(p.source.gaze, p.target.gaze, m.image_size, m.image_size, m.angle_scale_deg, gazemaps))
        .collect::<Result<Vec<_>>>()?;
    let mut labels = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let v = normalize_angles(p.target.gaze, m.angle_scale_deg, false)?;
        labels.extend(v.iter().map(|&x| x as f32));
    }
    Ok(Batch {
        x_a,
        x_b,
        heads: head_planes(&heads, m.image_size, m.head_scale_deg),
        cond: stack_conditions(&conds)?,
        labels_b: Tensor::new(&[pairs.len(), 2], labels)?,
    })
}

/// Pair indices of iteration `iter`; a pure function of its arguments, so a
/// resumed run draws exactly the batches the uninterrupted run would.
pub fn batch_indices(seed: u64, stage: u64, iter: usize, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage << 48) ^ iter as u64);
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

const STAGE_COARSE: u64 = 1;
const STAGE_FINE: u64 = 2;

fn sample_batch<'a>(data: &'a [RedirectionPair], cfg: &RunConfig, stage: u64, iter: usize) -> Result<Vec<&'a RedirectionPair>> {
    if data.is_empty() {
        return Err(Error::Invalid("training needs a non-empty pair dataset".into()));
    }
    Ok(batch_indices(cfg.train.seed, stage, iter, data.len(), cfg.train.batch_size)
        .into_iter()
        .map(|i| &data[i])
        .collect())
}

fn diverged(iter: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            iter,
            what: format!("{op} produced a non-finite value"),
        },
        Error::Divergence { what, .. } => Error::Divergence { iter, what },
        other => other,
    }
}

fn scalar(g: &Graph<f32>, id: NodeId) -> f64 {
    g.value(id).data()[0] as f64
}

fn grads_for(g: &Graph<f32>, loss: NodeId, bound: &Bound) -> Result<Vec<Tensor<f32>>> {
    let grads = g.backward(loss)?;
    Ok(bound.ids().iter().map(|&id| grads.wrt(id)).collect())
}

/// Stage-1 optimizer state.
#[derive(Clone, Debug)]
pub struct CoarseTrainer {
    cfg: RunConfig,
    pub model: CoarseModel<f32>,
    opt: OptimState<f32>,
    iter: usize,
    trace: Vec<TraceRow>,
}

impl CoarseTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = CoarseModel::new(&cfg.model, &cfg.train.ablations);
        let opt = OptimState::new(model.params.tensors());
        Ok(CoarseTrainer {
            cfg: cfg.clone(),
            model,
            opt,
            iter: 0,
            trace: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    /// Rows recorded by this trainer instance (not those before a resume).
    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Runs one iteration and returns the batch reconstruction loss. On error
    /// the parameters are left as they were.
    pub fn step(&mut self, data: &[RedirectionPair]) -> Result<f64> {
        let it = self.iter;
        let batch = assemble_batch(&sample_batch(data, &self.cfg, STAGE_COARSE, it)?, &self.cfg)?;
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let (loss, grads) = (|| -> Result<(f64, Vec<Tensor<f32>>)> {
            let xa = g.constant(batch.x_a);
            let xb = g.constant(batch.x_b);
            let h = g.constant(batch.heads);
            let c = g.constant(batch.cond);
            let (_, coarse) = self.model.forward(&mut g, &p, xa, h, c)?;
            let loss = recon_loss(&mut g, coarse, xb)?;
            Ok((scalar(&g, loss), grads_for(&g, loss, &p)?))
        })()
        .map_err(|e| diverged(it, e))?;
        let h = AdamHyper::from_config(&self.cfg.train, lr_schedule(it, &self.cfg.train).coarse);
        adam_step(self.model.params.tensors_mut(), &grads, &mut self.opt, h).map_err(|e| diverged(it, e))?;
        self.iter += 1;
        self.trace.push(TraceRow {
            iter: it,
            name: "recon".into(),
            value: loss,
        });
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta {
            stage: "coarse".into(),
            iteration: self.iter as u64,
            adam_steps: BTreeMap::from([("coarse".to_string(), self.opt.step)]),
            notes: BTreeMap::from([("coarse_checksum".to_string(), format!("{:016x}", self.model.params.checksum()))]),
            config: self.cfg.clone(),
        });
        c.push_store("coarse", &self.model.params);
        c.push_tensors("opt.coarse.m", &self.opt.m);
        c.push_tensors("opt.coarse.v", &self.opt.v);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.stage != "coarse" {
            return Err(Error::Data(format!("expected a coarse checkpoint, found stage `{}`", ckpt.meta.stage)));
        }
        let mut t = CoarseTrainer::new(&ckpt.meta.config)?;
        ckpt.load_store("coarse", &mut t.model.params)?;
        let n = t.model.params.len();
        t.opt.m = ckpt.tensors_with_prefix("opt.coarse.m", n)?;
        t.opt.v = ckpt.tensors_with_prefix("opt.coarse.v", n)?;
        t.opt.step = ckpt.meta.adam_steps.get("coarse").copied().unwrap_or(0);
        t.iter = ckpt.meta.iteration as usize;
        Ok(t)
    }
}

/// Loads only the coarse model from a coarse or fine checkpoint.
pub fn coarse_model_from_checkpoint(ckpt: &Checkpoint) -> Result<CoarseModel<f32>> {
    let cfg = &ckpt.meta.config;
    let mut model = CoarseModel::new(&cfg.model, &cfg.train.ablations);
    ckpt.load_store("coarse", &mut model.params)?;
    Ok(model)
}

/// Trains the coarse branch for `cfg.train.coarse_iters` iterations.
pub fn train_coarse(data: &[RedirectionPair], cfg: &RunConfig) -> Result<(CoarseModel<f32>, Vec<TraceRow>)> {
    let mut t = CoarseTrainer::new(cfg)?;
    while t.iteration() < cfg.train.coarse_iters {
        t.step(data)?;
    }
    Ok((t.model, t.trace))
}

/// Outcome of one residual-identity audit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualCheck {
    pub iter: usize,
    pub elements: usize,
    /// Elements where `x̂_b` differs from `R + x̃_b`.
    pub mismatches: usize,
}

/// Counts elements where `refined != generated + coarse` in 32-bit arithmetic.
pub fn residual_mismatches(refined: &Tensor<f32>, generated: &Tensor<f32>, coarse: &Tensor<f32>) -> usize {
    refined
        .data()
        .iter()
        .zip(generated.data())
        .zip(coarse.data())
        .filter(|((x, r), c)| **x != **r + **c)
        .count()
}

/// Everything one fine iteration computes before any state changes.
struct FineOutcome {
    disc: ParamStore<f32>,
    opt_d: OptimState<f32>,
    gen_grads: Vec<Tensor<f32>>,
    values: Vec<(&'static str, f64)>,
    residual: Option<ResidualCheck>,
    /// Gradients of `(total_D, total_G)` with respect to the coarse parameters,
    /// filled only by the isolation probe.
    coarse_grads: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

/// Stage-2 state: frozen coarse model, generator, discriminator and their
/// optimizers.
#[derive(Clone, Debug)]
pub struct FineTrainer {
    cfg: RunConfig,
    coarse: CoarseModel<f32>,
    coarse_checksum: u64,
    pub generator: RefineGenerator<f32>,
    pub discriminator: MultiTaskDiscriminator<f32>,
    extractor: FeatureExtractor<f32>,
    weights: LossWeights,
    opt_g: OptimState<f32>,
    opt_d: OptimState<f32>,
    iter: usize,
    trace: Vec<TraceRow>,
    residual_checks: Vec<ResidualCheck>,
}

pub const FINE_SERIES: [&str; 8] = [
    "d_adv", "d_gaze", "d_total", "g_recon", "g_perceptual", "g_gaze", "g_adv", "g_total",
];

impl FineTrainer {
    pub fn new(cfg: &RunConfig, coarse: CoarseModel<f32>) -> Result<Self> {
        cfg.validate()?;
        let probe = CoarseModel::<f32>::new(&cfg.model, &cfg.train.ablations);
        if probe.output_kind() != coarse.output_kind() || probe.params.names() != coarse.params.names() {
            return Err(Error::Config("coarse model does not match the fine-stage configuration".into()));
        }
        let generator = RefineGenerator::new(&cfg.model, &cfg.train.ablations);
        let discriminator = MultiTaskDiscriminator::new(&cfg.model);
        let mut weights = LossWeights::from_config(&cfg.loss)?;
        if cfg.train.ablations.no_perceptual {
            weights.lambda3 = 0.0;
        }
        Ok(FineTrainer {
            opt_g: OptimState::new(generator.params.tensors()),
            opt_d: OptimState::new(discriminator.params.tensors()),
            extractor: FeatureExtractor::new(&cfg.loss, cfg.model.image_channels, cfg.model.image_size)?,
            coarse_checksum: coarse.params.checksum(),
            cfg: cfg.clone(),
            coarse,
            generator,
            discriminator,
            weights,
            iter: 0,
            trace: Vec::new(),
            residual_checks: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn residual_checks(&self) -> &[ResidualCheck] {
        &self.residual_checks
    }

    pub fn coarse(&self) -> &CoarseModel<f32> {
        &self.coarse
    }

    pub fn extractor(&self) -> &FeatureExtractor<f32> {
        &self.extractor
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Checksum of the coarse parameters when this trainer was created.
    pub fn initial_coarse_checksum(&self) -> u64 {
        self.coarse_checksum
    }

    fn run_iteration(&self, batch: Batch, it: usize, probe: bool) -> Result<FineOutcome> {
        let mut g = Graph::new();
        let pc = self.coarse.params.bind(&mut g, probe);
        let xa = g.constant(batch.x_a);
        let xb = g.constant(batch.x_b);
        let h = g.constant(batch.heads);
        let c = g.constant(batch.cond);
        let labels = g.constant(batch.labels_b);
        let (_, coarse_out) = self.coarse.forward(&mut g, &pc, xa, h, c)?;
        // The fine stage never updates Enc/Dec: cut the graph at x̃_b.
        let x_tilde = g.detach(coarse_out);
        let pg = self.generator.params.bind(&mut g, true);
        let refined = self.generator.forward(&mut g, &pg, x_tilde, xa, h, c)?;

        let every = self.cfg.train.residual_check_every;
        let residual = (self.generator.is_residual() && every > 0 && it % every == 0).then(|| ResidualCheck {
            iter: it,
            elements: g.value(refined.refined).len(),
            mismatches: residual_mismatches(g.value(refined.refined), g.value(refined.generated), g.value(x_tilde)),
        });

        // Discriminator step on a detached fake batch.
        let pd = self.discriminator.params.bind(&mut g, true);
        let fake_d = g.detach(refined.refined);
        let d_real = self.discriminator.forward(&mut g, &pd, xb)?;
        let d_fake = self.discriminator.forward(&mut g, &pd, fake_d)?;
        let (adv_d, _) = adversarial_losses(&mut g, Some(d_real.adv_logit), Some(d_fake.adv_logit), None)?;
        let adv_d = adv_d.expect("both logits supplied");
        let gaze_d = gaze_regression_loss(&mut g, d_real.gaze, labels)?;
        let tot_d = total_d(&mut g, &self.weights, gaze_d, adv_d)?;
        let d_grads = g.backward(tot_d)?;
        let mut disc = self.discriminator.params.clone();
        let mut opt_d = self.opt_d.clone();
        let lr = lr_schedule(it, &self.cfg.train).gan;
        let grads: Vec<_> = pd.ids().iter().map(|&id| d_grads.wrt(id)).collect();
        if lr > 0.0 {
            adam_step(disc.tensors_mut(), &grads, &mut opt_d, AdamHyper::from_config(&self.cfg.train, lr))?;
        }

        // Generator step against the updated discriminator.
        let pd2 = disc.bind(&mut g, false);
        let d_gen = self.discriminator.forward(&mut g, &pd2, refined.refined)?;
        let (_, adv_g) = adversarial_losses(&mut g, None, None, Some(d_gen.adv_logit))?;
        let adv_g = adv_g.expect("fake logits supplied");
        let gaze_g = gaze_regression_loss(&mut g, d_gen.gaze, labels)?;
        let recon = recon_loss(&mut g, refined.refined, xb)?;
        let perceptual = if self.weights.lambda3 > 0.0 {
            Some(perceptual_loss(&mut g, &self.extractor, refined.refined, xb)?)
        } else {
            None
        };
        let terms = GeneratorTerms {
            recon,
            perceptual,
            gaze: gaze_g,
            adversarial: adv_g,
        };
        let tot_g = total_g(&mut g, &self.weights, &terms)?;
        let g_grads = g.backward(tot_g)?;
        let gen_grads = pg.ids().iter().map(|&id| g_grads.wrt(id)).collect();
        let coarse_grads = probe.then(|| {
            let of = |gr: &crate::autodiff::Gradients<f32>| pc.ids().iter().map(|&id| gr.wrt(id)).collect::<Vec<_>>();
            (of(&d_grads), of(&g_grads))
        });

        let values = vec![
            ("d_adv", scalar(&g, adv_d)),
            ("d_gaze", scalar(&g, gaze_d)),
            ("d_total", scalar(&g, tot_d)),
            ("g_recon", scalar(&g, recon)),
            ("g_perceptual", perceptual.map_or(0.0, |p| scalar(&g, p))),
            ("g_gaze", scalar(&g, gaze_g)),
            ("g_adv", scalar(&g, adv_g)),
            ("g_total", scalar(&g, tot_g)),
        ];
        Ok(FineOutcome {
            disc,
            opt_d,
            gen_grads,
            values,
            residual,
            coarse_grads,
        })
    }

    /// One D step followed by one G step. On error nothing is updated.
    pub fn step(&mut self, data: &[RedirectionPair]) -> Result<()> {
        let it = self.iter;
        let batch = assemble_batch(&sample_batch(data, &self.cfg, STAGE_FINE, it)?, &self.cfg)?;
        let out = self.run_iteration(batch, it, false).map_err(|e| diverged(it, e))?;
        let lr = lr_schedule(it, &self.cfg.train).gan;
        let mut gen = self.generator.params.clone();
        let mut opt_g = self.opt_g.clone();
        if lr > 0.0 {
            adam_step(gen.tensors_mut(), &out.gen_grads, &mut opt_g, AdamHyper::from_config(&self.cfg.train, lr))
                .map_err(|e| diverged(it, e))?;
        }
        if let Some(check) = out.residual {
            if check.mismatches != 0 {
                return Err(Error::Invalid(format!(
                    "residual identity violated at iteration {it}: {} of {} elements",
                    check.mismatches, check.elements
                )));
            }
            self.residual_checks.push(check);
        }
        self.generator.params = gen;
        self.opt_g = opt_g;
        self.discriminator.params = out.disc;
        self.opt_d = out.opt_d;
        for (name, value) in out.values {
            self.trace.push(TraceRow {
                iter: it,
                name: name.into(),
                value,
            });
        }
        self.iter += 1;
        Ok(())
    }

    /// Gradients of `total_D` and `total_G` with respect to every coarse
    /// parameter on the batch of the current iteration, computed with the
    /// coarse weights bound as trainable leaves. No state changes.
    pub fn probe_coarse_gradients(&self, data: &[RedirectionPair]) -> Result<Vec<(String, Tensor<f32>, Tensor<f32>)>> {
        let batch = assemble_batch(&sample_batch(data, &self.cfg, STAGE_FINE, self.iter)?, &self.cfg)?;
        let out = self.run_iteration(batch, self.iter, true)?;
        let (d, g) = out.coarse_grads.expect("probe requested");
        Ok(self
            .coarse
            .params
            .names()
            .iter()
            .cloned()
            .zip(d)
            .zip(g)
            .map(|((n, d), g)| (n, d, g))
            .collect())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta {
            stage: "fine".into(),
            iteration: self.iter as u64,
            adam_steps: BTreeMap::from([("gen".to_string(), self.opt_g.step), ("disc".to_string(), self.opt_d.step)]),
            notes: BTreeMap::from([("coarse_checksum".to_string(), format!("{:016x}", self.coarse_checksum))]),
            config: self.cfg.clone(),
        });
        c.push_store("coarse", &self.coarse.params);
        c.push_store("gen", &self.generator.params);
        c.push_store("disc", &self.discriminator.params);
        c.push_tensors("opt.gen.m", &self.opt_g.m);
        c.push_tensors("opt.gen.v", &self.opt_g.v);
        c.push_tensors("opt.disc.m", &self.opt_d.m);
        c.push_tensors("opt.disc.v", &self.opt_d.v);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.stage != "fine" {
            return Err(Error::Data(format!("expected a fine checkpoint, found stage `{}`", ckpt.meta.stage)));
        }
        let mut t = FineTrainer::new(&ckpt.meta.config, coarse_model_from_checkpoint(ckpt)?)?;
        ckpt.load_store("gen", &mut t.generator.params)?;
        ckpt.load_store("disc", &mut t.discriminator.params)?;
        let (ng, nd) = (t.generator.params.len(), t.discriminator.params.len());
        t.opt_g.m = ckpt.tensors_with_prefix("opt.gen.m", ng)?;
        t.opt_g.v = ckpt.tensors_with_prefix("opt.gen.v", ng)?;
        t.opt_d.m = ckpt.tensors_with_prefix("opt.disc.m", nd)?;
        t.opt_d.v = ckpt.tensors_with_prefix("opt.disc.v", nd)?;
        t.opt_g.step = ckpt.meta.adam_steps.get("gen").copied().unwrap_or(0);
        t.opt_d.step = ckpt.meta.adam_steps.get("disc").copied().unwrap_or(0);
        t.iter = ckpt.meta.iteration as usize;
        Ok(t)
    }
}

/// Trains G and D for `cfg.train.fine_iters` iterations with `coarse` frozen.
pub fn train_fine(data: &[RedirectionPair], coarse: CoarseModel<f32>, cfg: &RunConfig) -> Result<FineTrainer> {
    let mut t = FineTrainer::new(cfg, coarse)?;
    while t.iteration() < cfg.train.fine_iters {
        t.step(data)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_pair_dataset, AngleGrid};
    use approx::assert_abs_diff_eq;

    fn hyper(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::from_fn(&[3], |i| i as f64)];
        let before = p.clone();
        let mut s = OptimState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, hyper(1e-3)).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut s = OptimState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, hyper(2e-4)).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        assert_abs_diff_eq!(p[0].data()[0], -2e-4 / (1.0 + 1e-8), epsilon = 1e-18);
    }

    #[test]
    fn adam_matches_unrolled_recurrence() {
        let grads = [0.3, -1.2, 0.7];
        let mut p = vec![Tensor::<f64>::scalar(0.5)];
        let mut s = OptimState::new(&p);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &gr) in grads.iter().enumerate() {
            adam_step(&mut p, &[Tensor::scalar(gr)], &mut s, hyper(1e-2)).unwrap();
            m = 0.5 * m + 0.5 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let k = t as i32 + 1;
            w -= 1e-2 * (m / (1.0 - 0.5f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        }
        assert_abs_diff_eq!(p[0].data()[0], w, epsilon = 1e-15);
    }

    #[test]
    fn identical_copies_evolve_identically() {
        let init = Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.1);
        let mut a = vec![init.clone(), init.clone()];
        let mut s = OptimState::new(&a);
        for k in 0..5 {
            let g = Tensor::from_fn(&[4], |i| ((i + k) as f32).sin());
            adam_step(&mut a, &[g.clone(), g], &mut s, hyper(1e-2)).unwrap();
        }
        assert_eq!(a[0], a[1]);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = vec![Tensor::<f32>::scalar(1.0)];
        let mut s = OptimState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f32::NAN)], &mut s, hyper(1e-3)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(p[0].data()[0], 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let t = TrainConfig {
            fine_iters: 3000,
            decay_start_iter: 2000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &t).gan, t.lr_gan);
        assert_eq!(lr_schedule(2000, &t).gan, t.lr_gan);
        assert_abs_diff_eq!(lr_schedule(2500, &t).gan, t.lr_gan / 2.0, epsilon = 1e-18);
        assert_eq!(lr_schedule(3000, &t).gan, 0.0);
        assert_eq!(lr_schedule(3000, &t).coarse, t.lr_coarse);
    }

    fn smoke_data(cfg: &RunConfig, n: usize, seed: u64) -> Vec<RedirectionPair> {
        make_pair_dataset(n, seed, &AngleGrid::from_config(&cfg.data), cfg.model.image_size, cfg.model.image_channels).unwrap()
    }

    #[test]
    fn coarse_trace_is_deterministic_and_sized() {
        let cfg = RunConfig::smoke();
        let data = smoke_data(&cfg, 6, 3);
        let (_, a) = train_coarse(&data, &cfg).unwrap();
        let (_, b) = train_coarse(&data, &cfg).unwrap();
        assert_eq!(a.len(), cfg.train.coarse_iters);
        let bits = |r: &[TraceRow]| r.iter().map(|x| x.value.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn single_pair_step_rarely_increases_loss() {
        let mut improved = 0;
        for seed in 0..10u64 {
            let mut cfg = RunConfig::smoke();
            cfg.train.seed = seed;
            cfg.model.init_seed = seed;
            cfg.train.batch_size = 1;
            cfg.train.lr_coarse = 1e-3;
            let data = smoke_data(&cfg, 1, seed);
            let mut t = CoarseTrainer::new(&cfg).unwrap();
            let before = t.step(&data).unwrap();
            let after = t.step(&data).unwrap();
            if after <= before {
                improved += 1;
            }
        }
        assert!(improved >= 8, "only {improved}/10 seeds reduced the loss");
    }

    #[test]
    fn fine_stage_freezes_coarse_and_keeps_residual_identity() {
        let mut cfg = RunConfig::smoke();
        cfg.train.residual_check_every = 1;
        let data = smoke_data(&cfg, 6, 4);
        let (coarse, _) = train_coarse(&data, &cfg).unwrap();
        let before = coarse.params.checksum();
        let t = train_fine(&data, coarse, &cfg).unwrap();
        assert_eq!(t.coarse().params.checksum(), before);
        assert_eq!(t.residual_checks().len(), cfg.train.fine_iters);
        assert!(t.residual_checks().iter().all(|c| c.mismatches == 0));
        assert_eq!(t.trace().len(), FINE_SERIES.len() * cfg.train.fine_iters);
        for (_, d, g) in t.probe_coarse_gradients(&data).unwrap() {
            assert!(d.data().iter().chain(g.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn no_residual_skips_identity_audit() {
        let mut cfg = RunConfig::smoke();
        cfg.train.residual_check_every = 1;
        cfg.train.ablations.no_residual = true;
        let data = smoke_data(&cfg, 4, 2);
        let coarse = CoarseModel::new(&cfg.model, &cfg.train.ablations);
        let t = train_fine(&data, coarse, &cfg).unwrap();
        assert!(t.residual_checks().is_empty());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut cfg = RunConfig::smoke();
        cfg.train.coarse_iters = 10;
        cfg.train.fine_iters = 6;
        cfg.train.decay_start_iter = 3;
        let data = smoke_data(&cfg, 8, 5);
        let mut a = CoarseTrainer::new(&cfg).unwrap();
        let mut b = CoarseTrainer::new(&cfg).unwrap();
        for _ in 0..10 {
            a.step(&data).unwrap();
        }
        let ckpt = crate::data::checkpoint::decode(&crate::data::checkpoint::encode(&b.checkpoint()).unwrap()).unwrap();
        b = CoarseTrainer::from_checkpoint(&ckpt).unwrap();
        for _ in 0..10 {
            b.step(&data).unwrap();
        }
        assert_eq!(a.trace(), b.trace());

        let mut fa = FineTrainer::new(&cfg, a.model.clone()).unwrap();
        let mut fb = FineTrainer::new(&cfg, a.model.clone()).unwrap();
        for _ in 0..3 {
            fa.step(&data).unwrap();
            fb.step(&data).unwrap();
        }
        let ckpt = crate::data::checkpoint::decode(&crate::data::checkpoint::encode(&fb.checkpoint()).unwrap()).unwrap();
        let mut fb = FineTrainer::from_checkpoint(&ckpt).unwrap();
        for _ in 3..6 {
            fa.step(&data).unwrap();
            fb.step(&data).unwrap();
        }
        assert_eq!(&fa.trace()[3 * FINE_SERIES.len()..], fb.trace());
        assert_eq!(fa.generator.params, fb.generator.params);
    }
}
