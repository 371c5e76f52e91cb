//! Objective terms and their weighted totals.
//!
//! "L2 distance" everywhere means the batch mean of the per-sample Euclidean
//! norm of the flattened difference (not squared, not per element).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::networks::LEAKY_SLOPE;
use crate::tensor::{Real, Tensor};

/// `λ1..λ4`: gaze weight in the discriminator objective, then reconstruction,
/// perceptual and gaze weights in the generator objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 5.0,
            lambda2: 0.1,
            lambda3: 100.0,
            lambda4: 10.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Result<Self> {
        let w = LossWeights {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
        };
        for v in [lambda1, lambda2, lambda3, lambda4] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {v} must be non-negative")));
            }
        }
        Ok(w)
    }

    pub fn from_config(cfg: &LossConfig) -> Result<Self> {
        Self::new(cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.lambda4)
    }
}

fn ensure_same(g: &Graph<impl Real>, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape(op, g.value(a).shape(), g.value(b).shape()));
    }
    Ok(())
}

/// Batch mean of per-sample Euclidean distances.
pub fn l2_distance<T: Real>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    ensure_same(g, pred, target, "l2 distance")?;
    let d = g.sub(pred, target)?;
    let n = g.row_norm(d)?;
    g.mean(n)
}

/// Image reconstruction loss, used for both the coarse and the fine stage.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    l2_distance(g, pred, target)
}

/// Gaze regression loss between predicted and labelled normalized angles.
pub fn gaze_regression_loss<T: Real>(g: &mut Graph<T>, predicted: NodeId, labels: NodeId) -> Result<NodeId> {
    l2_distance(g, predicted, labels)
}

/// `(L_adv_D, L_adv_G)` from discriminator logits.
///
/// `L_adv_D = -E[log σ(real)] - E[log(1 - σ(fake_for_d))]`, with the fake batch
/// already detached from the generator; `L_adv_G = -E[log σ(fake_for_g)]`.
/// Either side may be skipped by passing `None`.
pub fn adversarial_losses<T: Real>(
    g: &mut Graph<T>,
    real_logits: Option<NodeId>,
    fake_logits_for_d: Option<NodeId>,
    fake_logits_for_g: Option<NodeId>,
) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let d = match (real_logits, fake_logits_for_d) {
        (Some(real), Some(fake)) => {
            // -log σ(x) = softplus(-x); -log(1 - σ(x)) = softplus(x)
            let neg = g.scale(real, -T::one())?;
            let real_term = g.softplus(neg)?;
            let real_term = g.mean(real_term)?;
            let fake_term = g.softplus(fake)?;
            let fake_term = g.mean(fake_term)?;
            Some(g.add(real_term, fake_term)?)
        }
        (None, None) => None,
        _ => return Err(Error::Invalid("discriminator loss needs both real and fake logits".into())),
    };
    let gen = match fake_logits_for_g {
        Some(fake) => {
            let neg = g.scale(fake, -T::one())?;
            let t = g.softplus(neg)?;
            Some(g.mean(t)?)
        }
        None => None,
    };
    Ok((d, gen))
}

/// Component values entering the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub recon: NodeId,
    pub perceptual: Option<NodeId>,
    pub gaze: NodeId,
    pub adversarial: NodeId,
}

/// `λ1·L_d_gaze + L_adv_D`: the discriminator's minimized objective.
pub fn total_d<T: Real>(g: &mut Graph<T>, w: &LossWeights, gaze: NodeId, adversarial: NodeId) -> Result<NodeId> {
    let a = g.scale(gaze, T::lit(w.lambda1))?;
    g.add(a, adversarial)
}

/// `λ2·L_recon + λ3·L_per + λ4·L_gaze + L_adv_G`. A missing perceptual term
/// contributes 0.
pub fn total_g<T: Real>(g: &mut Graph<T>, w: &LossWeights, t: &GeneratorTerms) -> Result<NodeId> {
    let mut acc = g.scale(t.recon, T::lit(w.lambda2))?;
    if let Some(p) = t.perceptual {
        let s = g.scale(p, T::lit(w.lambda3))?;
        acc = g.add(acc, s)?;
    }
    let s = g.scale(t.gaze, T::lit(w.lambda4))?;
    acc = g.add(acc, s)?;
    g.add(acc, t.adversarial)
}

/// Plain-number versions of the totals for reporting.
pub fn total_g_value(w: &LossWeights, recon: f64, perceptual: f64, gaze: f64, adversarial: f64) -> f64 {
    w.lambda2 * recon + w.lambda3 * perceptual + w.lambda4 * gaze + adversarial
}

pub fn total_d_value(w: &LossWeights, gaze: f64, adversarial: f64) -> f64 {
    w.lambda1 * gaze + adversarial
}

/// Frozen convolutional feature stack used by the perceptual loss and the
/// feature distance. Weights come from a fixed seed and never train.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T: Real = f32> {
    kernels: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
    strides: Vec<usize>,
    image_size: usize,
    image_channels: usize,
    content_layer: usize,
    gram_layers: Vec<usize>,
}

impl<T: Real> FeatureExtractor<T> {
    /// Blocks alternate stride 1 and 2, starting with stride 1.
    pub fn new(cfg: &LossConfig, image_channels: usize, image_size: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.extractor_seed);
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut strides = Vec::new();
        let mut cin = image_channels;
        let mut size = image_size;
        for (i, &c) in cfg.extractor_channels.iter().enumerate() {
            let stride = if i % 2 == 1 && size >= 4 { 2 } else { 1 };
            size = (size + 2 - 3) / stride + 1;
            let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * (cin * 9) as f64)).sqrt();
            kernels.push(Tensor::from_fn(&[c, cin, 3, 3], |_| T::lit(rng.gen_range(-bound..bound))));
            biases.push(Tensor::from_fn(&[c], |_| T::lit(rng.gen_range(-0.1..0.1))));
            strides.push(stride);
            cin = c;
        }
        let taps = kernels.len();
        if cfg.content_layer == 0 || cfg.content_layer > taps || cfg.gram_layers.iter().any(|&j| j == 0 || j > taps) {
            return Err(Error::Config(format!("extractor tap layers must lie in 1..={taps}")));
        }
        Ok(FeatureExtractor {
            kernels,
            biases,
            strides,
            image_size,
            image_channels,
            content_layer: cfg.content_layer,
            gram_layers: cfg.gram_layers.clone(),
        })
    }

    pub fn depth(&self) -> usize {
        self.kernels.len()
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            kernels: self.kernels.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
            strides: self.strides.clone(),
            image_size: self.image_size,
            image_channels: self.image_channels,
            content_layer: self.content_layer,
            gram_layers: self.gram_layers.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [shape.first().copied().unwrap_or(0), self.image_channels, self.image_size, self.image_size];
        if shape != want {
            return Err(Error::shape("feature extractor", &want, shape));
        }
        Ok(())
    }

    /// Activations after every block; weights enter as constants.
    pub fn features(&self, g: &mut Graph<T>, x: NodeId) -> Result<Vec<NodeId>> {
        self.check_input(g.value(x).shape())?;
        let mut out = Vec::with_capacity(self.kernels.len());
        let mut h = x;
        for ((k, b), &s) in self.kernels.iter().zip(&self.biases).zip(&self.strides) {
            let kid = g.constant(k.clone());
            let bid = g.constant(b.clone());
            let y = g.conv2d(h, kid, s, 1)?;
            let y = g.add_channel_bias(y, bid)?;
            h = g.leaky_relu(y, T::lit(LEAKY_SLOPE))?;
            out.push(h);
        }
        Ok(out)
    }

    pub fn feature_values(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let ids = self.features(&mut g, xi)?;
        Ok(ids.into_iter().map(|id| g.value(id).clone()).collect())
    }
}

/// Content term at the configured layer, normalized by `h·w·c`, plus the sum of
/// Gram-matrix distances over the tap layers.
pub fn perceptual_loss<T: Real>(
    g: &mut Graph<T>,
    extractor: &FeatureExtractor<T>,
    pred: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    ensure_same(g, pred, target, "perceptual_loss")?;
    let fp = extractor.features(g, pred)?;
    let ft = extractor.features(g, target)?;
    let j = extractor.content_layer - 1;
    let content = l2_distance(g, fp[j], ft[j])?;
    let shape = g.value(fp[j]).shape();
    let norm: usize = shape[1..].iter().product();
    let mut total = g.scale(content, T::one() / T::lit(norm as f64))?;
    for &layer in &extractor.gram_layers {
        let gp = g.gram(fp[layer - 1])?;
        let gt = g.gram(ft[layer - 1])?;
        let d = l2_distance(g, gp, gt)?;
        total = g.add(total, d)?;
    }
    Ok(total)
}
