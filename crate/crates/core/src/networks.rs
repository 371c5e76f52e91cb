//! The three trainable networks: the flow encoder-decoder, the conditional
//! residual generator and the two-headed discriminator.
//!
//! Every network owns a [`ParamStore`]; a forward pass first binds the store to
//! a [`Graph`] (as trainable leaves or frozen constants) and then records its ops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::config::{Ablations, ModelConfig};
use crate::error::{Error, Result};
use crate::npg::{condition_channels, ConditionTensor, HeadPose};
use crate::tensor::{Real, Tensor};
use crate::warp::FlowField;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor by the same-named entry of `source`, checking shapes.
    pub fn load_from<'a>(&mut self, mut source: impl FnMut(&str) -> Option<&'a Tensor<T>>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = source(name).ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load parameter", t.shape(), src.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Adds every parameter to `g`; trainable parameters collect gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { ids }
    }

    /// Order-sensitive checksum over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for (n, t) in self.iter() {
            bytes.extend_from_slice(n.as_bytes());
            for &v in t.data() {
                v.write_le(&mut bytes);
            }
        }
        let digest = <sha2::Sha256 as sha2::Digest>::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Graph node ids of one bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Wraps node ids that hold a store's tensors in store order.
    pub fn from_ids(ids: Vec<NodeId>) -> Self {
        Bound { ids }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    fn at(&self, i: usize) -> NodeId {
        self.ids[i]
    }
}

/// Fan-in scaled uniform initialisation for leaky-rectifier stacks.
fn init_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let slope = LEAKY_SLOPE;
    let bound = gain * (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        let w = store.push(format!("{name}.w"), init_uniform(rng, &[cout, cin, 3, 3], cin * 9, gain));
        let b = store.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            padding: 1,
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = g.conv2d(x, p.at(self.w), self.stride, self.padding)?;
        g.add_channel_bias(y, p.at(self.b))
    }

    fn apply_leaky<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = self.apply(g, p, x)?;
        g.leaky_relu(y, T::lit(LEAKY_SLOPE))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, out: usize) -> Self {
        let w = store.push(format!("{name}.w"), init_uniform(rng, &[fan_in, out], fan_in, 1.0));
        let b = store.push(format!("{name}.b"), Tensor::zeros(&[out]));
        Dense { w, b }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, p.at(self.w))?;
        g.add_row_bias(y, p.at(self.b))
    }
}

fn seeded(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn check_image<T: Real>(g: &Graph<T>, x: NodeId, cfg: &ModelConfig, what: &str) -> Result<(usize, usize)> {
    let shape = g.value(x).shape();
    let want = [shape.first().copied().unwrap_or(0), cfg.image_channels, cfg.image_size, cfg.image_size];
    if shape != want {
        return Err(Error::Invalid(format!(
            "{what}: expected image batch of shape {want:?}, got {shape:?}"
        )));
    }
    Ok((want[0], cfg.image_size))
}

fn check_batch_shape<T: Real>(g: &Graph<T>, x: NodeId, want: &[usize], what: &str) -> Result<()> {
    let shape = g.value(x).shape();
    if shape != want {
        return Err(Error::Invalid(format!("{what}: expected shape {want:?}, got {shape:?}")));
    }
    Ok(())
}

/// `[n, 1, h, w]` planes holding each head yaw divided by `scale_deg`.
pub fn head_planes<T: Real>(heads: &[HeadPose], size: usize, scale_deg: f64) -> Tensor<T> {
    let plane = size * size;
    Tensor::from_fn(&[heads.len(), 1, size, size], |i| T::lit(heads[i / plane].yaw / scale_deg))
}

/// Stacks per-sample condition tensors into `[n, c, h, w]`.
pub fn stack_conditions<T: Real>(conds: &[ConditionTensor<T>]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = conds.iter().map(|c| c.tensor().clone()).collect();
    Tensor::stack(&parts)
}

/// What the coarse decoder's last layer emits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoarseOutput {
    /// Two-channel flow bounded by `tanh · scale`.
    Flow { scale: f64 },
    /// The coarse image itself (ablation without flow).
    Image,
}

/// Encoder-decoder predicting the flow field (or, ablated, the coarse image).
///
/// There are no encoder-to-decoder skips. After the last decoder level, one
/// more full-resolution conv runs before the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseModel<T: Real = f32> {
    cfg: ModelConfig,
    output: CoarseOutput,
    cond_channels: usize,
    pub params: ParamStore<T>,
    enc: Vec<Conv>,
    dec: Vec<Conv>,
    full: Conv,
    out: Conv,
}

impl<T: Real> CoarseModel<T> {
    pub fn new(cfg: &ModelConfig, ablations: &Ablations) -> Self {
        let mut rng = seeded(cfg.init_seed, 1);
        let mut params = ParamStore::new();
        let cond_channels = condition_channels(!ablations.no_gazemap);
        let mut enc = Vec::new();
        let mut cin = cfg.image_channels + 1;
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            enc.push(Conv::new(&mut params, &mut rng, &format!("coarse.enc{i}"), cin, c, 2, 1.0));
            cin = c;
        }
        // Decoder widths mirror the encoder: [.., enc[1], enc[0], enc[0]].
        let depth = cfg.enc_channels.len();
        let mut dec = Vec::new();
        for level in 0..depth {
            let cout = cfg.enc_channels[depth.saturating_sub(2 + level)];
            dec.push(Conv::new(&mut params, &mut rng, &format!("coarse.dec{level}"), cin + cond_channels, cout, 1, 1.0));
            cin = cout;
        }
        let full = Conv::new(&mut params, &mut rng, "coarse.full", cin, cin, 1, 1.0);
        let (output, out_c) = if ablations.no_flow {
            (CoarseOutput::Image, cfg.image_channels)
        } else {
            (CoarseOutput::Flow { scale: cfg.flow_scale() }, 2)
        };
        let out = Conv::new(&mut params, &mut rng, "coarse.out", cin, out_c, 1, 0.1);
        CoarseModel {
            cfg: cfg.clone(),
            output,
            cond_channels,
            params,
            enc,
            dec,
            full,
            out,
        }
    }

    pub fn output_kind(&self) -> CoarseOutput {
        self.output
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Zeroes the last layer, so the flow (or image) output is identically 0.
    pub fn zero_output_layer(&mut self) {
        for i in [self.out.w, self.out.b] {
            self.params.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Records `Dec(Enc(x_a, h), Δr_s)` and the warp. Returns `(decoder output, x̃_b)`;
    /// the decoder output is the flow, or `x̃_b` itself when flow is ablated.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_a: NodeId,
        head: NodeId,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (n, size) = check_image(g, x_a, &self.cfg, "coarse_redirect")?;
        check_batch_shape(g, head, &[n, 1, size, size], "coarse_redirect head planes")?;
        check_batch_shape(g, cond, &[n, self.cond_channels, size, size], "coarse_redirect condition")?;
        let mut x = g.concat(&[x_a, head], 1)?;
        for conv in &self.enc {
            x = conv.apply_leaky(g, p, x)?;
        }
        let mut res = size >> self.enc.len();
        for conv in &self.dec {
            res *= 2;
            x = g.resample_nearest(x, res, res)?;
            let c = if res == size { cond } else { g.resample_nearest(cond, res, res)? };
            x = g.concat(&[x, c], 1)?;
            x = conv.apply_leaky(g, p, x)?;
        }
        x = self.full.apply_leaky(g, p, x)?;
        let raw = self.out.apply(g, p, x)?;
        let squashed = g.tanh(raw)?;
        match self.output {
            CoarseOutput::Flow { scale } => {
                let flow = g.scale(squashed, T::lit(scale))?;
                let warped = g.bilinear_warp(x_a, flow)?;
                Ok((flow, warped))
            }
            CoarseOutput::Image => Ok((squashed, squashed)),
        }
    }

    /// Inference helper: returns the flow (when predicted) and `x̃_b`.
    pub fn redirect(
        &self,
        x_a: &Tensor<T>,
        heads: &[HeadPose],
        conds: &[ConditionTensor<T>],
    ) -> Result<(Option<FlowField<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xa = g.constant(x_a.clone());
        let h = g.constant(head_planes(heads, self.cfg.image_size, self.cfg.head_scale_deg));
        let c = g.constant(stack_conditions(conds)?);
        let (flow, warped) = self.forward(&mut g, &p, xa, h, c)?;
        let flow = match self.output {
            CoarseOutput::Flow { .. } => Some(FlowField::new(g.value(flow).clone())?),
            CoarseOutput::Image => None,
        };
        Ok((flow, g.value(warped).clone()))
    }
}

/// Conditional generator `G(x̃_b, x_a, h, Δr_s)` ending in `tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineGenerator<T: Real = f32> {
    cfg: ModelConfig,
    cond_channels: usize,
    residual: bool,
    pub params: ParamStore<T>,
    blocks: Vec<Conv>,
}

/// Outputs of one refinement pass.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    /// Generator output: the residual `R`, or the final image when ablated.
    pub generated: NodeId,
    /// `x̂_b`, before any clamping.
    pub refined: NodeId,
}

impl<T: Real> RefineGenerator<T> {
    pub fn new(cfg: &ModelConfig, ablations: &Ablations) -> Self {
        let mut rng = seeded(cfg.init_seed, 2);
        let mut params = ParamStore::new();
        let cond_channels = condition_channels(!ablations.no_gazemap);
        let mut cin = 2 * cfg.image_channels + 1 + cond_channels;
        let mut blocks = Vec::new();
        for i in 0..cfg.gen_blocks {
            let last = i + 1 == cfg.gen_blocks;
            let cout = if last { cfg.image_channels } else { cfg.gen_channels };
            let gain = if last { 0.1 } else { 1.0 };
            blocks.push(Conv::new(&mut params, &mut rng, &format!("gen.conv{i}"), cin, cout, 1, gain));
            cin = cout;
        }
        RefineGenerator {
            cfg: cfg.clone(),
            cond_channels,
            residual: !ablations.no_residual,
            params,
            blocks,
        }
    }

    pub fn is_residual(&self) -> bool {
        self.residual
    }

    pub fn zero_output_layer(&mut self) {
        let last = *self.blocks.last().expect("generator has blocks");
        for i in [last.w, last.b] {
            self.params.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        coarse: NodeId,
        x_a: NodeId,
        head: NodeId,
        cond: NodeId,
    ) -> Result<Refined> {
        let (n, size) = check_image(g, coarse, &self.cfg, "refine (coarse image)")?;
        check_image(g, x_a, &self.cfg, "refine (input image)")?;
        if g.value(x_a).shape()[0] != n {
            return Err(Error::shape("refine", g.value(coarse).shape(), g.value(x_a).shape()));
        }
        check_batch_shape(g, head, &[n, 1, size, size], "refine head planes")?;
        check_batch_shape(g, cond, &[n, self.cond_channels, size, size], "refine condition")?;
        let mut x = g.concat(&[coarse, x_a, head, cond], 1)?;
        let last = self.blocks.len() - 1;
        for (i, conv) in self.blocks.iter().enumerate() {
            x = if i == last {
                conv.apply(g, p, x)?
            } else {
                conv.apply_leaky(g, p, x)?
            };
        }
        let generated = g.tanh(x)?;
        let refined = if self.residual {
            g.add(generated, coarse)?
        } else {
            generated
        };
        Ok(Refined { generated, refined })
    }

    /// Inference helper returning `(R, x̂_b)`.
    pub fn refine(
        &self,
        coarse: &Tensor<T>,
        x_a: &Tensor<T>,
        heads: &[HeadPose],
        conds: &[ConditionTensor<T>],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(coarse.clone());
        let xa = g.constant(x_a.clone());
        let h = g.constant(head_planes(heads, self.cfg.image_size, self.cfg.head_scale_deg));
        let cond = g.constant(stack_conditions(conds)?);
        let out = self.forward(&mut g, &p, c, xa, h, cond)?;
        Ok((g.value(out.generated).clone(), g.value(out.refined).clone()))
    }
}

/// Shared convolutional trunk with an adversarial head and a gaze head, each
/// two dense layers deep.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskDiscriminator<T: Real = f32> {
    cfg: ModelConfig,
    pub params: ParamStore<T>,
    trunk: Vec<Conv>,
    adv: [Dense; 2],
    gaze: [Dense; 2],
    flat: usize,
}

/// Head outputs for a batch: `[n, 1]` logits and `[n, 2]` normalized angles.
#[derive(Clone, Copy, Debug)]
pub struct Discriminated {
    pub adv_logit: NodeId,
    pub gaze: NodeId,
}

impl<T: Real> MultiTaskDiscriminator<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut rng = seeded(cfg.init_seed, 3);
        let mut params = ParamStore::new();
        let mut trunk = Vec::new();
        let mut cin = cfg.image_channels;
        for (i, &c) in cfg.disc_channels.iter().enumerate() {
            trunk.push(Conv::new(&mut params, &mut rng, &format!("disc.trunk{i}"), cin, c, 2, 1.0));
            cin = c;
        }
        let side = cfg.image_size >> cfg.disc_channels.len();
        let flat = cin * side * side;
        let h = cfg.disc_hidden;
        let adv = [
            Dense::new(&mut params, &mut rng, "disc.adv0", flat, h),
            Dense::new(&mut params, &mut rng, "disc.adv1", h, 1),
        ];
        let gaze = [
            Dense::new(&mut params, &mut rng, "disc.gaze0", flat, h),
            Dense::new(&mut params, &mut rng, "disc.gaze1", h, 2),
        ];
        MultiTaskDiscriminator {
            cfg: cfg.clone(),
            params,
            trunk,
            adv,
            gaze,
            flat,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Result<Discriminated> {
        let (n, _) = check_image(g, x, &self.cfg, "discriminate")?;
        let mut h = x;
        for conv in &self.trunk {
            h = conv.apply_leaky(g, p, h)?;
        }
        let feats = g.reshape(h, &[n, self.flat])?;
        let slope = T::lit(LEAKY_SLOPE);
        let a = self.adv[0].apply(g, p, feats)?;
        let a = g.leaky_relu(a, slope)?;
        let adv_logit = self.adv[1].apply(g, p, a)?;
        let z = self.gaze[0].apply(g, p, feats)?;
        let z = g.leaky_relu(z, slope)?;
        let gaze = self.gaze[1].apply(g, p, z)?;
        Ok(Discriminated { adv_logit, gaze })
    }

    /// Inference helper returning `(adv_logit [n,1], gaze [n,2])`.
    pub fn discriminate(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let d = self.forward(&mut g, &p, xi)?;
        Ok((g.value(d.adv_logit).clone(), g.value(d.gaze).clone()))
    }

    /// Parameter names belonging to the gaze head only.
    pub fn gaze_head_params(&self) -> Vec<&str> {
        self.params.names().iter().filter(|n| n.starts_with("disc.gaze")).map(String::as_str).collect()
    }

    pub fn trunk_params(&self) -> Vec<&str> {
        self.params.names().iter().filter(|n| n.starts_with("disc.trunk")).map(String::as_str).collect()
    }
}
