//! Run configuration: one TOML file holding every size, rate, weight and seed.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square image extent; must be divisible by 2^(encoder depth).
    pub image_size: usize,
    pub image_channels: usize,
    pub enc_channels: Vec<usize>,
    pub gen_channels: usize,
    /// Convolution blocks in the refinement generator, output layer included.
    pub gen_blocks: usize,
    pub disc_channels: Vec<usize>,
    pub disc_hidden: usize,
    /// Flow bound as a fraction of the image extent.
    pub flow_scale_frac: f64,
    pub angle_scale_deg: f64,
    pub head_scale_deg: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            image_channels: 1,
            enc_channels: vec![32, 64, 128, 128],
            gen_channels: 32,
            gen_blocks: 5,
            disc_channels: vec![32, 64, 128, 128],
            disc_hidden: 64,
            flow_scale_frac: 0.25,
            angle_scale_deg: 30.0,
            head_scale_deg: 30.0,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn flow_scale(&self) -> f64 {
        self.flow_scale_frac * self.image_size as f64
    }
}

/// Ablation switches; all off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// λ3 forced to 0.
    pub no_perceptual: bool,
    /// Generator output is the final image instead of a residual.
    pub no_residual: bool,
    /// Decoder emits the coarse image directly instead of a flow field.
    pub no_flow: bool,
    /// Condition keeps only the numeric angle planes.
    pub no_gazemap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub extractor_seed: u64,
    pub extractor_channels: Vec<usize>,
    /// Tap layers (1-based) whose Gram matrices enter the style term.
    pub gram_layers: Vec<usize>,
    /// Tap layer (1-based) for the feature-content term.
    pub content_layer: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 5.0,
            lambda2: 0.1,
            lambda3: 100.0,
            lambda4: 10.0,
            extractor_seed: 1234,
            extractor_channels: vec![8, 16, 16, 32, 32],
            gram_layers: vec![1, 2, 3, 4],
            content_layer: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_coarse: f64,
    pub lr_gan: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub coarse_iters: usize,
    pub fine_iters: usize,
    /// Fine-stage iteration after which the GAN rate decays linearly to 0.
    pub decay_start_iter: usize,
    pub seed: u64,
    /// Check `x̂ = R + x̃` every this many fine iterations (0 = never).
    pub residual_check_every: usize,
    /// Write a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: usize,
    pub ablations: Ablations,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr_coarse: 1e-4,
            lr_gan: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            coarse_iters: 3000,
            fine_iters: 3000,
            decay_start_iter: 2000,
            seed: 42,
            residual_check_every: 100,
            checkpoint_every: 0,
            ablations: Ablations::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `labels.csv`; synthetic pairs are generated when unset.
    pub root: Option<PathBuf>,
    pub labels_file: String,
    pub pair_count: usize,
    pub seed: u64,
    pub pitch_grid: Vec<f64>,
    pub yaw_grid: Vec<f64>,
    pub head_grid: Vec<f64>,
    pub subjects: usize,
    pub test_subjects: Vec<String>,
    /// Reject images whose extent differs from the model size.
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            labels_file: "labels.csv".into(),
            pair_count: 2000,
            seed: 2024,
            pitch_grid: vec![-10.0, 0.0, 10.0],
            yaw_grid: vec![-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0],
            head_grid: vec![-30.0, -15.0, 0.0, 15.0, 30.0],
            subjects: 56,
            test_subjects: (51..=56).map(|i| format!("s{i:02}")).collect(),
            strict: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the resolved config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let l = &self.loss;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.enc_channels.is_empty() || m.disc_channels.is_empty() {
            return bad("encoder and discriminator need at least one block".into());
        }
        for (name, depth) in [("encoder", m.enc_channels.len()), ("discriminator", m.disc_channels.len())] {
            let f = 1usize << depth;
            if m.image_size % f != 0 || m.image_size < f {
                return bad(format!("image_size {} not divisible by 2^{depth} ({name} depth)", m.image_size));
            }
        }
        if m.image_size < crate::npg::MIN_EXTENT {
            return bad(format!("image_size {} below {}", m.image_size, crate::npg::MIN_EXTENT));
        }
        if m.image_channels == 0 || m.gen_channels == 0 || m.gen_blocks < 2 || m.disc_hidden == 0 {
            return bad("model widths must be positive and gen_blocks >= 2".into());
        }
        if !(m.flow_scale_frac > 0.0) || !(m.angle_scale_deg > 0.0) || !(m.head_scale_deg > 0.0) {
            return bad("flow/angle/head scales must be positive".into());
        }
        for (name, v) in [("lambda1", l.lambda1), ("lambda2", l.lambda2), ("lambda3", l.lambda3), ("lambda4", l.lambda4)] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be a non-negative number"));
            }
        }
        let taps = l.extractor_channels.len();
        if taps == 0 || l.content_layer == 0 || l.content_layer > taps || l.gram_layers.iter().any(|&j| j == 0 || j > taps) {
            return bad(format!("extractor tap layers must lie in 1..={taps}"));
        }
        if t.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, v) in [("lr_coarse", t.lr_coarse), ("lr_gan", t.lr_gan), ("eps", t.eps)] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if t.decay_start_iter > t.fine_iters {
            return bad(format!(
                "decay_start_iter {} exceeds fine_iters {}",
                t.decay_start_iter, t.fine_iters
            ));
        }
        let d = &self.data;
        if d.pitch_grid.is_empty() || d.yaw_grid.is_empty() || d.head_grid.is_empty() || d.subjects == 0 {
            return bad("angle grids and subject count must be non-empty".into());
        }
        Ok(())
    }

    /// Configuration used by the `--preset smoke` runs and tests: tiny networks,
    /// few iterations.
    pub fn smoke() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.image_size = 16;
        cfg.model.enc_channels = vec![4, 8];
        cfg.model.disc_channels = vec![4, 8];
        cfg.model.gen_channels = 4;
        cfg.model.gen_blocks = 3;
        cfg.model.disc_hidden = 8;
        cfg.model.flow_scale_frac = 0.25;
        cfg.loss.extractor_channels = vec![4, 4, 4, 4, 4];
        cfg.train.batch_size = 2;
        cfg.train.coarse_iters = 4;
        cfg.train.fine_iters = 4;
        cfg.train.decay_start_iter = 2;
        cfg.train.residual_check_every = 1;
        cfg.data.pair_count = 24;
        cfg.data.subjects = 8;
        cfg.data.test_subjects = vec!["s08".into()];
        cfg
    }
}
