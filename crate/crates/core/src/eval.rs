//! Gaze recovery by geometric inversion, PSNR, frozen-feature distance and the
//! angle-difference grouped report.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::RedirectionPair;
use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;
use crate::networks::{CoarseModel, RefineGenerator};
use crate::npg::{iris_offset_factor, GazeAngle};
use crate::par;
use crate::tensor::{Real, Tensor};
use crate::training::assemble_batch;

/// Report groups, keyed by `|Δpitch| + |Δyaw|` in degrees.
pub const GROUPS: [u32; 10] = [0, 10, 15, 20, 25, 30, 35, 40, 45, 50];

/// Fraction of the in-disk intensity range below which a pixel counts as iris.
const DARK_FRACTION: f64 = 0.35;
/// Minimum in-disk contrast for an iris to be detectable.
const MIN_CONTRAST: f64 = 0.1;

/// Smallest group key not below `delta_sum`.
pub fn group_of(delta_sum: f64) -> Result<u32> {
    GROUPS
        .iter()
        .copied()
        .find(|&g| delta_sum <= g as f64 + 1e-9)
        .ok_or_else(|| Error::Invalid(format!("angle difference {delta_sum} exceeds the largest group")))
}

/// Inverts the gazemap geometry from an iris centroid `(row, col)`.
pub fn gaze_from_centroid(row: f64, col: f64, height: usize, width: usize) -> Result<GazeAngle> {
    let reach = 0.6 * height as f64 * iris_offset_factor();
    let st = ((height as f64 / 2.0 - row) / reach).clamp(-1.0, 1.0);
    let theta = st.asin();
    let ct = theta.cos();
    if ct < 1e-6 {
        return Err(Error::Invalid(format!(
            "recovered pitch {:.2} deg is too close to 90 deg to solve for yaw",
            theta.to_degrees()
        )));
    }
    let sp = ((width as f64 / 2.0 - col) / (reach * ct)).clamp(-1.0, 1.0);
    Ok(GazeAngle {
        pitch: theta.to_degrees(),
        yaw: sp.asin().to_degrees(),
    })
}

/// Estimates the gaze of one eye image (`[c, h, w]` or `[1, c, h, w]`) from
/// the centroid of its dark region inside the eyeball disk.
pub fn recover_gaze<T: Real>(image: &Tensor<T>) -> Result<GazeAngle> {
    let s = image.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::shape("recover_gaze", &[1, 0, 0], s)),
    };
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Invalid("recover_gaze: empty image".into()));
    }
    let plane = h * w;
    let d = image.data();
    let gray: Vec<f64> = (0..plane)
        .map(|i| (0..c).map(|ch| d[ch * plane + i].as_f64()).sum::<f64>() / c as f64)
        .collect();
    let radius = 0.6 * h as f64;
    let inside = |i: usize| {
        let (y, x) = ((i / w) as f64 + 0.5 - h as f64 / 2.0, (i % w) as f64 + 0.5 - w as f64 / 2.0);
        y * y + x * x <= radius * radius
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, &v) in gray.iter().enumerate() {
        if inside(i) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !(hi - lo >= MIN_CONTRAST) {
        return Err(Error::Invalid("recover_gaze: no detectable iris region".into()));
    }
    let thr = lo + DARK_FRACTION * (hi - lo);
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, &v) in gray.iter().enumerate() {
        if inside(i) && v <= thr {
            sy += (i / w) as f64 + 0.5;
            sx += (i % w) as f64 + 0.5;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("recover_gaze: no detectable iris region".into()));
    }
    gaze_from_centroid(sy / n as f64, sx / n as f64, h, w)
}

/// Peak signal-to-noise ratio for the `[-1, 1]` range; `+inf` for equal inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::Invalid("psnr of empty tensors".into()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (4.0 / mse).log10() })
}

/// Per-sample mean over extractor layers of `‖Φ(a) − Φ(b)‖² / (c·h·w)`.
/// Inputs are `[n, c, h, w]` batches.
pub fn feature_distance<T: Real>(extractor: &FeatureExtractor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("feature_distance", a.shape(), b.shape()));
    }
    let n = a.dims4("feature_distance")?.0;
    let fa = extractor.feature_values(a)?;
    let fb = extractor.feature_values(b)?;
    let mut out = vec![0.0; n];
    for (x, y) in fa.iter().zip(&fb) {
        let per = x.len() / n;
        for (i, o) in out.iter_mut().enumerate() {
            let d: f64 = x
                .batch_item(i)
                .iter()
                .zip(y.batch_item(i))
                .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
                .sum();
            *o += d / per as f64;
        }
    }
    let layers = fa.len() as f64;
    Ok(out.into_iter().map(|v| v / layers).collect())
}

/// Anything that maps a batch of pairs to predicted target images `[n, c, h, w]`.
pub trait Redirector: Sync {
    fn redirect(&self, pairs: &[&RedirectionPair]) -> Result<Tensor<f32>>;
}

/// Baseline that returns the source image unchanged.
pub struct CopyInput;

impl Redirector for CopyInput {
    fn redirect(&self, pairs: &[&RedirectionPair]) -> Result<Tensor<f32>> {
        Tensor::stack(&pairs.iter().map(|p| p.source.image.clone()).collect::<Vec<_>>())
    }
}

/// Intermediate images of a full redirection.
#[derive(Clone, Debug)]
pub struct Stages {
    pub coarse: Tensor<f32>,
    pub generated: Tensor<f32>,
    pub refined: Tensor<f32>,
}

/// The trained coarse-to-fine pipeline.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub coarse: CoarseModel<f32>,
    pub generator: RefineGenerator<f32>,
}

impl Pipeline {
    pub fn stages(&self, pairs: &[&RedirectionPair]) -> Result<Stages> {
        let b = assemble_batch(pairs, &self.cfg)?;
        let mut g = crate::autodiff::Graph::new();
        let pc = self.coarse.params.bind(&mut g, false);
        let pg = self.generator.params.bind(&mut g, false);
        let xa = g.constant(b.x_a);
        let h = g.constant(b.heads);
        let c = g.constant(b.cond);
        let (_, coarse) = self.coarse.forward(&mut g, &pc, xa, h, c)?;
        let r = self.generator.forward(&mut g, &pg, coarse, xa, h, c)?;
        Ok(Stages {
            coarse: g.value(coarse).clone(),
            generated: g.value(r.generated).clone(),
            refined: g.value(r.refined).clone(),
        })
    }

    /// View that evaluates only the coarse output `x̃_b`.
    pub fn coarse_only(&self) -> CoarseOnly<'_> {
        CoarseOnly(self)
    }
}

impl Redirector for Pipeline {
    fn redirect(&self, pairs: &[&RedirectionPair]) -> Result<Tensor<f32>> {
        Ok(self.stages(pairs)?.refined)
    }
}

pub struct CoarseOnly<'a>(&'a Pipeline);

impl Redirector for CoarseOnly<'_> {
    fn redirect(&self, pairs: &[&RedirectionPair]) -> Result<Tensor<f32>> {
        Ok(self.0.stages(pairs)?.coarse)
    }
}

/// Error assigned when no iris can be found in a prediction.
pub const RECOVERY_FAILURE_DEG: f64 = 90.0;

/// Metrics of one evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair: usize,
    pub group_deg: u32,
    pub source: GazeAngle,
    pub target: GazeAngle,
    pub head_yaw: f64,
    pub recovered: Option<GazeAngle>,
    pub gaze_err_deg: f64,
    pub featdist: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub group_deg: u32,
    pub gaze_err_deg: f64,
    pub featdist: f64,
    pub psnr_db: f64,
    pub count: usize,
}

/// Per-group means; groups without pairs are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub groups: Vec<GroupStats>,
    pub pairs: Vec<PairRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

impl EvalReport {
    pub fn from_pairs(pairs: Vec<PairRecord>) -> Self {
        let mut by: BTreeMap<u32, Vec<&PairRecord>> = BTreeMap::new();
        for p in &pairs {
            by.entry(p.group_deg).or_default().push(p);
        }
        let groups = by
            .into_iter()
            .map(|(g, rs)| GroupStats {
                group_deg: g,
                gaze_err_deg: mean(rs.iter().map(|r| r.gaze_err_deg)),
                featdist: mean(rs.iter().map(|r| r.featdist)),
                psnr_db: mean(rs.iter().map(|r| r.psnr_db)),
                count: rs.len(),
            })
            .collect();
        EvalReport { groups, pairs }
    }

    /// Pair-weighted mean gaze error over groups with key `>= min_group`.
    pub fn mean_gaze_error(&self, min_group: u32) -> f64 {
        mean(self.pairs.iter().filter(|p| p.group_deg >= min_group).map(|p| p.gaze_err_deg))
    }

    pub fn mean_featdist(&self) -> f64 {
        mean(self.pairs.iter().map(|p| p.featdist))
    }

    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report = dir.join("eval_report.csv");
        let err = |p: &Path, e: csv::Error| Error::Data(format!("{}: {e}", p.display()));
        let mut w = csv::Writer::from_path(&report).map_err(|e| err(&report, e))?;
        w.write_record(["group_deg", "gaze_err_deg", "featdist", "psnr_db", "count"])
            .map_err(|e| err(&report, e))?;
        for g in &self.groups {
            w.write_record([
                g.group_deg.to_string(),
                fmt_f64(g.gaze_err_deg),
                fmt_f64(g.featdist),
                fmt_f64(g.psnr_db),
                g.count.to_string(),
            ])
            .map_err(|e| err(&report, e))?;
        }
        w.flush().map_err(|e| Error::io(&report, e))?;
        let raw = dir.join("eval_raw.csv");
        let mut w = csv::Writer::from_path(&raw).map_err(|e| err(&raw, e))?;
        w.write_record([
            "pair",
            "group_deg",
            "source_pitch",
            "source_yaw",
            "target_pitch",
            "target_yaw",
            "head_yaw",
            "recovered_pitch",
            "recovered_yaw",
            "gaze_err_deg",
            "featdist",
            "psnr_db",
        ])
        .map_err(|e| err(&raw, e))?;
        for p in &self.pairs {
            let (rp, ry) = p.recovered.map_or((f64::NAN, f64::NAN), |g| (g.pitch, g.yaw));
            w.write_record([
                p.pair.to_string(),
                p.group_deg.to_string(),
                fmt_f64(p.source.pitch),
                fmt_f64(p.source.yaw),
                fmt_f64(p.target.pitch),
                fmt_f64(p.target.yaw),
                fmt_f64(p.head_yaw),
                fmt_f64(rp),
                fmt_f64(ry),
                fmt_f64(p.gaze_err_deg),
                fmt_f64(p.featdist),
                fmt_f64(p.psnr_db),
            ])
            .map_err(|e| err(&raw, e))?;
        }
        w.flush().map_err(|e| Error::io(&raw, e))
    }
}

/// Full-precision text; infinities print as `inf`, missing values as `nan`.
fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

const EVAL_CHUNK: usize = 16;

/// Redirects every pair and aggregates metrics per angle-difference group.
pub fn evaluate(model: &dyn Redirector, pairs: &[RedirectionPair], extractor: &FeatureExtractor<f32>) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Invalid("evaluate: no pairs".into()));
    }
    let chunks = pairs.len().div_ceil(EVAL_CHUNK);
    let results = par::map_indexed(chunks, |ci| -> Result<Vec<PairRecord>> {
        let start = ci * EVAL_CHUNK;
        let chunk: Vec<&RedirectionPair> = pairs[start..(start + EVAL_CHUNK).min(pairs.len())].iter().collect();
        let pred = model.redirect(&chunk)?;
        let target = Tensor::stack(&chunk.iter().map(|p| p.target.image.clone()).collect::<Vec<_>>())?;
        if pred.shape() != target.shape() {
            return Err(Error::shape("evaluate", target.shape(), pred.shape()));
        }
        let fd = feature_distance(extractor, &pred, &target)?;
        let per = pred.len() / chunk.len();
        chunk
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let shape = &pred.shape()[1..];
                let img = Tensor::new(shape, pred.batch_item(i).to_vec())?;
                let tgt = Tensor::new(shape, target.data()[i * per..(i + 1) * per].to_vec())?;
                let recovered = recover_gaze(&img).ok();
                Ok(PairRecord {
                    pair: start + i,
                    group_deg: group_of(p.angle_difference())?,
                    source: p.source.gaze,
                    target: p.target.gaze,
                    head_yaw: p.source.head.yaw,
                    recovered,
                    gaze_err_deg: recovered.map_or(RECOVERY_FAILURE_DEG, |g| g.angular_error(&p.target.gaze)),
                    featdist: fd[i],
                    psnr_db: psnr(&img, &tgt)?,
                })
            })
            .collect()
    });
    let mut records = Vec::with_capacity(pairs.len());
    for r in results {
        records.extend(r?);
    }
    Ok(EvalReport::from_pairs(records))
}
