use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use gaze_redirect::config::RunConfig;
use gaze_redirect::data::image_io::{read_png, write_rgb8};
use gaze_redirect::data::{
    build_corpus, load_checkpoint, make_pair_dataset, read_labels, save_checkpoint, unit_to_pixel, write_labels, AngleGrid,
    EyeSample, EyeSide, RedirectionPair,
};
use gaze_redirect::eval::{evaluate, CopyInput, Pipeline};
use gaze_redirect::gradcheck;
use gaze_redirect::npg::{rasterize_gazemap, GazeAngle, HeadPose};
use gaze_redirect::training::{coarse_model_from_checkpoint, write_trace, CoarseTrainer, FineTrainer, ResidualCheck};
use gaze_redirect::{Error, Tensor};

/// Environment variable controlling log verbosity (`error` … `trace`).
const LOG_ENV: &str = "GAZE_REDIRECT_LOG";

#[derive(Parser)]
#[command(name = "gaze-redirect", version, about = "Coarse-to-fine gaze redirection on synthetic and labelled eye patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Smoke,
}

#[derive(Subcommand)]
enum Command {
    /// Write a gazemap as an RGB PNG (red = eyeball, green = iris).
    Gazemap {
        #[arg(long, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long, allow_hyphen_values = true)]
        yaw: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic corpus of redirection pairs as PNGs plus labels.csv.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// Write a configuration file.
    InitConfig {
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the flow encoder-decoder.
    TrainCoarse {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a coarse checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the generator and discriminator against a frozen coarse model.
    TrainFine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        coarse_ckpt: PathBuf,
        /// Continue from a fine checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Redirect one eye image and write [coarse | residual | refined] side by side.
    Redirect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Labels file holding the input's gaze and head pose.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        source_pitch: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        source_yaw: Option<f64>,
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        head_yaw: f64,
        #[arg(long, allow_hyphen_values = true)]
        target_pitch: f64,
        #[arg(long, allow_hyphen_values = true)]
        target_yaw: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a fine checkpoint per angle-difference group.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory with labels.csv; the synthetic corpus of the checkpoint's
        /// config is used when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for eval_report.csv and eval_raw.csv.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gazemap { pitch, yaw, size, out } => gazemap(pitch, yaw, size, &out),
        Command::Synth {
            count,
            seed,
            out_dir,
            size,
            channels,
        } => synth(count, seed, &out_dir, size, channels),
        Command::InitConfig { preset, out } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Smoke => RunConfig::smoke(),
            };
            std::fs::write(&out, cfg.to_toml()).with_context(|| format!("writing {}", out.display()))
        }
        Command::TrainCoarse { config, resume } => train_coarse(&config, resume.as_deref()),
        Command::TrainFine {
            config,
            coarse_ckpt,
            resume,
        } => train_fine(&config, &coarse_ckpt, resume.as_deref()),
        Command::Redirect {
            ckpt,
            input,
            labels,
            source_pitch,
            source_yaw,
            head_yaw,
            target_pitch,
            target_yaw,
            out,
        } => {
            let source = match (labels, source_pitch, source_yaw) {
                (Some(l), _, _) => source_from_labels(&l, &input)?,
                (None, Some(p), Some(y)) => (GazeAngle::new(p, y)?, HeadPose::new(head_yaw)?),
                _ => bail!("redirect needs --labels or both --source-pitch and --source-yaw"),
            };
            redirect(&ckpt, &input, source, GazeAngle::new(target_pitch, target_yaw)?, &out)
        }
        Command::Eval { ckpt, data, report } => eval(&ckpt, data.as_deref(), &report),
        Command::Gradcheck { seeds } => run_gradcheck(seeds),
    }
}

fn gazemap(pitch: f64, yaw: f64, size: usize, out: &Path) -> Result<()> {
    let map = rasterize_gazemap::<f32>(GazeAngle::new(pitch, yaw)?, size, size)?;
    let mut raw = vec![0u8; 3 * size * size];
    for (i, (e, r)) in map.eyeball().iter().zip(map.iris()).enumerate() {
        raw[3 * i] = if *e > 0.0 { 255 } else { 0 };
        raw[3 * i + 1] = if *r > 0.0 { 255 } else { 0 };
    }
    write_rgb8(out, size, size, raw)?;
    if let Some((row, col)) = map.iris_centroid() {
        info!("iris centroid at row {row:.3}, column {col:.3}");
    }
    Ok(())
}

fn synth(count: usize, seed: u64, out_dir: &Path, size: usize, channels: usize) -> Result<()> {
    let pairs = make_pair_dataset(count, seed, &AngleGrid::default(), size, channels)?;
    let samples: Vec<EyeSample> = pairs.into_iter().flat_map(|p| [p.source, p.target]).collect();
    write_labels(out_dir, "labels.csv", &samples)?;
    info!("wrote {} samples to {}", samples.len(), out_dir.display());
    println!("{}", out_dir.join("labels.csv").display());
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out_dir>/run-<unix seconds>-<config hash>` and records the config.
fn run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = cfg.paths.out_dir.join(format!("run-{secs}-{}", cfg.hash()));
    let mut dir = base.clone();
    let mut k = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{k}", base.display()));
        k += 1;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = cfg.to_toml();
    std::fs::write(dir.join("config.toml"), &text)?;
    info!("run directory {}", dir.display());
    info!("resolved config:\n{text}");
    Ok(dir)
}

fn train_coarse(config: &Path, resume: Option<&Path>) -> Result<()> {
    let (mut trainer, cfg) = match resume {
        Some(ckpt) => {
            let c = load_checkpoint(ckpt)?;
            let t = CoarseTrainer::from_checkpoint(&c)?;
            let cfg = t.config().clone();
            if load_config(config)? != cfg {
                warn!("--config differs from the checkpoint; continuing with the checkpoint's config");
            }
            (t, cfg)
        }
        None => {
            let cfg = load_config(config)?;
            (CoarseTrainer::new(&cfg)?, cfg)
        }
    };
    let dir = run_dir(&cfg)?;
    let (train, _) = build_corpus(&cfg)?;
    info!("coarse stage: {} training pairs, iterations {}..{}", train.len(), trainer.iteration(), cfg.train.coarse_iters);
    let every = cfg.train.checkpoint_every;
    let ckpt_path = dir.join("coarse.ckpt");
    while trainer.iteration() < cfg.train.coarse_iters {
        if let Err(e) = trainer.step(&train) {
            save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
            write_trace(&dir.join("trace_coarse.csv"), trainer.trace())?;
            return Err(e).context(format!("last good state kept in {}", ckpt_path.display()));
        }
        let it = trainer.iteration();
        if it % 100 == 0 {
            info!("iter {it}: recon {:.5}", trainer.trace().last().map_or(f64::NAN, |r| r.value));
        }
        if every > 0 && it % every == 0 {
            save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        }
    }
    save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
    write_trace(&dir.join("trace_coarse.csv"), trainer.trace())?;
    println!("{}", ckpt_path.display());
    Ok(())
}

fn write_residual_checks(path: &Path, checks: &[ResidualCheck]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "elements", "mismatches"])?;
    for c in checks {
        w.write_record([c.iter.to_string(), c.elements.to_string(), c.mismatches.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn train_fine(config: &Path, coarse_ckpt: &Path, resume: Option<&Path>) -> Result<()> {
    let coarse_ck = load_checkpoint(coarse_ckpt)?;
    let coarse = coarse_model_from_checkpoint(&coarse_ck)?;
    let (mut trainer, cfg) = match resume {
        Some(ckpt) => {
            let t = FineTrainer::from_checkpoint(&load_checkpoint(ckpt)?)?;
            if t.coarse().params != coarse.params {
                bail!("{} does not hold the coarse model of {}", coarse_ckpt.display(), ckpt.display());
            }
            let cfg = t.config().clone();
            (t, cfg)
        }
        None => {
            let cfg = load_config(config)?;
            (FineTrainer::new(&cfg, coarse)?, cfg)
        }
    };
    let dir = run_dir(&cfg)?;
    let before = trainer.coarse().params.checksum();
    let (train, _) = build_corpus(&cfg)?;
    info!("fine stage: {} training pairs, iterations {}..{}", train.len(), trainer.iteration(), cfg.train.fine_iters);
    let every = cfg.train.checkpoint_every;
    let ckpt_path = dir.join("fine.ckpt");
    let finish = |t: &FineTrainer| -> Result<()> {
        save_checkpoint(&ckpt_path, &t.checkpoint())?;
        write_trace(&dir.join("trace_fine.csv"), t.trace())?;
        write_residual_checks(&dir.join("residual_checks.csv"), t.residual_checks())
    };
    while trainer.iteration() < cfg.train.fine_iters {
        if let Err(e) = trainer.step(&train) {
            finish(&trainer)?;
            return Err(e).context(format!("last good state kept in {}", ckpt_path.display()));
        }
        let it = trainer.iteration();
        if it % 100 == 0 {
            let last: Vec<String> = trainer.trace()[trainer.trace().len() - 8..]
                .iter()
                .map(|r| format!("{} {:.4}", r.name, r.value))
                .collect();
            info!("iter {it}: {}", last.join(", "));
        }
        if every > 0 && it % every == 0 {
            save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        }
    }
    if trainer.coarse().params.checksum() != before {
        bail!("coarse parameters changed during the fine stage");
    }
    finish(&trainer)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

fn source_from_labels(labels: &Path, input: &Path) -> Result<(GazeAngle, HeadPose)> {
    let root = labels.parent().unwrap_or(Path::new("."));
    let want = input.canonicalize().with_context(|| format!("{} not found", input.display()))?;
    for row in read_labels(labels)? {
        if root.join(&row.path).canonicalize().ok().as_deref() == Some(want.as_path()) {
            return Ok((row.gaze, row.head));
        }
    }
    bail!("{} has no row for {}", labels.display(), input.display())
}

fn pipeline_from(ckpt: &Path) -> Result<Pipeline> {
    let c = load_checkpoint(ckpt)?;
    if c.meta.stage != "fine" {
        bail!("{} is a {} checkpoint; a fine checkpoint is required", ckpt.display(), c.meta.stage);
    }
    let t = FineTrainer::from_checkpoint(&c)?;
    Ok(Pipeline {
        cfg: t.config().clone(),
        coarse: t.coarse().clone(),
        generator: t.generator.clone(),
    })
}

fn redirect(ckpt: &Path, input: &Path, source: (GazeAngle, HeadPose), target: GazeAngle, out: &Path) -> Result<()> {
    let p = pipeline_from(ckpt)?;
    let (size, channels) = (p.cfg.model.image_size, p.cfg.model.image_channels);
    let image = read_png(input, channels)?;
    if image.shape() != [channels, size, size] {
        bail!("{} is {:?}, the model expects {:?}", input.display(), image.shape(), [channels, size, size]);
    }
    let sample = |gaze| EyeSample {
        image: image.clone(),
        gaze,
        head: source.1,
        subject_id: "input".into(),
        eye_side: EyeSide::Left,
    };
    let pair = RedirectionPair::new(sample(source.0), sample(target))?;
    let s = p.stages(&[&pair])?;
    let residual_px = |v: f32| ((v as f64 + 2.0) / 4.0 * 255.0).round().clamp(0.0, 255.0) as u8;
    let panels: [(&Tensor<f32>, &dyn Fn(f32) -> u8); 3] = [
        (&s.coarse, &|v| unit_to_pixel(v)),
        (&s.generated, &residual_px),
        (&s.refined, &|v| unit_to_pixel(v)),
    ];
    let width = 3 * size;
    let mut raw = vec![0u8; 3 * width * size];
    let plane = size * size;
    for (k, (t, to_px)) in panels.iter().enumerate() {
        let d = t.data();
        for r in 0..size {
            for c in 0..size {
                for ch in 0..3 {
                    let src = if channels == 3 { ch } else { 0 };
                    raw[3 * (r * width + k * size + c) + ch] = to_px(d[src * plane + r * size + c]);
                }
            }
        }
    }
    write_rgb8(out, width, size, raw)?;
    info!("wrote coarse | residual | refined panels to {}", out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: Option<&Path>, report: &Path) -> Result<()> {
    let p = pipeline_from(ckpt)?;
    let mut cfg = p.cfg.clone();
    if let Some(dir) = data {
        if !dir.join(&cfg.data.labels_file).is_file() {
            return Err(Error::Data(format!("{} not found", dir.join(&cfg.data.labels_file).display())).into());
        }
        cfg.data.root = Some(dir.to_path_buf());
        cfg.data.strict = false;
    }
    let (_, test) = build_corpus(&cfg)?;
    if test.is_empty() {
        bail!("no test pairs: none of the test subjects {:?} occur in the data", cfg.data.test_subjects);
    }
    let extractor = gaze_redirect::losses::FeatureExtractor::new(&cfg.loss, cfg.model.image_channels, cfg.model.image_size)?;
    let model = evaluate(&p, &test, &extractor)?;
    let baseline = evaluate(&CopyInput, &test, &extractor)?;
    model.write_csv(report)?;
    baseline.write_csv(&report.join("copy_input"))?;
    println!("group_deg  gaze_err_deg  copy_input  featdist  psnr_db  count");
    for (g, b) in model.groups.iter().zip(&baseline.groups) {
        println!(
            "{:>9}  {:>12.3}  {:>10.3}  {:>8.5}  {:>7.2}  {:>5}",
            g.group_deg, g.gaze_err_deg, b.gaze_err_deg, g.featdist, g.psnr_db, g.count
        );
    }
    Ok(())
}

fn run_gradcheck(seeds: usize) -> Result<()> {
    let report = gradcheck::run_suite(seeds)?;
    for c in &report.cases {
        println!(
            "{} {:<20} worst relative error {:.3e} (seed {}) over {} seeds",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.worst_seed,
            c.seeds
        );
    }
    println!("elapsed {:.1}s", report.elapsed.as_secs_f64());
    if !report.passed() {
        bail!("gradient check failed (tolerance {:e})", gradcheck::TOLERANCE);
    }
    Ok(())
}
