//! `mgl {synth|train|eval|infer|gradcheck}`.
//!
//! Settings resolve as defaults, then `--config` file, then `--set key=value`,
//! then dedicated flags. The effective configuration is echoed to stderr.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autograd::Real;
use crate::checkpoint::{trainer_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{MglError, Result};
use crate::exec::{init_thread_pool, Execution};
use crate::gradcheck::{self, GradcheckConfig};
use crate::metrics::{self, EvalReport};
use crate::network::{MglModel, Variant};
use crate::pnm::{self, Pnm};
use crate::synth::{generate_scene, SceneSample};
use crate::train::Trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mgl", version, about = "Mutual graph learning for camouflaged object detection")]
struct Cli {
    /// `key = value` file applied over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run on one thread regardless of MGL_THREADS.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train and test scenes under the data directory.
    Synth(SynthArgs),
    /// Train and write a checkpoint plus an `iter,loss,lr` CSV.
    Train(TrainArgs),
    /// Report MAE of C and ODS/OIS of E on a split.
    Eval(EvalArgs),
    /// Write C.pgm and E.pgm for one PPM image.
    Infer(InferArgs),
    /// Finite-difference check of every module in double precision.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Square image side.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Recurrent stages.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    stop_at: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// baseline, rigr or full.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from a training checkpoint; the CSV is appended to.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split directory; defaults to `<data_dir>/test`.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    image: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Restrict to the named modules.
    #[arg(long)]
    module: Vec<String>,
    /// Sample at most this many coordinates per tensor instead of all.
    #[arg(long)]
    coords: Option<usize>,
}

pub fn exit_code(e: &MglError) -> i32 {
    match e {
        MglError::NonFinite { .. } | MglError::Invariant(_) => EXIT_NUMERIC,
        MglError::Io { .. } | MglError::Image { .. } | MglError::Checkpoint(_) => EXIT_IO,
        MglError::Shape(_) | MglError::Config(_) | MglError::Data(_) => EXIT_USAGE,
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_thread_pool(None);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| MglError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    match &cli.command {
        Command::Synth(a) => {
            set_opt(&mut cfg.train_count, a.train);
            set_opt(&mut cfg.test_count, a.test);
            if let Some(s) = a.size {
                cfg.height = s;
                cfg.width = s;
            }
            set_opt(&mut cfg.kappa, a.kappa);
            set_opt(&mut cfg.data_dir, a.data.clone());
        }
        Command::Train(a) => {
            set_opt(&mut cfg.stages, a.t);
            set_opt(&mut cfg.max_iter, a.iters);
            set_opt(&mut cfg.stop_iter, a.stop_at);
            set_opt(&mut cfg.base_lr, a.lr);
            set_opt(&mut cfg.batch, a.batch);
            if let Some(v) = &a.variant {
                cfg.variant = Variant::parse(v)?;
            }
            set_opt(&mut cfg.data_dir, a.data.clone());
            set_opt(&mut cfg.checkpoint, a.checkpoint.clone());
            set_opt(&mut cfg.log, a.log.clone());
        }
        Command::Eval(a) => set_opt(&mut cfg.checkpoint, a.checkpoint.clone()),
        Command::Infer(a) => {
            set_opt(&mut cfg.checkpoint, a.checkpoint.clone());
            set_opt(&mut cfg.out_dir, a.out.clone());
        }
        Command::Gradcheck(_) => {}
    }
    set_opt(&mut cfg.seed, cli.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn set_opt<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<i32> {
    let cfg = resolve(&cli)?;
    eprint!("# effective configuration\n{}", cfg.to_text());
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg, exec).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&cfg, a.resume.as_deref(), exec).map(|_| EXIT_OK),
        Command::Eval(a) => {
            let split = a.split.clone().unwrap_or_else(|| cfg.test_dir());
            let report = cmd_eval(&cfg.checkpoint, &split, exec)?;
            print!("{}", report.lines());
            Ok(EXIT_OK)
        }
        Command::Infer(a) => cmd_infer(&cfg.checkpoint, &a.image, &cfg.out_dir, exec).map(|_| EXIT_OK),
        Command::Gradcheck(a) => {
            let gc = GradcheckConfig {
                seed: cfg.seed,
                coords_per_tensor: a.coords.unwrap_or(GradcheckConfig::default().coords_per_tensor),
                ..GradcheckConfig::default()
            };
            let names: Vec<&str> = if a.module.is_empty() {
                gradcheck::MODULES.to_vec()
            } else {
                a.module.iter().map(String::as_str).collect()
            };
            let mut ok = true;
            for m in names {
                let r = gradcheck::run_module(m, &gc, exec)?;
                println!("{}", r.line());
                ok &= r.passed;
            }
            Ok(if ok { EXIT_OK } else { EXIT_FAIL })
        }
    }
}

/// Seed of sample `i` in a split; train and test never collide.
pub fn sample_seed(base: u64, test: bool, i: usize) -> u64 {
    base.wrapping_mul(1 << 21)
        .wrapping_add(if test { 1 << 20 } else { 0 })
        .wrapping_add(i as u64)
}

pub fn cmd_synth(cfg: &RunConfig, exec: Execution) -> Result<()> {
    if cfg.train_count == 0 {
        return Err(MglError::Config("the train split needs at least one sample".into()));
    }
    if cfg.train_count.max(cfg.test_count) >= 1 << 20 {
        return Err(MglError::Config("at most 2^20 - 1 samples per split".into()));
    }
    let scene = cfg.scene();
    for (split, count, test) in [("train", cfg.train_count, false), ("test", cfg.test_count, true)] {
        let dir = cfg.data_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| MglError::io(&dir, e))?;
        let samples = exec.map(count, |i| generate_scene(&scene, sample_seed(cfg.seed, test, i)));
        for s in samples {
            pnm::write_sample(&s?, &dir)?;
        }
        println!("{split}\t{count}");
    }
    Ok(())
}

fn samples_in(dir: &Path) -> Result<Vec<SceneSample>> {
    let v = pnm::read_split(dir)?;
    if v.is_empty() {
        return Err(MglError::Data(format!("split {} holds no samples", dir.display())));
    }
    Ok(v)
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, exec: Execution) -> Result<Trainer<f32>> {
    let data: Vec<_> = samples_in(&cfg.train_dir())?.iter().map(|s| s.to_sample::<f32>()).collect();
    let mut trainer = match resume {
        Some(p) => {
            let tr = Checkpoint::load(p)?.trainer(cfg.train())?;
            if tr.model.config != cfg.model() {
                return Err(MglError::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            tr
        }
        None => Trainer::new(MglModel::new(cfg.model(), cfg.seed)?, cfg.train()),
    };
    let stop = if cfg.stop_iter == 0 { cfg.max_iter } else { cfg.stop_iter };
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&cfg.log)
        .map_err(|e| MglError::io(&cfg.log, e))?;
    let io = |e| MglError::io(&cfg.log, e);
    if resume.is_none() {
        writeln!(log, "iter,loss,lr").map_err(io)?;
    }
    let start = trainer.iter;
    let mut first = None;
    let mut last = f64::NAN;
    while trainer.iter < stop {
        let r = trainer.step(&data, exec)?;
        writeln!(log, "{},{:?},{:?}", r.iter, r.loss, r.lr).map_err(io)?;
        first.get_or_insert(r.loss);
        last = r.loss;
    }
    trainer_checkpoint(&trainer).save(&cfg.checkpoint)?;
    eprintln!(
        "trained iterations {start}..{} (loss {:.6} -> {last:.6}); checkpoint {}",
        trainer.iter,
        first.unwrap_or(f64::NAN),
        cfg.checkpoint.display()
    );
    Ok(trainer)
}

/// Per-image MAE of C averaged over the split, and ODS/OIS of E.
pub fn evaluate<T: Real>(model: &MglModel<T>, samples: &[SceneSample], exec: Execution) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(MglError::Data("cannot evaluate an empty split".into()));
    }
    let preds = exec.map(samples.len(), |i| model.predict(&samples[i].image_tensor(), Execution::Sequential));
    let mut mae = 0.0;
    let mut edges = Vec::with_capacity(samples.len());
    for (p, s) in preds.into_iter().zip(samples) {
        let (c, e) = p?;
        mae += metrics::mae(&c.to_f64_vec(), &s.mask)?;
        edges.push(e.to_f64_vec());
    }
    let gts: Vec<Vec<u8>> = samples.iter().map(|s| s.edge.clone()).collect();
    Ok(EvalReport {
        images: samples.len(),
        mae: mae / samples.len() as f64,
        edges: metrics::ods_ois(&edges, &gts, exec)?,
    })
}

pub fn cmd_eval(checkpoint: &Path, split: &Path, exec: Execution) -> Result<EvalReport> {
    let model = load_model(checkpoint)?;
    evaluate(&model, &samples_in(split)?, exec)
}

fn load_model(path: &Path) -> Result<MglModel<f32>> {
    if !path.exists() {
        return Err(MglError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    Checkpoint::load(path)?.model()
}

/// Probability in `[0,1]` to an 8-bit level.
pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn cmd_infer(checkpoint: &Path, image: &Path, out: &Path, exec: Execution) -> Result<[PathBuf; 2]> {
    let model = load_model(checkpoint)?;
    let img = pnm::read(image)?;
    if img.channels != 3 {
        return Err(MglError::Image {
            path: image.to_path_buf(),
            reason: "expected a colour (P6) image".into(),
        });
    }
    if img.width % 4 != 0 || img.height % 4 != 0 {
        return Err(MglError::Image {
            path: image.to_path_buf(),
            reason: format!("{}×{} is not a multiple of 4 in both axes", img.width, img.height),
        });
    }
    let scene = SceneSample {
        height: img.height,
        width: img.width,
        image: img.data,
        mask: Vec::new(),
        edge: Vec::new(),
        seed: 0,
    };
    let (c, e) = model.predict(&scene.image_tensor(), exec)?;
    fs::create_dir_all(out).map_err(|e| MglError::io(out, e))?;
    let paths = [out.join("C.pgm"), out.join("E.pgm")];
    for (map, path) in [c, e].iter().zip(&paths) {
        pnm::write(
            path,
            &Pnm {
                width: img.width,
                height: img.height,
                channels: 1,
                data: map.data().iter().map(|v| quantize(v.as_f64())).collect(),
            },
        )?;
    }
    Ok(paths)
}
