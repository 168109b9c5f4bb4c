use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use hazeforge_core::gradsuite::{self, Group};
use hazeforge_core::io::csv::{eval_csv, fmt_g, trace_row, TRACE_HEADER};
use hazeforge_core::io::ppm::{gray_to_rgb, min_max_normalize, read_ppm, write_ppm};
use hazeforge_core::io::parse_config;
use hazeforge_core::synth::Dataset;
use hazeforge_core::train::{evaluate, load_model, Checkpoint, TrainConfig, Trainer};
use hazeforge_core::{Error, Tensor};

use crate::ConfigArg;

pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or an unusable combination of them (exit 1).
    Usage(String),
    /// Everything the core library reports (exit 2, or 3 for numeric failures).
    Core(Error),
    /// A gradient check above tolerance (exit 3).
    GradCheck(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::NonFinite(_) | Error::DivisionByZero { .. }) => 3,
            Failure::Core(_) => 2,
            Failure::GradCheck(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

/// Attach the path to I/O errors, which otherwise do not name the file.
fn at<T>(path: &Path, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|e| match e {
        Error::Io(io) => Failure::Core(Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))),
        other => Failure::Core(other),
    })
}

fn io_at<T>(path: &Path, r: std::io::Result<T>) -> Result<T, Failure> {
    at(path, r.map_err(Error::from))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Eval,
}

fn load_config(arg: &ConfigArg) -> Result<TrainConfig, Failure> {
    match &arg.config {
        None => Ok(TrainConfig::default()),
        Some(path) => {
            let text = io_at(path, fs::read_to_string(path))?;
            at(path, parse_config(&text))
        }
    }
}

/// An explicit config wins; otherwise the one echoed into the checkpoint.
fn config_for(arg: &ConfigArg, ckpt: &Checkpoint) -> Result<TrainConfig, Failure> {
    if arg.config.is_some() {
        load_config(arg)
    } else {
        Ok(parse_config(&ckpt.config)?)
    }
}

fn dataset(cfg: &TrainConfig, split: Split) -> Result<Dataset, Failure> {
    let spec = match split {
        Split::Train => cfg.train_spec(),
        Split::Eval => cfg.eval_spec(),
    };
    if spec.count == 0 {
        return Err(Failure::Usage(format!("the {split:?} split is empty (count 0)").to_lowercase()));
    }
    Ok(Dataset::generate(&spec)?)
}

fn require_ppm(path: &Path) -> Outcome {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => Ok(()),
        _ => Err(Failure::Usage(format!("{}: images must have a .ppm extension", path.display()))),
    }
}

fn save_ppm(path: &Path, img: &Tensor<f32>) -> Outcome {
    require_ppm(path)?;
    at(path, write_ppm(path, img))
}

pub fn synth(arg: &ConfigArg, out: Option<PathBuf>, split: Split) -> Outcome {
    let cfg = load_config(arg)?;
    cfg.validate()?;
    let data = dataset(&cfg, split)?;
    let out = out.unwrap_or_else(|| cfg.out_dir.join("samples"));
    io_at(&out, fs::create_dir_all(&out))?;
    let mut table = String::from("index,airlight,gamma\n");
    for (i, s) in data.samples.iter().enumerate() {
        let name = |kind: &str| out.join(format!("{i:03}_{kind}.ppm"));
        save_ppm(&name("hazy"), &s.hazy)?;
        save_ppm(&name("clean"), &s.clean)?;
        save_ppm(&name("depth"), &gray_to_rgb(&min_max_normalize(s.depth.tensor()))?)?;
        save_ppm(&name("t"), &gray_to_rgb(s.t.tensor())?)?;
        let a = s.airlight.tensor().at(0, 0, 0, 0) as f64;
        table.push_str(&format!("{i},{},{}\n", fmt_g(a), fmt_g(s.gamma)));
    }
    let path = out.join("samples.csv");
    io_at(&path, fs::write(&path, table))?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

/// Keep the header and the first `epochs` rows of an earlier trace.
fn trace_prefix(path: &Path, epochs: usize) -> Result<String, Failure> {
    let mut kept = format!("{TRACE_HEADER}\n");
    if epochs == 0 || !path.exists() {
        return Ok(kept);
    }
    let old = io_at(path, fs::read_to_string(path))?;
    let mut lines = old.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Failure::Core(Error::Format { kind: "trace", detail: format!("{}: unexpected header", path.display()) }));
    }
    for line in lines.take(epochs) {
        kept.push_str(line);
        kept.push('\n');
    }
    Ok(kept)
}

/// Write via a temporary file so an interrupted run never leaves a torn checkpoint.
fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Outcome {
    let tmp = path.with_extension("bin.tmp");
    at(&tmp, ckpt.save(&tmp))?;
    io_at(path, fs::rename(&tmp, path))
}

pub fn train(arg: &ConfigArg, resume: Option<PathBuf>, stop_at: Option<usize>) -> Outcome {
    let cfg = load_config(arg)?;
    let stop = stop_at.unwrap_or(cfg.epochs);
    if stop > cfg.epochs {
        return Err(Failure::Usage(format!("--stop-at {stop} exceeds epochs = {}", cfg.epochs)));
    }
    let out = cfg.out_dir.clone();
    let mut trainer = match &resume {
        Some(path) => {
            let ckpt = at(path, Checkpoint::load(path))?;
            if ckpt.config != cfg.echo() {
                return Err(Failure::Usage(format!(
                    "{} was written with a different configuration:\n{}",
                    path.display(),
                    ckpt.config
                )));
            }
            at(path, Trainer::resume(cfg, &ckpt))?
        }
        None => Trainer::new(cfg)?,
    };
    io_at(&out, fs::create_dir_all(&out))?;
    let echo_path = out.join(CONFIG_ECHO_FILE);
    io_at(&echo_path, fs::write(&echo_path, trainer.cfg.echo()))?;
    let trace_path = out.join(TRACE_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let prefix = trace_prefix(&trace_path, trainer.epoch)?;
    io_at(&trace_path, fs::write(&trace_path, prefix))?;
    let total = trainer.cfg.epochs;
    while trainer.epoch < stop {
        let rec = trainer.run_epoch()?;
        let mut f = io_at(&trace_path, fs::OpenOptions::new().append(true).open(&trace_path))?;
        io_at(&trace_path, writeln!(f, "{}", trace_row(&rec)))?;
        save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        let eval = match (rec.psnr, rec.ssim) {
            (Some(p), Some(s)) => format!("  eval psnr {p:.2} ssim {s:.4}"),
            _ => String::new(),
        };
        eprintln!("epoch {}/{total}  lr {:.3e}  loss {:.5}{eval}", rec.epoch, rec.lr, rec.losses.total);
    }
    println!("checkpoint {} after epoch {}", ckpt_path.display(), trainer.epoch);
    Ok(())
}

pub fn eval(arg: &ConfigArg, checkpoint: &Path, split: Split) -> Outcome {
    let ckpt = at(checkpoint, Checkpoint::load(checkpoint))?;
    let cfg = config_for(arg, &ckpt)?;
    let model = at(checkpoint, load_model(cfg.net, &ckpt))?;
    let data = dataset(&cfg, split)?;
    let report = evaluate(&model, &data, cfg.batch)?;
    print!("{}", eval_csv(&report));
    Ok(())
}

#[derive(Debug, Default)]
pub struct Emit {
    pub detail: Option<PathBuf>,
    pub t: Option<PathBuf>,
    pub airlight: Option<PathBuf>,
    pub coarse: Option<PathBuf>,
}

pub fn dehaze(arg: &ConfigArg, checkpoint: &Path, input: &Path, output: &Path, emit: &Emit) -> Outcome {
    for p in [Some(input), Some(output), emit.detail.as_deref(), emit.t.as_deref(), emit.airlight.as_deref(), emit.coarse.as_deref()]
        .into_iter()
        .flatten()
    {
        require_ppm(p)?;
    }
    let ckpt = at(checkpoint, Checkpoint::load(checkpoint))?;
    let cfg = config_for(arg, &ckpt)?;
    let model = at(checkpoint, load_model(cfg.net, &ckpt))?;
    let hazy: Tensor<f32> = at(input, read_ppm(input))?;
    let out = model.run_any_size(&hazy)?;
    save_ppm(output, &out.final_image)?;
    if let Some(p) = &emit.detail {
        save_ppm(p, &min_max_normalize(&out.detail))?;
    }
    if let Some(p) = &emit.t {
        save_ppm(p, &gray_to_rgb(&out.t)?)?;
    }
    if let Some(p) = &emit.airlight {
        save_ppm(p, &out.airlight)?;
    }
    if let Some(p) = &emit.coarse {
        save_ppm(p, &out.coarse)?;
    }
    Ok(())
}

pub fn gradcheck(module: &str) -> Outcome {
    let groups = Group::parse_selection(module).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut failed = Vec::new();
    for group in groups {
        let result = gradsuite::run_group(group)?;
        for c in &result.checks {
            println!("{:<9} {c}", group.name());
        }
        let verdict = if result.passed() { "PASS" } else { "FAIL" };
        println!("{:<9} max relative error {:.3e}  {verdict}", group.name(), result.max_rel_error());
        if !result.passed() {
            failed.push(group.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::GradCheck(format!("gradient check failed: {}", failed.join(", "))))
    }
}
