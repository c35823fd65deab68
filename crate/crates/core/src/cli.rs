//! Command-line surface: `gen-data`, `train`, `eval` and `sample`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{export_image, gen_synthetic, DataError, ImageDataset, Pattern};
use crate::model::{ModelConfig, ModelError, Precision};
use crate::sampling::sample_images;
use crate::tensor::Real;
use crate::train::checkpoint::{decode, peek_config};
use crate::train::{self, AdamConfig, CheckpointError, TrainError, TrainOptions, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Missing(_) => 2,
            _ => 1,
        }
    }
}

/// Model, optimizer and run settings read from a `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    pub batch: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opts = TrainOptions::default();
        RunConfig {
            model: ModelConfig::default(),
            adam: opts.adam,
            ema_decay: opts.ema_decay,
            batch: opts.batch,
            steps: opts.steps,
            checkpoint_every: 100,
            data: None,
            out: None,
            ckpt: None,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "lr" => self.adam.lr = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "eps" => self.adam.eps = parse_value(key, value)?,
            "lr_decay" => self.adam.lr_decay = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "ckpt" => self.ckpt = Some(PathBuf::from(value)),
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = self.model.to_record();
        let a = &self.adam;
        for (k, v) in [
            ("lr", a.lr),
            ("beta1", a.beta1),
            ("beta2", a.beta2),
            ("eps", a.eps),
            ("lr_decay", a.lr_decay),
            ("ema_decay", self.ema_decay),
        ] {
            let _ = writeln!(s, "{k} = {v:?}");
        }
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        for (k, v) in [
            ("data", &self.data),
            ("out", &self.out),
            ("ckpt", &self.ckpt),
        ] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            adam: self.adam,
            ema_decay: self.ema_decay,
            batch: self.batch,
            steps: self.steps,
            checkpoint_every: self.checkpoint_every,
            checkpoint_path: self.ckpt.clone(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pixelsnail",
    about = "Autoregressive image density model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset using the image geometry of the config.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        n: u32,
        /// One of checker, gradient, stripes, constant.
        #[arg(long, default_value = "checker")]
        pattern: String,
    },
    /// Train, resuming from the checkpoint if it already exists.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u32>,
        #[arg(long)]
        batch: Option<u32>,
    },
    /// Print bits per dimension of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        use_ema: bool,
        #[arg(long)]
        batch: Option<u32>,
    },
    /// Draw images and write them as PGM/PPM files into a directory.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n: u32,
        #[arg(long)]
        use_ema: bool,
    },
}

fn load_run_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::parse(&read_text(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.model.seed = seed;
    }
    Ok(cfg)
}

fn existing(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    Ok(std::fs::read_to_string(existing(path)?)?)
}

fn require(flag: &str, v: Option<PathBuf>) -> Result<PathBuf, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, S>(argv: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    match cli.command {
        Command::GenData {
            common,
            out: path,
            n,
            pattern,
        } => {
            let cfg = load_run_config(&common)?;
            let path = require("out", path.or(cfg.out.clone()))?;
            let pattern = Pattern::parse(&pattern)
                .ok_or_else(|| CliError::Usage(format!("unknown pattern {pattern:?}")))?;
            let m = &cfg.model;
            let ds = gen_synthetic(
                pattern,
                n as usize,
                m.channels,
                m.height,
                m.width,
                m.depth as u16,
                m.seed,
            )?;
            ds.write(&path)?;
            writeln!(
                out,
                "wrote {} {} images to {}",
                ds.n,
                pattern.name(),
                path.display()
            )?;
        }
        Command::Train {
            common,
            data,
            ckpt,
            steps,
            batch,
        } => {
            let mut cfg = load_run_config(&common)?;
            if let Some(s) = steps {
                cfg.steps = s as u64;
            }
            if let Some(b) = batch {
                cfg.batch = b as usize;
            }
            cfg.ckpt = Some(require("ckpt", ckpt.or(cfg.ckpt.clone()))?);
            let data = ImageDataset::read(existing(&require("data", data.or(cfg.data.clone()))?)?)?;
            match cfg.model.precision {
                Precision::F64 => train_cmd::<f64>(&cfg, &data, out)?,
                Precision::F32 => train_cmd::<f32>(&cfg, &data, out)?,
            }
        }
        Command::Eval {
            common,
            data,
            ckpt,
            use_ema,
            batch,
        } => {
            let cfg = load_run_config(&common)?;
            let bytes = std::fs::read(existing(&require("ckpt", ckpt.or(cfg.ckpt.clone()))?)?)?;
            let data = ImageDataset::read(existing(&require("data", data.or(cfg.data.clone()))?)?)?;
            let batch = batch.map(|b| b as usize).unwrap_or(cfg.batch);
            let bpd = match peek_config(&bytes)?.precision {
                Precision::F64 => train::evaluate(&decode::<f64>(&bytes)?, &data, use_ema, batch)?,
                Precision::F32 => train::evaluate(&decode::<f32>(&bytes)?, &data, use_ema, batch)?,
            };
            writeln!(out, "bpd={bpd:.6}")?;
        }
        Command::Sample {
            common,
            ckpt,
            out: dir,
            n,
            use_ema,
        } => {
            let cfg = load_run_config(&common)?;
            let bytes = std::fs::read(existing(&require("ckpt", ckpt.or(cfg.ckpt.clone()))?)?)?;
            let dir = require("out", dir.or(cfg.out.clone()))?;
            let seed = common.seed.unwrap_or(cfg.model.seed);
            match peek_config(&bytes)?.precision {
                Precision::F64 => sample_cmd::<f64>(&bytes, &dir, n as usize, seed, use_ema, out)?,
                Precision::F32 => sample_cmd::<f32>(&bytes, &dir, n as usize, seed, use_ema, out)?,
            }
        }
    }
    Ok(())
}

fn train_cmd<T: Real>(
    cfg: &RunConfig,
    data: &ImageDataset,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let opts = cfg.train_options();
    let path = opts
        .checkpoint_path
        .clone()
        .expect("checkpoint path set by caller");
    let mut trainer = if path.exists() {
        let ck = train::load_checkpoint::<T>(&path)?;
        writeln!(out, "resuming from step {}", ck.step)?;
        Trainer::from_checkpoint(ck)
    } else {
        Trainer::new(cfg.model.clone(), cfg.adam, cfg.ema_decay)?
    };
    let mut io_result = Ok(());
    train::train(&mut trainer, data, &opts, |r| {
        if io_result.is_ok() {
            io_result = writeln!(
                out,
                "step={} loss={:.6} bpd={:.6}",
                r.step, r.loss_nats, r.bpd
            );
        }
    })?;
    io_result?;
    writeln!(out, "saved {}", path.display())?;
    Ok(())
}

fn sample_cmd<T: Real>(
    bytes: &[u8],
    dir: &Path,
    n: usize,
    seed: u64,
    use_ema: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ck = decode::<T>(bytes)?;
    let params = if use_ema { &ck.ema.shadow } else { &ck.params };
    let run = sample_images(params, &ck.config, n, seed)?;
    std::fs::create_dir_all(dir)?;
    let m = &ck.config;
    let ext = if m.channels == 1 { "pgm" } else { "ppm" };
    for i in 0..n {
        let path = dir.join(format!("sample_{i:03}.{ext}"));
        export_image(
            &run.pixels[i * m.dims()..(i + 1) * m.dims()],
            m.channels,
            m.height,
            m.width,
            m.depth as u16,
            &path,
        )?;
    }
    writeln!(out, "wrote {n} samples to {}", dir.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trip_is_a_fixed_point() {
        let text = "# tiny run\nfilters = 8\nlr = 0.002 # faster\nbatch=4\nckpt = /tmp/x.ckpt\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.filters, 8);
        assert_eq!(cfg.adam.lr, 0.002);
        let again = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.serialize(), cfg.serialize());
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        assert!(matches!(
            RunConfig::parse("filterz = 8"),
            Err(CliError::Config(_))
        ));
        assert!(RunConfig::parse("filters 8").is_err());
        assert!(RunConfig::parse("filters = eight").is_err());
        assert!(RunConfig::parse("filters = 7").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        let mut sink = Vec::new();
        let err = run(["pixelsnail", "train", "--bogus"], &mut sink).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = run(
            [
                "pixelsnail",
                "eval",
                "--ckpt",
                "/nonexistent/a",
                "--data",
                "/nonexistent/b",
            ],
            &mut sink,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
