use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crowdage::commands::{self, SynthOptions, TrainOverrides};
use crowdage::config::RunConfig;
use crowdage::Error;
use crowdage_core::pipeline::{EvalConfig, TrainMode};

/// Multi-person age and gender estimation with a single network.
#[derive(Parser)]
#[command(name = "crowdage", version)]
struct Cli {
    /// Default root for outputs when no explicit path is given.
    #[arg(long, env = "CROWDAGE_OUT", global = true)]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    FrozenDetector,
    EndToEnd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        /// Faces per scene: a count like `4` or an inclusive range like `1-4`.
        #[arg(long, default_value = "1", value_parser = parse_range::<usize>)]
        faces: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 192)]
        side: usize,
        /// Face height as a fraction of the side, e.g. `0.35-0.6`.
        #[arg(long, value_parser = parse_range::<f32>)]
        scale: Option<(f32, f32)>,
        #[arg(long, default_value = "synthetic")]
        name: String,
        /// Boxes only, no age or gender.
        #[arg(long)]
        no_labels: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train from a TOML run config; flags override the file.
    Train {
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        tiling: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(short, long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        conf: f32,
        #[arg(long, default_value_t = 0.5)]
        match_iou: f32,
        /// Evaluate only the largest detection of each single-face scene.
        #[arg(long)]
        single_face: bool,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print one JSON record per detected face.
    Infer {
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(short, long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        conf: f32,
    },
}

fn parse_range<T: std::str::FromStr + PartialOrd + Copy>(s: &str) -> Result<(T, T), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<T>()
            .map_err(|_| format!("cannot parse `{v}`"))
    };
    let (lo, hi) = match s.split_once('-') {
        Some((a, b)) => (parse(a)?, parse(b)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if lo > hi {
        return Err(format!("`{s}` is an empty range"));
    }
    Ok((lo, hi))
}

fn out_dir(
    explicit: Option<PathBuf>,
    root: &Option<PathBuf>,
    leaf: &str,
) -> Result<PathBuf, Error> {
    explicit
        .or_else(|| root.as_ref().map(|r| r.join(leaf)))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set CROWDAGE_OUT".into()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            out,
            scenes,
            faces,
            seed,
            side,
            scale,
            name,
            no_labels,
            force,
        } => {
            let out = out_dir(out, &cli.out_root, &name)?;
            let face_scale = scale.unwrap_or(if faces.1 <= 1 {
                (0.35, 0.6)
            } else {
                (0.18, 0.3)
            });
            let opts = SynthOptions {
                name,
                scenes,
                faces,
                image_side: side,
                face_scale,
                seed,
                no_labels,
            };
            let manifest = commands::cmd_synth(&opts, &out, force)?;
            println!("{}", manifest.display());
        }
        Command::Train {
            config,
            mode,
            tiling,
            epochs,
            seed,
            lr,
            batch_size,
            out,
            init_checkpoint,
            resume,
            force,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            TrainOverrides {
                mode: mode.map(|m| match m {
                    Mode::FrozenDetector => TrainMode::FrozenDetector,
                    Mode::EndToEnd => TrainMode::EndToEnd,
                }),
                tiling,
                epochs,
                seed,
                lr,
                batch_size,
                output_dir: out,
                init_checkpoint,
            }
            .apply(&mut cfg);
            let stem = config
                .file_stem()
                .map_or("run".into(), |s| s.to_string_lossy().into_owned());
            let dir = out_dir(cfg.output_dir.clone(), &cli.out_root, &stem)?;
            let outcome = commands::cmd_train(&cfg, &dir, force, resume.as_deref())?;
            for log in &outcome.logs {
                println!("{}", serde_json::to_string(log).expect("log serializes"));
            }
            eprintln!("wrote {}", outcome.last_checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            k,
            conf,
            match_iou,
            single_face,
            format,
            report,
        } => {
            let cfg = EvalConfig {
                k,
                conf_threshold: conf,
                match_iou,
                single_face,
            };
            if k == 0 || !(conf > 0.0 && conf < 1.0) {
                return Err(Error::Config(
                    "k must be at least 1 and conf must lie in (0, 1)".into(),
                ));
            }
            let r = commands::cmd_eval(&checkpoint, &dataset, &cfg)?;
            let json = serde_json::to_string(&r).expect("report serializes");
            if let Some(p) = report {
                write_file(&p, &(json.clone() + "\n"))?;
            }
            match format {
                Format::Json => println!("{json}"),
                Format::Table => print!("{}", commands::format_report(&r)),
            }
        }
        Command::Infer {
            checkpoint,
            image,
            k,
            conf,
        } => {
            for p in commands::cmd_infer(&checkpoint, &image, k, conf)? {
                println!("{}", serde_json::to_string(&p).expect("record serializes"));
            }
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
