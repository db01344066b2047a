//! The work behind each subcommand, callable without a process boundary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crowdage_core::model::{FacePrediction, Model};
use crowdage_core::pipeline::{evaluate, EpochLog, EvalConfig, EvalReport, TrainData, Trainer};
use crowdage_core::synth::{generate_scene, DatasetManifest};
use crowdage_core::Error as CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, ANNOTATION_FILE, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::image_io::load_image;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Refuses to write into a non-empty directory unless `force`; with `force`
/// only the files this tool writes are removed.
fn prepare_output(dir: &Path, force: bool, owned: &[&str]) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(Error::io(dir))?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
        for name in owned {
            let p = dir.join(name);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(Error::io(&p))?;
            } else if p.exists() {
                fs::remove_file(&p).map_err(Error::io(&p))?;
            }
        }
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    pub name: String,
    pub scenes: usize,
    /// Inclusive range of faces per scene, drawn uniformly.
    pub faces: (usize, usize),
    pub image_side: usize,
    pub face_scale: (f32, f32),
    pub seed: u64,
    /// Write boxes only.
    pub no_labels: bool,
}

/// Scene seeds are `seed << 32 | index`; face counts come from a stream
/// seeded by `seed`.
pub fn synth_dataset(opts: &SynthOptions) -> Result<DatasetManifest> {
    let (lo, hi) = opts.faces;
    if lo > hi {
        return Err(Error::Config(format!("faces: empty range {lo}-{hi}")));
    }
    if opts.scenes == 0 {
        return Err(Error::Config("scenes: must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut scenes = Vec::with_capacity(opts.scenes);
    for i in 0..opts.scenes as u64 {
        let n = rng.random_range(lo..=hi);
        let mut s = generate_scene(opts.seed << 32 | i, n, opts.image_side, opts.face_scale)?;
        s.source = opts.name.clone();
        if opts.no_labels {
            s = s.without_labels();
        }
        scenes.push(s);
    }
    Ok(DatasetManifest::new(opts.name.clone(), scenes))
}

pub fn cmd_synth(opts: &SynthOptions, out: &Path, force: bool) -> Result<PathBuf> {
    let ds = synth_dataset(opts)?;
    prepare_output(out, force, &[MANIFEST_FILE, ANNOTATION_FILE, "images"])?;
    save_dataset(&ds, out)
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub mode: Option<crowdage_core::pipeline::TrainMode>,
    pub tiling: Option<bool>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.train.mode = m;
        }
        if let Some(t) = self.tiling {
            cfg.train.tiling = t;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr.initial = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(c) = &self.init_checkpoint {
            cfg.init_checkpoint = Some(c.clone());
        }
    }
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.ckpt")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub last_checkpoint: PathBuf,
}

fn load_training_data(
    cfg: &RunConfig,
) -> Result<(
    Vec<DatasetManifest>,
    Option<DatasetManifest>,
    Option<DatasetManifest>,
)> {
    let mut labelled = Vec::with_capacity(cfg.datasets.len());
    for d in &cfg.datasets {
        let mut ds = load_dataset(&d.path)?;
        if d.weight.is_some() {
            ds.weight = d.weight;
        }
        if ds.is_empty() {
            return Err(CoreError::EmptyDataset(d.path.display().to_string()).into());
        }
        labelled.push(ds);
    }
    let det = cfg
        .detection_only
        .as_deref()
        .map(load_dataset)
        .transpose()?;
    let val = cfg.validation.as_deref().map(load_dataset).transpose()?;
    Ok((labelled, det, val))
}

fn initial_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let mc = cfg.model_config();
    match &cfg.init_checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model.config != mc {
                return Err(Error::Mismatch(format!(
                    "{}: model configuration differs from preset {:?} with intermediate_connection = {}",
                    p.display(),
                    cfg.preset,
                    cfg.train.intermediate_connection
                )));
            }
            Ok(ck.model)
        }
        None => Ok(Model::build(&mc, cfg.train.seed)?),
    }
}

/// Runs (or resumes) training, writing one checkpoint per
/// `checkpoint_every` epochs, the metric log and the resolved config.
pub fn cmd_train(
    cfg: &RunConfig,
    output_dir: &Path,
    force: bool,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (labelled, det, val) = load_training_data(cfg)?;
    let scene_size = (
        labelled[0].scenes[0].width(),
        labelled[0].scenes[0].height(),
    );
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let state = ck.trainer.ok_or_else(|| {
                Error::Mismatch(format!("{}: no trainer state to resume", p.display()))
            })?;
            if ck.train_config.as_ref() != Some(&cfg.train) {
                return Err(Error::Mismatch(format!(
                    "{}: training config differs from the run config",
                    p.display()
                )));
            }
            Trainer::resume(ck.model, cfg.train.clone(), state)?
        }
        None => {
            prepare_output(
                output_dir,
                force,
                &[METRICS_FILE, CONFIG_ECHO_FILE, "failure.json"],
            )?;
            for entry in fs::read_dir(output_dir).map_err(Error::io(output_dir))? {
                let p = entry.map_err(Error::io(output_dir))?.path();
                if p.extension().is_some_and(|e| e == "ckpt") {
                    fs::remove_file(&p).map_err(Error::io(&p))?;
                }
            }
            Trainer::new(initial_model(cfg)?, cfg.train.clone())?
        }
    };
    fs::create_dir_all(output_dir).map_err(Error::io(output_dir))?;
    let echo = output_dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, cfg.to_toml()).map_err(Error::io(&echo))?;
    let data = TrainData {
        labelled: &labelled,
        detection_only: det.as_ref(),
    };
    let metrics = output_dir.join(METRICS_FILE);
    let mut logs = Vec::new();
    let mut last = output_dir.join(checkpoint_name(trainer.epoch()));
    while !trainer.is_finished() {
        let mut log = match trainer.train_epoch(&data) {
            Ok(log) => log,
            Err(e @ CoreError::NonFiniteLoss { .. }) => {
                let dump = output_dir.join("failure.json");
                let text =
                    serde_json::json!({ "error": e.to_string(), "config": cfg.train }).to_string();
                fs::write(&dump, text).map_err(Error::io(&dump))?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(v) = &val {
            let report = evaluate(
                &trainer.model,
                &v.scenes,
                &cfg.train.eval_config(cfg.validation_single_face),
            )?;
            log.val = Some(report.summary());
        }
        append_jsonl(&metrics, &log)?;
        let epoch = trainer.epoch();
        if epoch % cfg.checkpoint_every == 0 || trainer.is_finished() {
            last = output_dir.join(checkpoint_name(epoch));
            Checkpoint {
                model: trainer.model.clone(),
                train_config: Some(cfg.train.clone()),
                trainer: Some(trainer.state()),
                scene_size: Some(scene_size),
            }
            .save(&last)?;
        }
        logs.push(log);
    }
    Ok(TrainOutcome {
        logs,
        last_checkpoint: last,
    })
}

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(Error::io(path))
}

pub fn cmd_eval(checkpoint: &Path, dataset: &Path, cfg: &EvalConfig) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(dataset)?;
    if let Some((w, h)) = ck.scene_size {
        if let Some(s) = ds.scenes.iter().find(|s| (s.width(), s.height()) != (w, h)) {
            return Err(Error::Mismatch(format!(
                "{}: scene is {}x{} but {} was trained on {w}x{h} scenes",
                dataset.display(),
                s.width(),
                s.height(),
                checkpoint.display()
            )));
        }
    }
    Ok(evaluate(&ck.model, &ds.scenes, cfg)?)
}

pub fn cmd_infer(
    checkpoint: &Path,
    image: &Path,
    k: usize,
    conf: f32,
) -> Result<Vec<FacePrediction>> {
    let ck = Checkpoint::load(checkpoint)?;
    let img = load_image(image)?;
    Ok(ck.model.predict(&img, k, conf)?)
}

/// Per-group rows followed by the overall row and detection figures.
pub fn format_report(r: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<10} {:>6} {:>8} {:>8} {:>8}\n",
        "group", "faces", "age", "1-off", "gender"
    ));
    for g in &r.per_group {
        s.push_str(&format!(
            "{:<10} {:>6} {:>7.2}% {:>7.2}% {:>7.2}%\n",
            g.group, g.faces, g.age_accuracy, g.one_off_accuracy, g.gender_accuracy
        ));
    }
    s.push_str(&format!(
        "{:<10} {:>6} {:>7.2}% {:>7.2}% {:>7.2}%\n",
        "all", r.age_faces, r.group_accuracy, r.one_off_accuracy, r.gender_accuracy
    ));
    s.push_str(&format!(
        "MAE {:.3} years over {} faces in {} scenes\n",
        r.mae, r.age_faces, r.scenes
    ));
    s.push_str(&format!(
        "detection: recall {:.4} precision {:.4} ({} of {} faces, {} predictions)\n",
        r.detection.recall,
        r.detection.precision,
        r.detection.true_positives,
        r.detection.ground_truth,
        r.detection.predictions
    ));
    s
}
