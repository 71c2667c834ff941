use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use ynet_core::baselines::{frangi_vesselness, run_baseline, Baseline};
use ynet_core::metrics::{evaluate, EvalReport};
use ynet_core::model::{PositionSite, YNetModel};
use ynet_core::patches::{Delivery, LabeledVolume};
use ynet_core::phantom::generate_dataset;
use ynet_core::predict::{binarize, calibrate_threshold, morphology, predict_volume, CalibrationObjective};
use ynet_core::trainer::{train as train_model, EpochRecord, TrainLog};
use ynet_core::volume::{read_volume, render_mip, write_volume, Axis, Volume3D};

use crate::config::{parse_keyword, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{Manifest, Split};

pub const CHECKPOINT_FILE: &str = "best.ynet";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const FRANGI_THRESHOLD_FILE: &str = "frangi_threshold.json";

/// Batches buffered between the patch producer thread and the trainer.
const QUEUE_CAPACITY: usize = 2;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// File name without `.yvol` and without a trailing `.img` / `.lbl` tag, so
/// `test000.img.yvol` becomes `test000`.
pub fn volume_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let name = name.strip_suffix(".yvol").unwrap_or(&name);
    let name = name
        .strip_suffix(".img")
        .or_else(|| name.strip_suffix(".lbl"))
        .unwrap_or(name);
    name.to_owned()
}

/// Writes `<base>.mip_x.pgm`, `<base>.mip_y.pgm` and `<base>.mip_z.pgm`.
fn write_mips(vol: &Volume3D, dir: &Path, base: &str) -> CliResult<()> {
    for axis in Axis::ALL {
        render_mip(vol, axis).write_pgm(dir.join(format!("{base}.mip_{}.pgm", axis.name())))?;
    }
    Ok(())
}

fn labeled(pairs: &[crate::manifest::LoadedPair]) -> Vec<LabeledVolume<'_>> {
    pairs
        .iter()
        .map(|p| LabeledVolume {
            image: &p.image,
            label: &p.label,
        })
        .collect()
}

fn is_non_empty_dir(dir: &Path) -> CliResult<bool> {
    match fs::read_dir(dir) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(CliError::io(dir, e)),
    }
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Output directory (default: `data_dir` from the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

pub fn phantom(mut cfg: RunConfig, args: &PhantomArgs) -> CliResult<()> {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.train {
        cfg.dataset.train = n;
    }
    if let Some(n) = args.val {
        cfg.dataset.val = n;
    }
    if let Some(n) = args.test {
        cfg.dataset.test = n;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    cfg.data_dir = out.clone();
    cfg.validate()?;
    if !args.force && is_non_empty_dir(&out)? {
        return Err(CliError::Usage(format!(
            "{} is not empty; pass --force to write into it",
            out.display()
        )));
    }
    create_dir(&out)?;
    let counts = &cfg.dataset;
    let ds = generate_dataset(cfg.seed, counts.train, counts.val, counts.test, &cfg.phantom)?;
    let manifest = Manifest::from_dataset(cfg.seed, &cfg.phantom, &ds);
    for (pair, entry) in ds.all().zip(&manifest.volumes) {
        write_volume(&pair.image, out.join(&entry.image))?;
        write_volume(&pair.label, out.join(&entry.label))?;
        eprintln!(
            "{}: {} tubes, foreground {:.4}",
            pair.name,
            pair.spec.tubes.len(),
            pair.foreground_fraction()
        );
    }
    manifest.write(&out)?;
    cfg.echo(&out)?;
    eprintln!("wrote {} phantom pairs to {}", manifest.volumes.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (default: `data_dir` from the config).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for the checkpoint and log (default: `run_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total epochs, replacing the `30 * stride` default.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Where the position path joins the network: encoder_first,
    /// encoder_last, decoder_last or none.
    #[arg(long, value_parser = parse_keyword::<PositionSite>)]
    pub position_site: Option<PositionSite>,
    #[arg(long)]
    pub base_kernels: Option<usize>,
    #[arg(long)]
    pub n_levels: Option<usize>,
    /// Positive-pass grid stride.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub validate_every: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    /// Seed for weight initialization and patch shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Outcome of a training run, written next to the checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

pub fn train(mut cfg: RunConfig, args: &TrainArgs) -> CliResult<()> {
    if let Some(n) = args.epochs {
        cfg.schedule.epochs = Some(n);
    }
    if let Some(site) = args.position_site {
        cfg.model.position_site = site;
    }
    if let Some(n) = args.base_kernels {
        cfg.model.base_kernels = n;
    }
    if let Some(n) = args.n_levels {
        cfg.model.n_levels = n;
    }
    if let Some(n) = args.stride {
        cfg.sampling.stride_pos = n;
    }
    if let Some(lr) = args.learning_rate {
        cfg.schedule.learning_rate = lr;
    }
    if let Some(n) = args.validate_every {
        cfg.schedule.validate_every = n;
    }
    if let Some(n) = args.minibatch {
        cfg.schedule.minibatch = n;
    }
    if let Some(s) = args.seed {
        cfg.schedule.seed = s;
    }
    if let Some(d) = &args.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.run_dir = o.clone();
    }
    cfg.validate()?;
    let manifest = Manifest::read(&cfg.data_dir)?;
    let train_pairs = manifest.load_split(&cfg.data_dir, Split::Train)?;
    let val_pairs = manifest.load_split(&cfg.data_dir, Split::Val)?;
    create_dir(&cfg.run_dir)?;
    cfg.echo(&cfg.run_dir)?;

    let total = cfg.schedule.total_epochs(&cfg.sampling);
    let model = YNetModel::<f32>::build(&cfg.model, cfg.schedule.seed)?;
    eprintln!(
        "training {} parameters on {} volumes for up to {total} epochs",
        model.num_params(),
        train_pairs.len()
    );
    let mut seen: Vec<EpochRecord> = Vec::new();
    let result = train_model(
        model,
        &labeled(&train_pairs),
        &labeled(&val_pairs),
        &cfg.schedule,
        &cfg.sampling,
        Delivery::Threaded {
            capacity: QUEUE_CAPACITY,
        },
        |r| {
            match r.val_loss {
                Some(v) => eprintln!(
                    "epoch {:>4}  train {:.6}  val {:.6}  {:.1}s",
                    r.epoch, r.train_loss, v, r.seconds
                ),
                None => eprintln!("epoch {:>4}  train {:.6}  {:.1}s", r.epoch, r.train_loss, r.seconds),
            }
            seen.push(r.clone());
        },
    );
    let log_path = cfg.run_dir.join(TRAIN_LOG_FILE);
    let (best, log) = match result {
        Ok(done) => done,
        Err(e) => {
            let partial = TrainLog {
                epochs: seen,
                ..TrainLog::default()
            };
            write_text(&log_path, &partial.to_csv())?;
            return Err(e.into());
        }
    };
    write_text(&log_path, &log.to_csv())?;
    best.save_checkpoint(cfg.run_dir.join(CHECKPOINT_FILE))?;
    write_json(
        &cfg.run_dir.join(TRAIN_SUMMARY_FILE),
        &TrainSummary {
            epochs_run: log.epochs.len(),
            best_epoch: log.best_epoch,
            best_val_loss: log.best_val_loss,
            stopped_early: log.stopped_early,
        },
    )?;
    eprintln!(
        "best epoch {:?} (validation loss {:?}); checkpoint in {}",
        log.best_epoch,
        log.best_val_loss,
        cfg.run_dir.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Flag,
    Calibrated,
}

/// Sidecar recording which binarization threshold was used and where it
/// came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub threshold: f64,
    pub source: ThresholdSource,
    pub objective: Option<CalibrationObjective>,
    pub calibration_volumes: Vec<String>,
}

fn check_threshold(t: f64) -> CliResult<f64> {
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(CliError::Usage(format!("threshold {t} outside [0, 1]")))
    }
}

/// Calibrates on the validation pairs listed in the dataset manifest, with
/// `score` mapping each validation image to a probability volume.
fn calibrate_on_manifest(
    data_dir: &Path,
    objective: CalibrationObjective,
    score: impl Fn(&Volume3D) -> ynet_core::Result<Volume3D>,
) -> CliResult<ThresholdRecord> {
    let manifest = Manifest::read(data_dir)?;
    let val = manifest.load_split(data_dir, Split::Val)?;
    let probs = val.iter().map(|p| score(&p.image)).collect::<ynet_core::Result<Vec<_>>>()?;
    let pairs: Vec<(&Volume3D, &Volume3D)> = probs.iter().zip(&val).map(|(p, v)| (p, &v.label)).collect();
    let threshold = calibrate_threshold(&pairs, objective)?;
    Ok(ThresholdRecord {
        threshold,
        source: ThresholdSource::Calibrated,
        objective: Some(objective),
        calibration_volumes: val.into_iter().map(|p| p.name).collect(),
    })
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Intensity volumes to segment.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Checkpoint (default: `<run_dir>/best.ynet`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory (default: `run_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory whose validation pairs calibrate the threshold.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fixed binarization threshold; skips calibration.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Calibration objective: accuracy or dice.
    #[arg(long, value_parser = parse_keyword::<CalibrationObjective>)]
    pub objective: Option<CalibrationObjective>,
}

pub fn predict(mut cfg: RunConfig, args: &PredictArgs) -> CliResult<()> {
    if let Some(d) = &args.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.run_dir = o.clone();
    }
    if let Some(obj) = args.objective {
        cfg.calibration = obj;
    }
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.run_dir.join(CHECKPOINT_FILE));
    let model = YNetModel::load_checkpoint(&checkpoint)?;
    cfg.model = model.config().clone();
    cfg.sampling.patch = cfg.model.patch_size;
    let out = cfg.run_dir.clone();
    create_dir(&out)?;

    let record = match args.threshold {
        Some(t) => ThresholdRecord {
            threshold: check_threshold(t)?,
            source: ThresholdSource::Flag,
            objective: None,
            calibration_volumes: Vec::new(),
        },
        None => calibrate_on_manifest(&cfg.data_dir, cfg.calibration, |v| predict_volume(&model, v))?,
    };
    eprintln!("threshold {} ({:?})", record.threshold, record.source);
    write_json(&out.join(THRESHOLD_FILE), &record)?;

    for input in &args.input {
        let vol = read_volume(input)?;
        let prob = predict_volume(&model, &vol)?;
        let label = morphology(&binarize(&prob, record.threshold)?, model.config().morphology_post)?;
        let stem = volume_stem(input);
        for (tag, v) in [("prob", &prob), ("label", &label)] {
            let base = format!("{stem}.{tag}");
            write_volume(v, out.join(format!("{base}.yvol")))?;
            write_mips(v, &out, &base)?;
        }
        eprintln!("{stem}: {} foreground voxels", label.count_nonzero());
    }
    cfg.echo(&out)
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// renyi, phansalkar or frangi.
    #[arg(long, value_parser = parse_keyword::<Baseline>)]
    pub method: Baseline,
    /// Intensity volumes to segment.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory (default: `run_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory whose validation pairs calibrate the Frangi cut.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fixed vesselness cut for Frangi; skips calibration.
    #[arg(long)]
    pub frangi_threshold: Option<f64>,
}

pub fn baseline(mut cfg: RunConfig, args: &BaselineArgs) -> CliResult<()> {
    if let Some(d) = &args.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &args.out {
        cfg.run_dir = o.clone();
    }
    cfg.baselines.frangi.validate()?;
    let out = cfg.run_dir.clone();
    create_dir(&out)?;
    let mut frangi_t = 0.0;
    if args.method == Baseline::Frangi {
        let record = match args.frangi_threshold {
            Some(t) => ThresholdRecord {
                threshold: check_threshold(t)?,
                source: ThresholdSource::Flag,
                objective: None,
                calibration_volumes: Vec::new(),
            },
            None => calibrate_on_manifest(&cfg.data_dir, cfg.calibration, |v| {
                frangi_vesselness(v, &cfg.baselines.frangi)
            })?,
        };
        eprintln!("frangi threshold {} ({:?})", record.threshold, record.source);
        write_json(&out.join(FRANGI_THRESHOLD_FILE), &record)?;
        frangi_t = record.threshold;
    }
    for input in &args.input {
        let vol = read_volume(input)?;
        let label = run_baseline(&vol, args.method, &cfg.baselines, frangi_t)?;
        let base = format!("{}.{}", volume_stem(input), args.method.name());
        write_volume(&label, out.join(format!("{base}.yvol")))?;
        write_mips(&label, &out, &base)?;
        eprintln!("{base}: {} foreground voxels", label.count_nonzero());
    }
    cfg.echo(&out)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted label volume.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label volume.
    #[arg(long)]
    pub truth: PathBuf,
    /// Value of the `model` column (default: prediction file stem).
    #[arg(long)]
    pub name: Option<String>,
    /// Also write the CSV (header and row) to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let pred = read_volume(&args.pred)?;
    let truth = read_volume(&args.truth)?;
    let report = evaluate(&pred, &truth)?;
    let name = args.name.clone().unwrap_or_else(|| volume_stem(&args.pred));
    let text = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row(&name));
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct MipArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for the three PGM projections.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn mip(args: &MipArgs) -> CliResult<()> {
    let vol = read_volume(&args.input)?;
    create_dir(&args.out)?;
    let base = args
        .input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let base = base.strip_suffix(".yvol").unwrap_or(&base).to_owned();
    write_mips(&vol, &args.out, &base)
}
