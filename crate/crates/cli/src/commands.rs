//! The four subcommands. Each reads a [`RunConfig`], writes its artifacts
//! under `output_dir`, and echoes the resolved config there.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use setsum_core::data::{
    center_of_mass_crop, generate_dataset, rescale_intensity, write_tensor, DatasetManifest,
    ImageRecord, Split,
};
use setsum_core::metrics::{MetricsReport, PairedSeries};
use setsum_core::regressor::{read_model, write_model, RegressorModel};
use setsum_core::trainer::{
    aggregate_csv, curve_csv, infer, learning_curve_experiment, train, LabeledImages,
};
use setsum_core::Error;

use crate::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

pub const MODEL_FILE: &str = "model.ssrm";
pub const HISTORY_FILE: &str = "history.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const AGGREGATE_FILE: &str = "curve_aggregate.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Eval,
    Curve,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Curve => "curve",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Replaces the config's master seed.
    pub seed: Option<u64>,
    /// Model to evaluate; defaults to the one `train` writes.
    pub model: Option<PathBuf>,
    /// Worker threads for `curve`.
    pub jobs: Option<usize>,
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_IO,
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            _ => EXIT_INPUT,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(input_error(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Loads the config, applies the overrides, and runs `command`. Progress
/// lines go to `out`.
pub fn run(
    command: Command,
    config_path: &Path,
    options: &Options,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    require_file(config_path, "config file")?;
    let mut config = RunConfig::read(config_path).map_err(|e| input_error(e.to_string()))?;
    if let Some(seed) = options.seed {
        config = config.with_seed(seed);
    }
    if let Some(jobs) = options.jobs {
        if jobs == 0 {
            return Err(input_error("--jobs must be positive"));
        }
        config.curve.jobs = jobs;
    }
    fs::create_dir_all(&config.output_dir).map_err(|e| io_error(&config.output_dir, e))?;
    let echo = config
        .output_dir
        .join(format!("resolved_{}.cfg", command.name()));
    write_file(&echo, &config.to_text())?;
    match command {
        Command::Generate => generate(&config, out),
        Command::Train => train_cmd(&config, out),
        Command::Eval => eval(&config, options.model.as_deref(), out),
        Command::Curve => curve(&config, out),
    }
}

fn say(out: &mut dyn Write, line: String) {
    // progress output is best effort
    let _ = writeln!(out, "{line}");
}

fn generate(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let d = &config.data;
    let total = d.train_count + d.val_count + d.test_count;
    let manifest_dir = d
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let image_dir = manifest_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| io_error(&image_dir, e))?;
    let blobs = generate_dataset(&d.synthetic, total)?;
    let mut records = Vec::with_capacity(total);
    for (i, blob) in blobs.into_iter().enumerate() {
        let mut image = blob.image;
        if let Some(crop) = &d.crop_extent {
            image = center_of_mass_crop(&image, crop)?;
        }
        if d.rescale {
            image = rescale_intensity(&image);
        }
        let rel = PathBuf::from(format!("images/{i:05}.sstf"));
        write_tensor(manifest_dir.join(&rel), &image)?;
        let split = if i < d.train_count {
            Split::Train
        } else if i < d.train_count + d.val_count {
            Split::Val
        } else {
            Split::Test
        };
        records.push(ImageRecord {
            image_path: rel,
            count_label: blob.count_label as u64,
            volume_label: blob.volume_label as u64,
            split,
        });
    }
    let manifest = DatasetManifest::new(records, d.label_kind, &manifest_dir)?;
    manifest.write(&d.manifest)?;
    say(
        out,
        format!("generated {total} records into {}", d.manifest.display()),
    );
    Ok(())
}

fn read_manifest(config: &RunConfig) -> Result<DatasetManifest, CliError> {
    require_file(&config.data.manifest, "manifest")?;
    Ok(DatasetManifest::read(
        &config.data.manifest,
        config.data.label_kind,
    )?)
}

/// A missing model is an input error; one that cannot be read is an IO error.
fn load_model(path: &Path) -> Result<RegressorModel, CliError> {
    require_file(path, "model")?;
    Ok(read_model(path)?)
}

fn train_cmd(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = read_manifest(config)?;
    let model = match &config.resume {
        Some(path) => load_model(path)?,
        None => RegressorModel::build(config.architecture.clone())?,
    };
    let train_set = LabeledImages::from_manifest(&manifest, Split::Train)?;
    let val_set = LabeledImages::from_manifest(&manifest, Split::Val)?;
    let (model, history) = train(model, &train_set, &val_set, &config.train)?;
    let model_path = config.output_dir.join(MODEL_FILE);
    write_model(&model_path, &model)?;
    write_file(
        &config.output_dir.join(HISTORY_FILE),
        &history.to_csv(config.record_timing),
    )?;
    say(
        out,
        format!(
            "trained {} for {} epochs on {} images; best epoch {} (val mse {:.6}); model at {}",
            config.train.method,
            history.epochs.len(),
            train_set.len(),
            history.best_epoch + 1,
            history.best_val_mse(),
            model_path.display()
        ),
    );
    Ok(())
}

fn eval(
    config: &RunConfig,
    model_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let default_model = config.output_dir.join(MODEL_FILE);
    let model = load_model(model_path.unwrap_or(&default_model))?;
    let manifest = read_manifest(config)?;
    let records = manifest.split(config.eval_split);
    let set = LabeledImages::from_manifest(&manifest, config.eval_split)?;
    let preds = infer(&model, &set.images)?;
    let mut csv = String::from("path,truth,prediction\n");
    for ((r, t), p) in records.iter().zip(&set.labels).zip(&preds) {
        csv.push_str(&format!("{},{t:?},{p:?}\n", r.image_path.display()));
    }
    write_file(&config.output_dir.join(PREDICTIONS_FILE), &csv)?;
    let series = PairedSeries::new(set.labels.clone(), preds)
        .map_err(|e| input_error(format!("{} split: {e}", config.eval_split)))?;
    let report = MetricsReport::compute(&series);
    let icc = report
        .icc
        .clone()
        .map_or("NA".to_string(), |v| format!("{v:?}"));
    write_file(
        &config.output_dir.join(METRICS_FILE),
        &format!(
            "mse,mae,icc,n\n{:?},{:?},{icc},{}\n",
            report.mse, report.mae, report.n
        ),
    )?;
    say(out, format!("{} split: {report}", config.eval_split));
    Ok(())
}

fn curve(config: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = read_manifest(config)?;
    let pool = LabeledImages::from_manifest(&manifest, Split::Train)?;
    let val = LabeledImages::from_manifest(&manifest, Split::Val)?;
    let test = LabeledImages::from_manifest(&manifest, Split::Test)?;
    let (rows, points) = learning_curve_experiment(
        &pool,
        &val,
        &test,
        &config.architecture,
        &config.train,
        &config.curve,
    )?;
    write_file(&config.output_dir.join(CURVE_FILE), &curve_csv(&rows))?;
    write_file(
        &config.output_dir.join(AGGREGATE_FILE),
        &aggregate_csv(&points),
    )?;
    for p in &points {
        let icc = p.mean_icc.map_or("NA".to_string(), |v| format!("{v:.4}"));
        say(
            out,
            format!(
                "size {:>3} {:<8} mean mse {:.4} mean icc {icc}",
                p.size, p.method, p.mean_mse
            ),
        );
    }
    say(
        out,
        format!(
            "{} jobs written to {}",
            rows.len(),
            config.output_dir.join(CURVE_FILE).display()
        ),
    );
    Ok(())
}
