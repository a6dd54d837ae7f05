//! Run configuration: UTF-8 `key=value` lines with `#` comments and dotted
//! section prefixes. Every key is optional except `data.image_extent`.
//!
//! ```text
//! output_dir=runs/a
//! seed=7
//! data.image_extent=16,16
//! train.method=setsum
//! curve.sizes=12,24
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use setsum_core::augment::AugmentationConfig;
use setsum_core::data::{LabelKind, Split, SyntheticConfig};
use setsum_core::regressor::{
    parse_conv_blocks, parse_dropout, parse_skip_connections, parse_usize_list, ArchitectureConfig,
};
use setsum_core::rng::derive_seed;
use setsum_core::tensor::{AdadeltaConfig, AdadeltaState, Parameters};
use setsum_core::trainer::{CurveSpec, Method, TrainConfig};
use setsum_core::{Error, Result};

/// Tags that split the master seed into per-purpose seeds.
const SEED_DATA: u64 = 1;
const SEED_MODEL: u64 = 2;
const SEED_TRAIN: u64 = 3;
const SEED_CURVE: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub synthetic: SyntheticConfig,
    pub label_kind: LabelKind,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Centre-of-mass crop applied to generated images.
    pub crop_extent: Option<Vec<usize>>,
    /// Rescale generated intensities to [0, 1].
    pub rescale: bool,
    pub manifest: PathBuf,
}

impl DataSection {
    /// Spatial extent of stored images after preprocessing.
    pub fn stored_extent(&self) -> &[usize] {
        self.crop_extent
            .as_deref()
            .unwrap_or(&self.synthetic.image_extent)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub data: DataSection,
    /// `input_shape` follows the stored image extent.
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    /// Model file to continue training from.
    pub resume: Option<PathBuf>,
    /// Write measured epoch times to the history instead of 0.
    pub record_timing: bool,
    pub eval_split: Split,
    pub curve: CurveSpec,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, path)
    }

    /// Parses `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut f = Fields::parse(text, origin)?;
        let output_dir =
            base.join(f.take("output_dir", PathBuf::from("out"), |s| Ok(PathBuf::from(s)))?);
        let seed = f.take("seed", 0u64, parse_from)?;

        let defaults = SyntheticConfig::default();
        let image_extent = f.require("data.image_extent", parse_usize_list)?;
        let dims = f.take("data.dims", image_extent.len(), parse_from)?;
        let synthetic = SyntheticConfig {
            dims,
            blob_count_range: f.take(
                "data.blob_count_range",
                defaults.blob_count_range,
                parse_pair,
            )?,
            blob_sigma_range: f.take(
                "data.blob_sigma_range",
                defaults.blob_sigma_range,
                parse_pair,
            )?,
            intensity_range: f.take(
                "data.intensity_range",
                defaults.intensity_range,
                parse_pair,
            )?,
            noise_sigma: f.take("data.noise_sigma", defaults.noise_sigma, parse_from)?,
            volume_threshold: f.take(
                "data.volume_threshold",
                defaults.volume_threshold,
                parse_from,
            )?,
            seed: derive_seed(seed, &[SEED_DATA]),
            image_extent,
        };
        let manifest = f.take("data.manifest", None, |s| Ok(Some(PathBuf::from(s))))?;
        let data = DataSection {
            label_kind: f.take("data.label_kind", LabelKind::Count, parse_from)?,
            train_count: f.take("data.train_count", 24, parse_from)?,
            val_count: f.take("data.val_count", 5, parse_from)?,
            test_count: f.take("data.test_count", 20, parse_from)?,
            crop_extent: f.take("data.crop_extent", None, |s| match s {
                "none" => Ok(None),
                v => parse_usize_list(v).map(Some),
            })?,
            rescale: f.take("data.rescale", false, parse_from)?,
            manifest: manifest.map_or_else(|| output_dir.join("manifest.csv"), |m| base.join(m)),
            synthetic,
        };

        let desk = ArchitectureConfig::desk_scale(1);
        let mut input_shape = vec![1];
        input_shape.extend_from_slice(data.stored_extent());
        let architecture =
            ArchitectureConfig {
                input_shape,
                dims,
                conv_blocks: f.take("model.conv_blocks", desk.conv_blocks, parse_conv_blocks)?,
                skip_connections: f.take("model.skip_connections", desk.skip_connections, |s| {
                    match s {
                        "none" => Ok(Vec::new()),
                        v => parse_skip_connections(v),
                    }
                })?,
                dropout_rate: f.take("model.dropout_rate", None, parse_dropout)?,
                zero_bias: f.take("model.zero_bias", true, parse_from)?,
                seed: derive_seed(seed, &[SEED_MODEL]),
            };

        let standard = AugmentationConfig::standard(dims);
        let augmentation = AugmentationConfig {
            flip_axes: f.take("augment.flip_axes", standard.flip_axes, |s| match s {
                "none" => Ok(Vec::new()),
                v => parse_usize_list(v),
            })?,
            rotation_range: f.take(
                "augment.rotation_range",
                standard.rotation_range,
                parse_from,
            )?,
            translation_range: f.take(
                "augment.translation_range",
                standard.translation_range,
                parse_from,
            )?,
            seed: 0,
        };

        let td = TrainConfig::default();
        let od = AdadeltaConfig::default();
        let train = TrainConfig {
            n: f.take("sampler.n", td.n, parse_from)?,
            p: f.take("sampler.p", td.p, parse_from)?,
            with_replacement: f.take(
                "sampler.with_replacement",
                td.with_replacement,
                parse_from,
            )?,
            epochs: f.take("train.epochs", td.epochs, parse_from)?,
            method: f.take("train.method", td.method, parse_from)?,
            loss_kind: f.take("train.loss", td.loss_kind, parse_from)?,
            batch_size: f.take("train.batch_size", td.batch_size, parse_from)?,
            optimizer: AdadeltaConfig {
                rho: f.take("train.rho", od.rho, parse_from)?,
                epsilon: f.take("train.epsilon", od.epsilon, parse_from)?,
                learning_rate: f.take("train.learning_rate", od.learning_rate, parse_from)?,
            },
            augmentation,
            seed: derive_seed(seed, &[SEED_TRAIN]),
        };
        let resume = f.take("train.resume", None, |s| match s {
            "none" => Ok(None),
            v => Ok(Some(base.join(v))),
        })?;
        let record_timing = f.take("train.record_timing", false, parse_from)?;
        let eval_split = f.take("eval.split", Split::Test, parse_from)?;

        let curve = CurveSpec {
            sizes: f.take("curve.sizes", vec![12, 16, 20, 24], parse_usize_list)?,
            methods: f.take(
                "curve.methods",
                vec![Method::SetSum, Method::Baseline],
                |s| s.split(',').map(|m| parse_from(m.trim())).collect(),
            )?,
            num_seeds: f.take("curve.num_seeds", 5, parse_from)?,
            master_seed: derive_seed(seed, &[SEED_CURVE]),
            jobs: 1,
            record_timing: f.take("curve.record_timing", false, parse_from)?,
        };
        f.finish()?;

        let config = Self {
            output_dir,
            seed,
            data,
            architecture,
            train,
            resume,
            record_timing,
            eval_split,
            curve,
        };
        config.validate().map_err(|e| Error::Format {
            path: origin.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        if let Some(crop) = &self.data.crop_extent {
            if crop.len() != self.data.synthetic.dims
                || crop
                    .iter()
                    .zip(&self.data.synthetic.image_extent)
                    .any(|(c, e)| c > e || *c == 0)
            {
                return Err(Error::InvalidArgument(format!(
                    "data.crop_extent {crop:?} must have one positive entry per axis, each within data.image_extent"
                )));
            }
        }
        self.architecture.validate()?;
        self.train.augmentation.validate(self.data.synthetic.dims)?;
        self.train.validate()?;
        AdadeltaState::new(&Parameters::new(), self.train.optimizer)?;
        Ok(())
    }

    /// Re-applies the master seed to every derived seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.synthetic.seed = derive_seed(seed, &[SEED_DATA]);
        self.architecture.seed = derive_seed(seed, &[SEED_MODEL]);
        self.train.seed = derive_seed(seed, &[SEED_TRAIN]);
        self.curve.master_seed = derive_seed(seed, &[SEED_CURVE]);
        self
    }

    /// Every key with its resolved value, paths absolute. Parsing this text
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let s = &d.synthetic;
        let a = &self.architecture;
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let none_or = |v: String| if v.is_empty() { "none".to_string() } else { v };
        let lines = [
            format!("output_dir={}", absolute(&self.output_dir).display()),
            format!("seed={}", self.seed),
            format!("data.image_extent={}", list(&s.image_extent)),
            format!("data.dims={}", s.dims),
            format!(
                "data.blob_count_range={},{}",
                s.blob_count_range.0, s.blob_count_range.1
            ),
            format!(
                "data.blob_sigma_range={:?},{:?}",
                s.blob_sigma_range.0, s.blob_sigma_range.1
            ),
            format!(
                "data.intensity_range={:?},{:?}",
                s.intensity_range.0, s.intensity_range.1
            ),
            format!("data.noise_sigma={:?}", s.noise_sigma),
            format!("data.volume_threshold={:?}", s.volume_threshold),
            format!("data.label_kind={}", d.label_kind),
            format!("data.train_count={}", d.train_count),
            format!("data.val_count={}", d.val_count),
            format!("data.test_count={}", d.test_count),
            format!(
                "data.crop_extent={}",
                none_or(d.crop_extent.as_deref().map(list).unwrap_or_default())
            ),
            format!("data.rescale={}", d.rescale),
            format!("data.manifest={}", absolute(&d.manifest).display()),
            format!(
                "model.conv_blocks={}",
                a.conv_blocks
                    .iter()
                    .map(|b| format!("{}:{}", b.feature_maps, b.kernel_size))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!(
                "model.skip_connections={}",
                none_or(
                    a.skip_connections
                        .iter()
                        .map(|c| format!("{}>{}", c.from, c.to))
                        .collect::<Vec<_>>()
                        .join(",")
                )
            ),
            format!(
                "model.dropout_rate={}",
                a.dropout_rate
                    .map_or("none".to_string(), |r| format!("{r:?}"))
            ),
            format!("model.zero_bias={}", a.zero_bias),
            format!(
                "augment.flip_axes={}",
                none_or(list(&t.augmentation.flip_axes))
            ),
            format!("augment.rotation_range={:?}", t.augmentation.rotation_range),
            format!(
                "augment.translation_range={}",
                t.augmentation.translation_range
            ),
            format!("sampler.n={}", t.n),
            format!("sampler.p={:?}", t.p),
            format!("sampler.with_replacement={}", t.with_replacement),
            format!("train.epochs={}", t.epochs),
            format!("train.method={}", t.method),
            format!("train.loss={}", t.loss_kind.as_str()),
            format!("train.batch_size={}", t.batch_size),
            format!("train.rho={:?}", t.optimizer.rho),
            format!("train.epsilon={:?}", t.optimizer.epsilon),
            format!("train.learning_rate={:?}", t.optimizer.learning_rate),
            format!(
                "train.resume={}",
                self.resume
                    .as_ref()
                    .map_or("none".to_string(), |p| absolute(p).display().to_string())
            ),
            format!("train.record_timing={}", self.record_timing),
            format!("eval.split={}", self.eval_split),
            format!("curve.sizes={}", list(&self.curve.sizes)),
            format!(
                "curve.methods={}",
                self.curve
                    .methods
                    .iter()
                    .map(|m| m.as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("curve.num_seeds={}", self.curve.num_seeds),
            format!("curve.record_timing={}", self.curve.record_timing),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn parse_from<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| format!("`{s}`: {e}"))
}

fn parse_pair<T: FromStr>(s: &str) -> std::result::Result<(T, T), String>
where
    T::Err: std::fmt::Display,
{
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("`{s}` is not `min,max`"))?;
    Ok((parse_from(a.trim())?, parse_from(b.trim())?))
}

/// Raw entries with their line numbers, consumed key by key.
struct Fields {
    entries: BTreeMap<String, (usize, String)>,
    origin: String,
}

impl Fields {
    fn parse(text: &str, origin: &Path) -> Result<Self> {
        let origin = origin.display().to_string();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Format {
                path: origin.clone(),
                message: format!("line {}: {m}", i + 1),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found `{line}`")))?;
            let k = k.trim().to_string();
            if let Some((prev, _)) = entries.get(&k) {
                return Err(err(format!(
                    "duplicate key `{k}` (first set on line {prev})"
                )));
            }
            entries.insert(k, (i + 1, v.trim().to_string()));
        }
        Ok(Self { entries, origin })
    }

    fn take<T>(
        &mut self,
        key: &str,
        default: T,
        parse: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some((line, v)) => parse(&v).map_err(|m| Error::Format {
                path: self.origin.clone(),
                message: format!("line {line}: {key}: {m}"),
            }),
        }
    }

    fn require<T>(
        &mut self,
        key: &str,
        parse: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        if !self.entries.contains_key(key) {
            return Err(Error::Format {
                path: self.origin.clone(),
                message: format!("missing required key `{key}`"),
            });
        }
        self.take(key, None, |s| parse(s).map(Some))
            .map(|v| v.expect("present"))
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Format {
                path: self.origin,
                message: format!("line {line}: unknown key `{k}`"),
            }),
        }
    }
}
