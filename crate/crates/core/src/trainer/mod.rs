//! Training loops and inference.
//!
//! Three methods share one loop: `setsum` optimises the grouped loss over
//! virtual sets, `baseline` the mean per-sample loss over mini-batches, and
//! `mixup` the mean per-sample loss over linearly mixed pairs. Every epoch
//! draws its shuffling, augmentation, dropout and mixing randomness from
//! separate streams derived from the training seed, so runs are reproducible
//! and the per-sample paths line up draw for draw.

mod curve;

pub use curve::{
    aggregate_csv, curve_csv, learning_curve_experiment, stratified_subsample, CurveRow, CurveSpec,
    LearningCurvePoint, AGGREGATE_HEADER, CURVE_HEADER,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore};

use crate::augment::{
    make_epoch_sets, mixup_pair, permutation, random_geometric_augment, AugmentationConfig,
    SetSamplerConfig, Slot,
};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::regressor::{hydra_loss, slot_prediction, LossKind, RegressorModel};
use crate::rng;
use crate::tensor::{AdadeltaConfig, AdadeltaState, Gradients, Parameters, Tensor};

const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_MIX: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SetSum,
    Baseline,
    Mixup,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::SetSum => "setsum",
            Method::Baseline => "baseline",
            Method::Mixup => "mixup",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "setsum" => Ok(Method::SetSum),
            "baseline" => Ok(Method::Baseline),
            "mixup" => Ok(Method::Mixup),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected setsum, baseline or mixup)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub method: Method,
    /// Slots per virtual set.
    pub n: usize,
    /// Black-substitution probability per slot.
    pub p: f64,
    pub with_replacement: bool,
    pub loss_kind: LossKind,
    /// Images per optimizer step. For `setsum` this must be a multiple of `n`;
    /// each step then averages the grouped losses of `batch_size / n` sets.
    pub batch_size: usize,
    pub augmentation: AugmentationConfig,
    pub optimizer: AdadeltaConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            method: Method::SetSum,
            n: 4,
            p: 0.1,
            with_replacement: false,
            loss_kind: LossKind::Mse,
            batch_size: 4,
            augmentation: AugmentationConfig::standard(2),
            optimizer: AdadeltaConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.method == Method::SetSum && !self.batch_size.is_multiple_of(self.n.max(1)) {
            return Err(Error::invalid(format!(
                "setsum needs batch_size to be a multiple of n (got b={}, n={})",
                self.batch_size, self.n
            )));
        }
        self.sampler().validate()
    }

    pub fn sampler(&self) -> SetSamplerConfig {
        SetSamplerConfig {
            n: self.n,
            p: self.p,
            with_replacement: self.with_replacement,
            seed: self.seed,
        }
    }

    /// Optimizer steps per epoch over `m` training images.
    pub fn steps_per_epoch(&self, m: usize) -> usize {
        match self.method {
            Method::SetSum => m.div_ceil(self.n).div_ceil(self.batch_size / self.n),
            Method::Baseline | Method::Mixup => m.div_ceil(self.batch_size),
        }
    }
}

/// Images with their scalar labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<f64>,
}

impl LabeledImages {
    pub fn new(images: Vec<Tensor>, labels: Vec<f64>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let (images, labels) = manifest.load_split(split)?;
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (0-based) with the lowest validation MSE; its parameters are the
    /// ones returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs[self.best_epoch].val_mse
    }

    /// `epoch,train_loss,val_mse,seconds` with 1-based epochs. Times are
    /// written as 0 unless `with_timing` is set, keeping the file a pure
    /// function of config and seed.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut out = String::from("epoch,train_loss,val_mse,seconds\n");
        for (i, e) in self.epochs.iter().enumerate() {
            let secs = if with_timing { e.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                i + 1,
                e.train_loss,
                e.val_mse,
                secs
            ));
        }
        out
    }
}

/// Per-image predictions with dropout and augmentation off.
pub fn infer(model: &RegressorModel, images: &[Tensor]) -> Result<Vec<f64>> {
    images.iter().map(|img| model.predict(img)).collect()
}

fn validation_mse(model: &RegressorModel, val: &LabeledImages) -> Result<f64> {
    let preds = infer(model, &val.images)?;
    let ss: f64 = preds
        .iter()
        .zip(&val.labels)
        .map(|(p, y)| (p - y).powi(2))
        .sum();
    Ok(ss / val.len() as f64)
}

/// Observer hook called after every optimizer step with the global step
/// index and the updated parameters.
pub type StepObserver<'a> = &'a mut dyn FnMut(usize, &Parameters);

pub fn train(
    model: RegressorModel,
    train_set: &LabeledImages,
    val_set: &LabeledImages,
    config: &TrainConfig,
) -> Result<(RegressorModel, TrainHistory)> {
    train_observed(model, train_set, val_set, config, &mut |_, _| {})
}

/// Trains on the manifest's `train` split with early selection on `val`.
pub fn train_manifest(
    model: RegressorModel,
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<(RegressorModel, TrainHistory)> {
    let train_set = LabeledImages::from_manifest(manifest, Split::Train)?;
    let val_set = LabeledImages::from_manifest(manifest, Split::Val)?;
    train(model, &train_set, &val_set, config)
}

pub fn train_observed(
    mut model: RegressorModel,
    train_set: &LabeledImages,
    val_set: &LabeledImages,
    config: &TrainConfig,
    observer: StepObserver<'_>,
) -> Result<(RegressorModel, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("the training split is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("the validation split is empty"));
    }
    for img in train_set.images.iter().chain(&val_set.images) {
        model.check_input(img)?;
    }
    let mut optimizer = AdadeltaState::new(model.params(), config.optimizer)?;
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let dropout = model.architecture().dropout_rate.is_some_and(|r| r > 0.0);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let tag = epoch as u64;
        let mut streams = EpochStreams {
            order: rng::stream(config.seed, &[STREAM_ORDER, tag]),
            augment: rng::stream(config.seed, &[STREAM_AUGMENT, tag]),
            dropout: rng::stream(config.seed, &[STREAM_DROPOUT, tag]),
            mix: rng::stream(config.seed, &[STREAM_MIX, tag]),
            dropout_on: dropout,
        };
        let steps = match config.method {
            Method::SetSum => setsum_epoch(train_set, config, &mut streams)?,
            Method::Baseline => baseline_epoch(train_set, config, &mut streams)?,
            Method::Mixup => mixup_epoch(train_set, config, &mut streams)?,
        };
        let mut loss_sum = 0.0;
        let step_count = steps.len();
        // planned up front, evaluated against the parameters of the previous step
        for batch in steps {
            let (loss, grads) = batch.evaluate(&model, train_set, config, &mut streams)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    loss,
                });
            }
            optimizer.step(model.params_mut(), &grads)?;
            loss_sum += loss;
            observer(step, model.params());
            step += 1;
        }
        if model.params().iter().any(|(_, _, t)| !t.is_finite()) {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                loss: f64::NAN,
            });
        }
        let val_mse = validation_mse(&model, val_set)?;
        if !val_mse.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                loss: val_mse,
            });
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, model.params().clone()));
        }
        epochs.push(EpochRecord {
            train_loss: loss_sum / step_count as f64,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    model.params_mut().assign(&params)?;
    Ok((model, TrainHistory { epochs, best_epoch }))
}

struct EpochStreams {
    order: rand_chacha::ChaCha8Rng,
    augment: rand_chacha::ChaCha8Rng,
    dropout: rand_chacha::ChaCha8Rng,
    mix: rand_chacha::ChaCha8Rng,
    dropout_on: bool,
}

impl EpochStreams {
    fn dropout_rng(&mut self) -> Option<&mut dyn RngCore> {
        if self.dropout_on {
            Some(&mut self.dropout)
        } else {
            None
        }
    }
}

/// The work of one optimizer step, planned at the start of the epoch.
enum Step {
    /// Virtual sets, each a slot layout plus its summed label.
    Sets(Vec<(Vec<Slot>, f64)>),
    /// Real sample indices.
    Samples(Vec<usize>),
    /// `(first, second)` sample index pairs to mix.
    Pairs(Vec<(usize, usize)>),
}

fn augmented(
    train_set: &LabeledImages,
    index: usize,
    config: &TrainConfig,
    streams: &mut EpochStreams,
) -> Result<Tensor> {
    let img = &train_set.images[index];
    if config.augmentation.is_identity() {
        return Ok(img.clone());
    }
    random_geometric_augment(img, &config.augmentation, &mut streams.augment)
}

impl Step {
    fn evaluate(
        self,
        model: &RegressorModel,
        train_set: &LabeledImages,
        config: &TrainConfig,
        streams: &mut EpochStreams,
    ) -> Result<(f64, Gradients)> {
        let kind = config.loss_kind;
        let mut total = Gradients::new();
        let mut loss = 0.0;
        let count = match self {
            Step::Sets(sets) => {
                let count = sets.len();
                for (slots, label) in sets {
                    let images = slots
                        .iter()
                        .map(|s| match s {
                            Slot::Real(i) => augmented(train_set, *i, config, streams).map(Some),
                            Slot::Black => Ok(None),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<Option<&Tensor>> = images.iter().map(Option::as_ref).collect();
                    let set_loss = hydra_loss(model, &refs, label, kind, streams.dropout_rng())?;
                    loss += set_loss.loss;
                    total.merge(&set_loss.gradients)?;
                }
                count
            }
            Step::Samples(indices) => {
                let count = indices.len();
                for i in indices {
                    let img = augmented(train_set, i, config, streams)?;
                    let sp = slot_prediction(model, Some(&img), streams.dropout_rng())?;
                    let target = train_set.labels[i];
                    let mut g = sp.jacobian;
                    g.scale(kind.derivative(sp.prediction, target));
                    loss += kind.value(sp.prediction, target);
                    total.merge(&g)?;
                }
                count
            }
            Step::Pairs(pairs) => {
                let count = pairs.len();
                for (a, b) in pairs {
                    let xa = augmented(train_set, a, config, streams)?;
                    let xb = augmented(train_set, b, config, streams)?;
                    let lambda: f64 = streams.mix.random();
                    let (img, target) =
                        mixup_pair(&xa, train_set.labels[a], &xb, train_set.labels[b], lambda)?;
                    let sp = slot_prediction(model, Some(&img), streams.dropout_rng())?;
                    let mut g = sp.jacobian;
                    g.scale(kind.derivative(sp.prediction, target));
                    loss += kind.value(sp.prediction, target);
                    total.merge(&g)?;
                }
                count
            }
        };
        total.scale(1.0 / count as f64);
        Ok((loss / count as f64, total))
    }
}

fn setsum_epoch(
    train_set: &LabeledImages,
    config: &TrainConfig,
    streams: &mut EpochStreams,
) -> Result<Vec<Step>> {
    let sets = make_epoch_sets(&train_set.labels, &config.sampler(), &mut streams.order)?;
    let per_step = config.batch_size / config.n;
    Ok(sets
        .chunks(per_step)
        .map(|chunk| {
            Step::Sets(
                chunk
                    .iter()
                    .map(|s| (s.slots.clone(), s.virtual_label))
                    .collect(),
            )
        })
        .collect())
}

fn baseline_epoch(
    train_set: &LabeledImages,
    config: &TrainConfig,
    streams: &mut EpochStreams,
) -> Result<Vec<Step>> {
    let order = permutation(train_set.len(), &mut streams.order);
    Ok(order
        .chunks(config.batch_size)
        .map(|c| Step::Samples(c.to_vec()))
        .collect())
}

fn mixup_epoch(
    train_set: &LabeledImages,
    config: &TrainConfig,
    streams: &mut EpochStreams,
) -> Result<Vec<Step>> {
    let order = permutation(train_set.len(), &mut streams.order);
    let partners = permutation(train_set.len(), &mut streams.order);
    let pairs: Vec<(usize, usize)> = order.into_iter().zip(partners).collect();
    Ok(pairs
        .chunks(config.batch_size)
        .map(|c| Step::Pairs(c.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regressor::{ArchitectureConfig, ConvBlock};

    fn tiny_arch(seed: u64) -> ArchitectureConfig {
        ArchitectureConfig {
            input_shape: vec![1, 6, 6],
            dims: 2,
            conv_blocks: vec![
                ConvBlock {
                    feature_maps: 3,
                    kernel_size: 3,
                },
                ConvBlock {
                    feature_maps: 4,
                    kernel_size: 3,
                },
            ],
            skip_connections: vec![],
            dropout_rate: None,
            zero_bias: true,
            seed,
        }
    }

    fn toy_data(count: usize, offset: usize) -> LabeledImages {
        let images: Vec<Tensor> = (0..count)
            .map(|i| {
                Tensor::from_fn(&[1, 6, 6], |j| {
                    if (j + i + offset).is_multiple_of(i % 4 + 2) {
                        1.0
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let labels = images.iter().map(|t| t.sum() / 4.0).collect();
        LabeledImages::new(images, labels).unwrap()
    }

    fn cfg(method: Method) -> TrainConfig {
        TrainConfig {
            epochs: 4,
            method,
            augmentation: AugmentationConfig::none(),
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn setsum_batch_must_be_multiple_of_n() {
        let c = TrainConfig {
            batch_size: 6,
            ..cfg(Method::SetSum)
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 8,
            ..cfg(Method::SetSum)
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn empty_splits_rejected() {
        let model = RegressorModel::build(tiny_arch(1)).unwrap();
        let empty = LabeledImages::default();
        assert!(train(
            model.clone(),
            &empty,
            &toy_data(3, 0),
            &cfg(Method::Baseline)
        )
        .is_err());
        assert!(train(model, &toy_data(3, 0), &empty, &cfg(Method::Baseline)).is_err());
    }

    #[test]
    fn step_counts_per_epoch() {
        let train_set = toy_data(10, 0);
        let val = toy_data(3, 1);
        for (method, b, expect) in [
            (Method::SetSum, 4, 3),
            (Method::Baseline, 4, 3),
            (Method::SetSum, 8, 2),
            (Method::Mixup, 3, 4),
        ] {
            let c = TrainConfig {
                epochs: 2,
                batch_size: b,
                ..cfg(method)
            };
            let mut steps = 0;
            train_observed(
                RegressorModel::build(tiny_arch(2)).unwrap(),
                &train_set,
                &val,
                &c,
                &mut |_, _| steps += 1,
            )
            .unwrap();
            assert_eq!(steps, 2 * expect, "{method}");
            assert_eq!(c.steps_per_epoch(10), expect);
        }
    }

    #[test]
    fn history_is_deterministic() {
        let train_set = toy_data(8, 0);
        let val = toy_data(3, 1);
        for method in [Method::SetSum, Method::Baseline, Method::Mixup] {
            let mut c = cfg(method);
            c.augmentation = AugmentationConfig::standard(2);
            let run = || {
                train(
                    RegressorModel::build(tiny_arch(3)).unwrap(),
                    &train_set,
                    &val,
                    &c,
                )
                .unwrap()
            };
            let (m1, h1) = run();
            let (m2, h2) = run();
            assert_eq!(m1.params(), m2.params());
            assert_eq!(h1.best_epoch, h2.best_epoch);
            for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
                assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
                assert_eq!(a.val_mse.to_bits(), b.val_mse.to_bits());
            }
        }
    }

    #[test]
    fn returned_parameters_reproduce_best_val_mse() {
        let train_set = toy_data(8, 0);
        let val = toy_data(4, 1);
        let c = TrainConfig {
            epochs: 6,
            ..cfg(Method::SetSum)
        };
        let (model, hist) = train(
            RegressorModel::build(tiny_arch(4)).unwrap(),
            &train_set,
            &val,
            &c,
        )
        .unwrap();
        assert_eq!(hist.epochs.len(), 6);
        let again = validation_mse(&model, &val).unwrap();
        assert_eq!(again, hist.best_val_mse());
        assert!(hist.epochs.iter().all(|e| e.val_mse >= hist.best_val_mse()));
    }

    #[test]
    fn divergence_is_reported() {
        let train_set = toy_data(4, 0);
        let val = toy_data(2, 1);
        let mut c = cfg(Method::Baseline);
        c.optimizer.learning_rate = 1e300;
        let err = train(
            RegressorModel::build(tiny_arch(6)).unwrap(),
            &train_set,
            &val,
            &c,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, .. }), "{err}");
    }

    #[test]
    fn infer_is_order_independent() {
        let model = RegressorModel::build(tiny_arch(7)).unwrap();
        let data = toy_data(5, 0);
        let preds = infer(&model, &data.images).unwrap();
        let mut rev = data.images.clone();
        rev.reverse();
        let mut rpreds = infer(&model, &rev).unwrap();
        rpreds.reverse();
        assert_eq!(preds, rpreds);
        assert_eq!(preds, infer(&model, &data.images).unwrap());
    }

    #[test]
    fn history_csv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                train_loss: 1.5,
                val_mse: 0.25,
                seconds: 3.0,
            }],
            best_epoch: 0,
        };
        assert_eq!(
            h.to_csv(false),
            "epoch,train_loss,val_mse,seconds\n1,1.5,0.25,0.0\n"
        );
        assert_eq!(
            h.to_csv(true),
            "epoch,train_loss,val_mse,seconds\n1,1.5,0.25,3.0\n"
        );
    }

    #[test]
    fn unit_sets_reduce_to_per_sample_training() {
        let train_set = toy_data(6, 0);
        let val = toy_data(2, 1);
        let trajectory = |method, n| {
            let c = TrainConfig {
                epochs: 3,
                method,
                n,
                p: 0.0,
                batch_size: 1,
                augmentation: AugmentationConfig::standard(2),
                ..cfg(method)
            };
            let mut out = Vec::new();
            train_observed(
                RegressorModel::build(tiny_arch(8)).unwrap(),
                &train_set,
                &val,
                &c,
                &mut |_, p| out.push(p.clone()),
            )
            .unwrap();
            out
        };
        let a = trajectory(Method::SetSum, 1);
        let b = trajectory(Method::Baseline, 1);
        assert_eq!(a.len(), 18);
        for (pa, pb) in a.iter().zip(&b) {
            for ((_, _, ta), (_, _, tb)) in pa.iter().zip(pb.iter()) {
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    assert!((x - y).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn training_loss_decreases() {
        let train_set = toy_data(12, 0);
        let val = toy_data(3, 1);
        for method in [Method::SetSum, Method::Baseline] {
            let c = TrainConfig {
                epochs: 30,
                ..cfg(method)
            };
            let (_, h) = train(
                RegressorModel::build(tiny_arch(9)).unwrap(),
                &train_set,
                &val,
                &c,
            )
            .unwrap();
            assert!(
                h.epochs.last().unwrap().train_loss < h.epochs[0].train_loss,
                "{method}"
            );
        }
    }

    #[test]
    fn infer_matches_black_padded_sets() {
        let model = RegressorModel::build(tiny_arch(10)).unwrap();
        let data = toy_data(4, 2);
        let preds = infer(&model, &data.images).unwrap();
        for (img, p) in data.images.iter().zip(preds) {
            let hydra =
                crate::regressor::hydra_forward(&model, &[Some(img), None, None, None]).unwrap();
            assert!((hydra - p).abs() <= 1e-12);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::SetSum, Method::Baseline, Method::Mixup] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("sgd".parse::<Method>().is_err());
    }
}
