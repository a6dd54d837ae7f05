//! Weight-shared evaluation of the base regressor over a set of images.
//!
//! A set's prediction is the sum of the per-image predictions and its loss is
//! computed once, on that sum. [`hydra_loss`] evaluates the slots one at a
//! time and keeps only each slot's scalar prediction and its parameter
//! Jacobian, so memory does not grow with the set size.
//! [`replicated_hydra_graph`] builds the same computation as one graph with a
//! branch per slot and is kept as an independent cross-check.

use rand::RngCore;

use super::RegressorModel;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
}

impl LossKind {
    pub fn value(self, prediction: f64, target: f64) -> f64 {
        let d = prediction - target;
        match self {
            LossKind::Mse => d * d,
            LossKind::Mae => d.abs(),
        }
    }

    /// dL/dprediction; the absolute error uses 0 at the kink.
    pub fn derivative(self, prediction: f64, target: f64) -> f64 {
        let d = prediction - target;
        match self {
            LossKind::Mse => 2.0 * d,
            LossKind::Mae => {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            other => Err(Error::invalid(format!(
                "unknown loss kind `{other}` (expected mse or mae)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HydraConfig {
    /// Branch count, i.e. the maximum set size.
    pub n: usize,
    pub loss_kind: LossKind,
}

impl HydraConfig {
    pub fn new(n: usize, loss_kind: LossKind) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("branch count n must be at least 1"));
        }
        Ok(Self { n, loss_kind })
    }
}

/// One slot's prediction together with d(prediction)/d(parameters).
#[derive(Clone, Debug)]
pub struct SlotPrediction {
    pub prediction: f64,
    pub jacobian: Gradients,
}

/// Evaluates one slot (`None` is the black image) and its parameter Jacobian.
/// Black slots of a bias-free model are exactly zero with a zero Jacobian and
/// are not evaluated at all.
pub fn slot_prediction(
    model: &RegressorModel,
    image: Option<&Tensor>,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<SlotPrediction> {
    if image.is_none() && model.architecture().zero_bias {
        return Ok(SlotPrediction {
            prediction: 0.0,
            jacobian: Gradients::new(),
        });
    }
    let mut g = Graph::new();
    let x = g.input(image.cloned().unwrap_or_else(|| model.black_image()));
    let y = model.forward(&mut g, x, dropout_rng)?;
    Ok(SlotPrediction {
        prediction: g.value(y).item()?,
        jacobian: g.backpropagate(y)?,
    })
}

/// Σ f(Iᵢ) over the slots; `None` slots are black images.
pub fn hydra_forward(model: &RegressorModel, slots: &[Option<&Tensor>]) -> Result<f64> {
    if slots.is_empty() {
        return Err(Error::invalid("a sample set needs at least one slot"));
    }
    let mut total = 0.0;
    for slot in slots {
        total += match slot {
            Some(img) => model.predict(img)?,
            None if model.architecture().zero_bias => 0.0,
            None => model.predict(&model.black_image())?,
        };
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct SetLoss {
    pub loss: f64,
    pub prediction_sum: f64,
    pub gradients: Gradients,
}

/// Grouped loss `L(Σ f(Iᵢ), label)` with its parameter gradients.
///
/// Dropout is active when `dropout_rng` is supplied; each slot draws its own
/// masks from it in slot order.
pub fn hydra_loss(
    model: &RegressorModel,
    slots: &[Option<&Tensor>],
    label: f64,
    loss_kind: LossKind,
    mut dropout_rng: Option<&mut dyn RngCore>,
) -> Result<SetLoss> {
    if slots.is_empty() {
        return Err(Error::invalid("a sample set needs at least one slot"));
    }
    let mut sum = 0.0;
    let mut jacobian = Gradients::new();
    for slot in slots {
        let rng: Option<&mut dyn RngCore> = match dropout_rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        let sp = slot_prediction(model, *slot, rng)?;
        sum += sp.prediction;
        jacobian.merge(&sp.jacobian)?;
    }
    jacobian.scale(loss_kind.derivative(sum, label));
    Ok(SetLoss {
        loss: loss_kind.value(sum, label),
        prediction_sum: sum,
        gradients: jacobian,
    })
}

/// The set loss as a single graph with one weight-shared branch per slot,
/// summed outputs, and one loss node. Returns the graph and its loss node.
pub fn replicated_hydra_graph(
    model: &RegressorModel,
    slots: &[Option<&Tensor>],
    label: f64,
    loss_kind: LossKind,
) -> Result<(Graph, NodeId)> {
    if slots.is_empty() {
        return Err(Error::invalid("a sample set needs at least one slot"));
    }
    let mut g = Graph::new();
    let mut total: Option<NodeId> = None;
    for slot in slots {
        let x = g.input(slot.cloned().unwrap_or_else(|| model.black_image()));
        let y = model.forward(&mut g, x, None)?;
        total = Some(match total {
            Some(t) => g.add(t, y)?,
            None => y,
        });
    }
    let target = g.input(Tensor::scalar(label));
    let diff = g.sub(total.expect("non-empty set"), target)?;
    let loss = match loss_kind {
        LossKind::Mse => g.square(diff),
        LossKind::Mae => g.abs(diff),
    };
    Ok((g, loss))
}
