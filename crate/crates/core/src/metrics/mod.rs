//! Agreement statistics between predictions and ground truth: MSE, MAE,
//! ICC(2,1), and Williams' test for two dependent correlations.

mod icc;
mod williams;

pub use icc::{icc, IccAnova};
pub use williams::{student_t_two_sided_p, williams_test, WilliamsResult};

use std::fmt;

use crate::error::{Error, Result};

/// Why a statistic has no value for the given data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotComputable(pub &'static str);

impl fmt::Display for NotComputable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "not computable: {}", self.0)
    }
}

impl std::error::Error for NotComputable {}

pub type Statistic = std::result::Result<f64, NotComputable>;

/// Ground truth and predictions of equal length (at least two), all finite.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSeries {
    truth: Vec<f64>,
    prediction: Vec<f64>,
}

impl PairedSeries {
    pub fn new(truth: Vec<f64>, prediction: Vec<f64>) -> Result<Self> {
        if truth.len() != prediction.len() {
            return Err(Error::invalid(format!(
                "paired series lengths differ: {} truths vs {} predictions",
                truth.len(),
                prediction.len()
            )));
        }
        if truth.len() < 2 {
            return Err(Error::invalid("paired series need at least two pairs"));
        }
        if truth.iter().chain(&prediction).any(|v| !v.is_finite()) {
            return Err(Error::invalid("paired series contain a non-finite value"));
        }
        Ok(Self { truth, prediction })
    }

    pub fn truth(&self) -> &[f64] {
        &self.truth
    }

    pub fn prediction(&self) -> &[f64] {
        &self.prediction
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// The same pairs with the columns exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            truth: self.prediction.clone(),
            prediction: self.truth.clone(),
        }
    }
}

pub fn mse(series: &PairedSeries) -> f64 {
    let n = series.len() as f64;
    series
        .truth
        .iter()
        .zip(&series.prediction)
        .map(|(t, p)| (p - t) * (p - t))
        .sum::<f64>()
        / n
}

pub fn mae(series: &PairedSeries) -> f64 {
    let n = series.len() as f64;
    series
        .truth
        .iter()
        .zip(&series.prediction)
        .map(|(t, p)| (p - t).abs())
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub icc: Statistic,
    pub n: usize,
}

impl MetricsReport {
    pub fn compute(series: &PairedSeries) -> Self {
        Self {
            mse: mse(series),
            mae: mae(series),
            icc: icc(series),
            n: series.len(),
        }
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} mse={:.6} mae={:.6} icc=",
            self.n, self.mse, self.mae
        )?;
        match &self.icc {
            Ok(v) => write!(f, "{v:.6}"),
            Err(e) => write!(f, "NA ({})", e.0),
        }
    }
}
