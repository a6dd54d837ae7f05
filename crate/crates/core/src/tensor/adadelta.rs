use super::{Gradients, Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
    /// Multiplier on the Adadelta step; 1.0 is the plain method.
    pub learning_rate: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            epsilon: 1e-6,
            learning_rate: 1.0,
        }
    }
}

/// Running averages of squared gradients and squared updates, one pair per
/// parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState {
    config: AdadeltaConfig,
    sq_grad: Vec<Tensor>,
    sq_update: Vec<Tensor>,
}

impl AdadeltaState {
    pub fn new(params: &Parameters, config: AdadeltaConfig) -> Result<Self> {
        if !(config.rho > 0.0 && config.rho < 1.0) {
            return Err(Error::invalid(format!(
                "adadelta rho must lie in (0, 1), got {}",
                config.rho
            )));
        }
        if config.epsilon <= 0.0 {
            return Err(Error::invalid("adadelta epsilon must be positive"));
        }
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Ok(Self {
            config,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        })
    }

    pub fn config(&self) -> AdadeltaConfig {
        self.config
    }

    /// E[g²] accumulator of parameter `index`.
    pub fn sq_grad(&self, index: usize) -> &Tensor {
        &self.sq_grad[index]
    }

    /// E[Δx²] accumulator of parameter `index`.
    pub fn sq_update(&self, index: usize) -> &Tensor {
        &self.sq_update[index]
    }

    /// Applies one update to every parameter. Parameters without a gradient
    /// entry are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients) -> Result<()> {
        if params.len() != self.sq_grad.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters but {} were supplied",
                self.sq_grad.len(),
                params.len()
            )));
        }
        let AdadeltaConfig {
            rho,
            epsilon,
            learning_rate,
        } = self.config;
        for id in params.ids() {
            let i = id.0;
            let p = params.get_mut(id);
            let g = grads.get(id);
            if let Some(g) = g {
                p.expect_same_shape(g)?;
            }
            let eg = self.sq_grad[i].data_mut();
            let ex = self.sq_update[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j]);
                eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
                let dx = -((ex[j] + epsilon).sqrt() / (eg[j] + epsilon).sqrt()) * gj;
                ex[j] = rho * ex[j] + (1.0 - rho) * dx * dx;
                *w += learning_rate * dx;
            }
        }
        Ok(())
    }
}
