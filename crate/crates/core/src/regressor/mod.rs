//! The base image regressor and its weight-shared evaluation over sets.
//!
//! The base network is a stack of same-padded convolution blocks
//! (conv → ReLU → optional dropout), optional skip connections realised by
//! channel concatenation, global average pooling, and a single-output fully
//! connected layer with no activation. [`hydra`] evaluates it over sets of
//! images with the predictions summed.

pub mod hydra;
mod io;

pub use hydra::{
    hydra_forward, hydra_loss, replicated_hydra_graph, slot_prediction, HydraConfig, LossKind,
    SetLoss, SlotPrediction,
};
pub use io::{
    model_from_bytes, model_to_bytes, parse_conv_blocks, parse_dropout, parse_skip_connections,
    parse_usize_list, read_model, write_model, MODEL_MAGIC,
};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, NodeId, ParamId, Parameters, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub feature_maps: usize,
    pub kernel_size: usize,
}

/// A skip connection: the output of block `from` is concatenated onto the
/// input of block `to`. `to == conv_blocks.len()` targets the pooling layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipConnection {
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureConfig {
    /// `(channels, spatial...)` of one input image.
    pub input_shape: Vec<usize>,
    pub dims: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub skip_connections: Vec<SkipConnection>,
    pub dropout_rate: Option<f64>,
    /// Omit every bias so that an all-zero image maps to exactly zero.
    pub zero_bias: bool,
    pub seed: u64,
}

impl ArchitectureConfig {
    /// Four 3×3 blocks with 8, 16, 24 and 32 feature maps and a skip from the
    /// first block into the third, over a single-channel square 2D image.
    pub fn desk_scale(extent: usize) -> Self {
        Self {
            input_shape: vec![1, extent, extent],
            dims: 2,
            conv_blocks: [8, 16, 24, 32]
                .into_iter()
                .map(|feature_maps| ConvBlock {
                    feature_maps,
                    kernel_size: 3,
                })
                .collect(),
            skip_connections: vec![SkipConnection { from: 0, to: 2 }],
            dropout_rate: None,
            zero_bias: true,
            seed: 0,
        }
    }

    /// Input channel count of every block, and of the pooling stage as the
    /// final entry.
    pub fn stage_channels(&self) -> Vec<usize> {
        let n = self.conv_blocks.len();
        (0..=n)
            .map(|stage| {
                let base = if stage == 0 {
                    self.input_shape.first().copied().unwrap_or(0)
                } else {
                    self.conv_blocks[stage - 1].feature_maps
                };
                base + self
                    .skip_connections
                    .iter()
                    .filter(|s| s.to == stage)
                    .map(|s| self.conv_blocks[s.from].feature_maps)
                    .sum::<usize>()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::invalid(format!(
                "dims must be 2 or 3, got {}",
                self.dims
            )));
        }
        if self.input_shape.len() != self.dims + 1 || self.input_shape.contains(&0) {
            return Err(Error::invalid(format!(
                "input_shape {:?} is not (channels, {} positive spatial extents)",
                self.input_shape, self.dims
            )));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::invalid("at least one conv block is required"));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.feature_maps == 0 || b.kernel_size == 0 {
                return Err(Error::invalid(format!(
                    "conv block {i} needs positive feature maps and kernel size"
                )));
            }
        }
        for s in &self.skip_connections {
            if s.from >= s.to || s.to > self.conv_blocks.len() {
                return Err(Error::invalid(format!(
                    "skip connection {}->{} must go forward to a block in 1..={}",
                    s.from,
                    s.to,
                    self.conv_blocks.len()
                )));
            }
        }
        if let Some(rate) = self.dropout_rate {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::invalid(format!(
                    "dropout rate must lie in [0, 1), got {rate}"
                )));
            }
        }
        // Walk spatial extents; every concatenation needs matching extents.
        let mut extents = vec![self.input_shape[1..].to_vec()];
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let prev = &extents[i];
            let pad = (b.kernel_size - 1) / 2;
            let mut next = Vec::with_capacity(prev.len());
            for &e in prev {
                if e + 2 * pad < b.kernel_size {
                    return Err(Error::shape(format!(
                        "conv block {i}: spatial extent {e} too small for kernel {}",
                        b.kernel_size
                    )));
                }
                next.push(e + 2 * pad - b.kernel_size + 1);
            }
            for s in self.skip_connections.iter().filter(|s| s.to == i + 1) {
                if extents[s.from + 1] != next {
                    return Err(Error::shape(format!(
                        "skip connection {}->{}: extents {:?} and {:?} cannot be concatenated",
                        s.from,
                        s.to,
                        extents[s.from + 1],
                        next
                    )));
                }
            }
            extents.push(next);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    kernel: ParamId,
    bias: Option<ParamId>,
}

/// The base regressor: architecture plus its parameters.
#[derive(Clone, Debug)]
pub struct RegressorModel {
    architecture: ArchitectureConfig,
    params: Parameters,
    blocks: Vec<BlockParams>,
    fc_weight: ParamId,
    fc_bias: Option<ParamId>,
}

impl RegressorModel {
    /// Builds the network with fan-in scaled uniform (He) initialisation
    /// drawn from `config.seed`. Biases start at zero.
    pub fn build(config: ArchitectureConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Parameters::new();
        let channels = config.stage_channels();
        let mut blocks = Vec::with_capacity(config.conv_blocks.len());
        for (i, b) in config.conv_blocks.iter().enumerate() {
            let mut shape = vec![b.feature_maps, channels[i]];
            shape.extend(std::iter::repeat_n(b.kernel_size, config.dims));
            let fan_in = channels[i] * b.kernel_size.pow(config.dims as u32);
            let kernel = params.insert(
                format!("block{i}.kernel"),
                he_uniform(&shape, fan_in, &mut rng),
            );
            let bias = (!config.zero_bias)
                .then(|| params.insert(format!("block{i}.bias"), Tensor::zeros(&[b.feature_maps])));
            blocks.push(BlockParams { kernel, bias });
        }
        let pooled = *channels.last().expect("at least one stage");
        let fc_weight = params.insert("fc.weight", he_uniform(&[1, pooled], pooled, &mut rng));
        let fc_bias = (!config.zero_bias).then(|| params.insert("fc.bias", Tensor::zeros(&[1])));
        Ok(Self {
            architecture: config,
            params,
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    /// Rebuilds a model around existing parameter values, checking names and
    /// shapes against the architecture.
    pub fn from_parts(architecture: ArchitectureConfig, params: Parameters) -> Result<Self> {
        let mut model = Self::build(architecture)?;
        model.params.assign(&params)?;
        Ok(model)
    }

    pub fn architecture(&self) -> &ArchitectureConfig {
        &self.architecture
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// The all-zero image of this model's input shape.
    pub fn black_image(&self) -> Tensor {
        Tensor::zeros(&self.architecture.input_shape)
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.architecture.input_shape.as_slice() {
            return Err(Error::shape(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.architecture.input_shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass of one image on `graph` and returns the
    /// scalar output node. Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        graph: &mut Graph,
        image: NodeId,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        self.check_input(graph.value(image))?;
        let arch = &self.architecture;
        let rate = arch.dropout_rate.unwrap_or(0.0);
        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.blocks.len());
        let mut x = image;
        for (i, (block, cfg)) in self.blocks.iter().zip(&arch.conv_blocks).enumerate() {
            x = self.with_skips(graph, x, i, &outputs)?;
            let k = graph.param(&self.params, block.kernel);
            let b = block.bias.map(|id| graph.param(&self.params, id));
            let spec = ConvSpec::new(1, (cfg.kernel_size - 1) / 2, arch.dims);
            let c = graph.conv(x, k, b, spec)?;
            let r = graph.relu(c);
            x = match dropout_rng.as_deref_mut() {
                Some(rng) => graph.dropout(r, rate, true, rng)?,
                None => r,
            };
            outputs.push(x);
        }
        x = self.with_skips(graph, x, self.blocks.len(), &outputs)?;
        let mut pooled = graph.global_avg_pool(x)?;
        if let Some(rng) = dropout_rng {
            pooled = graph.dropout(pooled, rate, true, rng)?;
        }
        let w = graph.param(&self.params, self.fc_weight);
        let b = self.fc_bias.map(|id| graph.param(&self.params, id));
        graph.fully_connected(pooled, w, b)
    }

    fn with_skips(
        &self,
        graph: &mut Graph,
        x: NodeId,
        stage: usize,
        outputs: &[NodeId],
    ) -> Result<NodeId> {
        let mut x = x;
        for s in self
            .architecture
            .skip_connections
            .iter()
            .filter(|s| s.to == stage)
        {
            x = graph.concat_channels(x, outputs[s.from])?;
        }
        Ok(x)
    }

    /// Inference on a single image: dropout off, unconstrained scalar output.
    pub fn predict(&self, image: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let y = self.forward(&mut g, x, None)?;
        g.value(y).item()
    }
}

fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}
