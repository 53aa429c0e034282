//! Parameterised building blocks shared by the search space and the backbone.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::kernels::ConvGeometry;
use crate::params::{BufferId, ParamGroup, ParamId, ParamStore};
use crate::tdc::tdc_on_graph;
use crate::tensor::Tensor;

/// Training mode normalises with batch statistics and updates the running
/// averages; evaluation mode uses the running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamGroup::Weights),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamGroup::Weights),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Eval => {
                let mean = store.buffer(self.running_mean).data().to_vec();
                let var = store.buffer(self.running_var).data().to_vec();
                Ok(g.batch_norm(x, gamma, beta, Some((&mean, &var)))?.0)
            }
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gamma, beta, None)?;
                let unbias = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                for (r, m) in store.buffer_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, v) in store.buffer_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
                Ok(y)
            }
        }
    }
}

/// Convolution (plain or temporal-difference) → normalisation → optional
/// rectifier, at stride 1 with shape-preserving padding.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    weight: ParamId,
    kernel: [usize; 3],
    theta: Option<f64>,
    bn: BatchNorm,
    relu: bool,
}

impl ConvUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        theta: Option<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_conv_kernel(
            format!("{name}.weight"),
            [out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
            rng,
        );
        ConvUnit {
            weight,
            kernel,
            theta,
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            relu: true,
        }
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let w = g.param(store, self.weight);
        let geom = ConvGeometry::same(self.kernel);
        let y = match self.theta {
            Some(theta) => tdc_on_graph(g, x, w, theta, geom)?,
            None => g.conv3d(x, w, geom)?,
        };
        let y = self.bn.forward(g, store, y, mode)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}
