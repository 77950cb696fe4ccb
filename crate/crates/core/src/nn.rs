//! Parameterized layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamSet`] and appends its forward computation to a [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BatchNormParams, Conv2dSpec, Graph, NodeId};
use crate::params::{uniform_fan_in, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight stored as `[out, in]`, uniform in `±1/sqrt(in)` for both
    /// weight and bias.
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            uniform_fan_in(&[out_dim, in_dim], in_dim, 1.0, rng),
            true,
        );
        let bias = ps.add(
            format!("{name}.bias"),
            uniform_fan_in(&[out_dim], in_dim, 1.0, rng),
            true,
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// He-uniform weights; zero bias when present.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            uniform_fan_in(
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                6f64.sqrt(),
                rng,
            ),
            true,
        );
        let bias = with_bias
            .then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true));
        Self {
            weight,
            bias,
            spec: Conv2dSpec { stride, pad },
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, self.weight, self.bias, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub params: BatchNormParams,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, momentum: f64) -> Self {
        let gamma = ps.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0), true);
        let beta = ps.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true);
        let running_mean = ps.add(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        );
        let running_var = ps.add(
            format!("{name}.running_var"),
            Tensor::full(&[channels], 1.0),
            false,
        );
        Self {
            params: BatchNormParams {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps: 1e-5,
            },
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.batch_norm(x, &self.params)
    }
}
