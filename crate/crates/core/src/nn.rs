//! Parameterised layers shared by the sub-networks.

use rand::Rng;

use crate::error::Result;
use crate::graph::Var;
use crate::ops::conv::ConvParams;
use crate::params::{GroupId, ParamId, ParamStore, Session};
use crate::tensor::Scalar;

/// Convolution with bias and an optional trailing ReLU.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub params: ConvParams,
    pub relu: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

/// Arguments for [`Conv::new`] beyond the store and RNG.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub params: ConvParams,
    pub relu: bool,
}

impl ConvSpec {
    /// Stride-1, extent-preserving `kernel x kernel` convolution + ReLU.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            params: ConvParams::same(kernel, 1),
            relu: true,
        }
    }

    pub fn dilated(mut self, rate: usize) -> Self {
        self.params = ConvParams::same(self.kernel, rate);
        self
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.params.stride = stride;
        self
    }

    pub fn linear(mut self) -> Self {
        self.relu = false;
        self
    }
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: GroupId,
        name: &str,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.conv_weight(
            group,
            format!("{name}.weight"),
            [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel],
            rng,
        );
        let bias = store.zeros(group, format!("{name}.bias"), &[spec.out_channels]);
        Conv {
            weight,
            bias,
            params: spec.params,
            relu: spec.relu,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.conv2d(x, w, Some(b), self.params)?;
        if self.relu {
            s.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Runs a stack of convolutions in order.
pub fn forward_all<T: Scalar>(layers: &[Conv], s: &mut Session<'_, T>, mut x: Var) -> Result<Var> {
    for layer in layers {
        x = layer.forward(s, x)?;
    }
    Ok(x)
}
