use super::params::{Bound, Init, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// 2-D convolution (cross-correlation, no kernel flip) over `[C×H×W]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: params.add(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                Init::He { fan_in },
            ),
            bias: params.add(format!("{name}.bias"), &[out_channels], Init::Zeros),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.get(self.weight), p.get(self.bias), self.stride, self.padding)
    }

    /// Output spatial size for an `h×w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if k > h + 2 * p || k > w + 2 * p {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{w} (padding {p})"),
            ));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }
}

/// Fully connected layer `y = W·x + b` with `W` of shape `[out×in]`.
///
/// Accepts a vector `[in]` or a matrix of row vectors `[rows×in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        Self::with_init(params, name, inputs, outputs, Init::He { fan_in: inputs })
    }

    pub fn with_init<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
    ) -> Self {
        Self {
            weight: params.add(format!("{name}.weight"), &[outputs, inputs], init),
            bias: params.add(format!("{name}.bias"), &[outputs], Init::Zeros),
            inputs,
            outputs,
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        match shape.as_slice() {
            [n] if *n == self.inputs => x
                .reshape(&[1, *n])?
                .matmul_nt(p.get(self.weight))?
                .add_row(p.get(self.bias))?
                .reshape(&[self.outputs]),
            [_, n] if *n == self.inputs => x.matmul_nt(p.get(self.weight))?.add_row(p.get(self.bias)),
            _ => Err(Error::dim(
                "dense",
                format!("input {shape:?} for weight [{}, {}]", self.outputs, self.inputs),
            )),
        }
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), &[dim], Init::Ones),
            beta: params.add(format!("{name}.beta"), &[dim], Init::Zeros),
        }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), T::of(Self::EPS))
    }
}
