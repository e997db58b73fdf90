//! Convolution, normalisation and activation building blocks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::ConvGeometry;
use crate::params::{Builder, ParamId};
use crate::tensor::Float;

/// Negative slope of the decoder's leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Leaky,
}

impl Activation {
    pub fn apply<T: Float>(self, g: &Graph<T>, x: &Var<T>) -> Var<T> {
        match self {
            Activation::Identity => x.clone(),
            Activation::Relu => g.leaky_relu(x, 0.0),
            Activation::Leaky => g.leaky_relu(x, LEAKY_SLOPE),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => 2f64.sqrt(),
            Activation::Leaky => (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// "Same" padding for odd kernels at the given stride. Weights use
    /// fan-in scaled uniform initialisation for the following activation.
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        act: Activation,
    ) -> Self {
        Self::with_gain(b, cin, cout, kernel, stride, bias, act.gain())
    }

    /// As [`Conv2d::new`] with an explicit initialisation gain.
    pub fn with_gain<T: Float>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = b.uniform("weight", [cout, cin, kernel, kernel], bound);
        let bias = bias.then(|| b.uniform("bias", [1, cout, 1, 1], 1.0 / fan_in.sqrt()));
        Self {
            weight,
            bias,
            geo: ConvGeometry {
                stride,
                pad: kernel / 2,
            },
            in_channels: cin,
            out_channels: cout,
            kernel,
        }
    }

    pub fn with_padding(mut self, pad: usize) -> Self {
        self.geo.pad = pad;
        self
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = g.param(self.weight);
        let b = self.bias.map(|id| g.param(id));
        g.conv2d(x, &w, b.as_ref(), self.geo)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: b.constant("weight", shape, 1.0),
            beta: b.constant("bias", shape, 0.0),
            running_mean: b.buffer("running_mean", shape, 0.0),
            running_var: b.buffer("running_var", shape, 1.0),
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        g.batch_norm(
            x,
            &g.param(self.gamma),
            &g.param(self.beta),
            self.running_mean,
            self.running_var,
        )
    }
}

/// Convolution followed by batch normalisation and an activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Activation,
}

impl ConvBnAct {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
    ) -> Self {
        // No conv bias: batch statistics would cancel it and leave it without gradient.
        let conv = Conv2d::new(&mut b.sub("conv"), cin, cout, kernel, stride, false, act);
        let bn = BatchNorm2d::new(&mut b.sub("bn"), cout);
        Self { conv, bn, act }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, &y)?;
        Ok(self.act.apply(g, &y))
    }
}
