//! Five-level feature encoder: backbone taps at strides 2..32, grouped channel
//! max pooling down to the decoder width, then one 3x3 convolution per level.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Activation, BatchNorm2d, Conv2d, ConvBnAct};
use crate::ops::ConvGeometry;
use crate::params::{Builder, ParamGroup};
use crate::tensor::Float;

/// Spatial strides of the five encoder levels relative to the input.
pub const LEVEL_STRIDES: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// ResNet-50 with weights read from `weights_path`.
    Resnet50Pretrained,
    /// Strided convolution tower with random initialisation.
    TinyRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Safetensors file with torchvision-style ResNet-50 keys; empty means unset.
    pub weights_path: PathBuf,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Resnet50Pretrained,
            weights_path: PathBuf::new(),
        }
    }
}

impl BackboneSpec {
    pub fn tiny() -> Self {
        Self {
            kind: BackboneKind::TinyRandom,
            weights_path: PathBuf::new(),
        }
    }

    pub fn weights(&self) -> Option<&std::path::Path> {
        (!self.weights_path.as_os_str().is_empty()).then_some(self.weights_path.as_path())
    }

    /// Channels of the five taps before pooling.
    pub fn tap_channels(&self, width: usize) -> [usize; 5] {
        match self.kind {
            BackboneKind::Resnet50Pretrained => [64, 256, 512, 1024, 2048],
            BackboneKind::TinyRandom => [width, width, 2 * width, 2 * width, 4 * width],
        }
    }
}

/// The five encoder levels, shallowest (stride 2) first.
#[derive(Clone, Debug)]
pub struct EncoderFeatures<T> {
    pub levels: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<T: Float>(b: &mut Builder<'_, T>, cin: usize, width: usize, stride: usize) -> Self {
        let out = width * 4;
        let conv = |b: &mut Builder<'_, T>, name: &str, i, o, k, s| {
            Conv2d::new(&mut b.sub(name), i, o, k, s, false, Activation::Relu)
        };
        let conv1 = conv(b, "conv1", cin, width, 1, 1);
        let bn1 = BatchNorm2d::new(&mut b.sub("bn1"), width);
        let conv2 = conv(b, "conv2", width, width, 3, stride);
        let bn2 = BatchNorm2d::new(&mut b.sub("bn2"), width);
        let conv3 = conv(b, "conv3", width, out, 1, 1);
        let bn3 = BatchNorm2d::new(&mut b.sub("bn3"), out);
        let downsample = (stride != 1 || cin != out).then(|| {
            let mut d = b.sub("downsample");
            let c = Conv2d::new(&mut d.sub("0"), cin, out, 1, stride, false, Activation::Identity);
            let n = BatchNorm2d::new(&mut d.sub("1"), out);
            (c, n)
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            conv3,
            bn3,
            downsample,
        }
    }

    fn forward<T: Float>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.bn1.forward(g, &self.conv1.forward(g, x)?)?;
        let y = g.leaky_relu(&y, 0.0);
        let y = self.bn2.forward(g, &self.conv2.forward(g, &y)?)?;
        let y = g.leaky_relu(&y, 0.0);
        let y = self.bn3.forward(g, &self.conv3.forward(g, &y)?)?;
        let skip = match &self.downsample {
            Some((c, n)) => n.forward(g, &c.forward(g, x)?)?,
            None => x.clone(),
        };
        Ok(g.leaky_relu(&g.add(&y, &skip)?, 0.0))
    }
}

/// ResNet-50 (torchvision v1.5 layout, stride on the 3x3 convolution) without the classifier.
#[derive(Clone, Debug)]
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new<T: Float>(b: &mut Builder<'_, T>) -> Self {
        let conv1 = Conv2d::new(&mut b.sub("conv1"), 3, 64, 7, 2, false, Activation::Relu);
        let bn1 = BatchNorm2d::new(&mut b.sub("bn1"), 64);
        let mut cin = 64;
        let mut layers = Vec::new();
        for (i, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let mut lb = b.sub(&format!("layer{}", i + 1));
            let mut layer = Vec::new();
            for j in 0..blocks {
                let s = if j == 0 { stride } else { 1 };
                layer.push(Bottleneck::new(&mut lb.sub(&j.to_string()), cin, width, s));
                cin = width * 4;
            }
            layers.push(layer);
        }
        Self { conv1, bn1, layers }
    }

    fn forward<T: Float>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let stem = self.bn1.forward(g, &self.conv1.forward(g, x)?)?;
        let stem = g.leaky_relu(&stem, 0.0);
        let mut taps = vec![stem.clone()];
        let mut y = g.max_pool(&stem, 3, ConvGeometry { stride: 2, pad: 1 });
        for layer in &self.layers {
            for block in layer {
                y = block.forward(g, &y)?;
            }
            taps.push(y.clone());
        }
        Ok(taps)
    }
}

/// Five stride-2 conv/BN/ReLU stages for weight-free experiments and tests.
#[derive(Clone, Debug)]
pub struct TinyBackbone {
    stages: Vec<ConvBnAct>,
}

impl TinyBackbone {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, widths: [usize; 5]) -> Self {
        let mut cin = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let s = ConvBnAct::new(&mut b.sub(&format!("stage{i}")), cin, w, 3, 2, Activation::Relu);
                cin = w;
                s
            })
            .collect();
        Self { stages }
    }

    fn forward<T: Float>(&self, g: &Graph<T>, x: &Var<T>) -> Result<Vec<Var<T>>> {
        let mut y = x.clone();
        let mut taps = Vec::with_capacity(5);
        for s in &self.stages {
            y = s.forward(g, &y)?;
            taps.push(y.clone());
        }
        Ok(taps)
    }
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Resnet50(ResNet50),
    Tiny(TinyBackbone),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub backbone: Backbone,
    pub reducers: Vec<ConvBnAct>,
    pub channels: usize,
}

impl Encoder {
    /// Registers the backbone under `backbone.*` (encoder group) and the
    /// per-level reduction convolutions under `cp{i}.*` (decoder group).
    pub fn new<T: Float>(b: &mut Builder<'_, T>, spec: &BackboneSpec, channels: usize) -> Result<Self> {
        let taps = spec.tap_channels(channels);
        if let Some(&bad) = taps.iter().find(|&&n| n % channels != 0) {
            return Err(Error::Config(format!(
                "decoder width {channels} does not divide backbone tap width {bad}"
            )));
        }
        let backbone = {
            let mut bb = b.with_group(ParamGroup::Encoder);
            let mut bb = bb.sub("backbone");
            match spec.kind {
                BackboneKind::Resnet50Pretrained => Backbone::Resnet50(ResNet50::new(&mut bb)),
                BackboneKind::TinyRandom => Backbone::Tiny(TinyBackbone::new(&mut bb, taps)),
            }
        };
        let mut db = b.with_group(ParamGroup::Decoder);
        let reducers = (0..5)
            .map(|i| ConvBnAct::new(&mut db.sub(&format!("cp{i}")), channels, channels, 3, 1, Activation::Leaky))
            .collect();
        Ok(Self {
            backbone,
            reducers,
            channels,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, image: &Var<T>) -> Result<EncoderFeatures<T>> {
        let [_, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a positive multiple of 32 on both axes"
            )));
        }
        let taps = match &self.backbone {
            Backbone::Resnet50(r) => r.forward(g, image)?,
            Backbone::Tiny(t) => t.forward(g, image)?,
        };
        let levels = taps
            .iter()
            .zip(&self.reducers)
            .map(|(tap, reduce)| {
                let pooled = g.channel_pool(tap, self.channels)?;
                reduce.forward(g, &pooled)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderFeatures { levels })
    }
}
