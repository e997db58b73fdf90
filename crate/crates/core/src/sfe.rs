//! Stage-wise feature extraction. Each decoder stage is reduced to one
//! saliency and one contour logit plane; the next stage sees only features
//! re-extracted from their sigmoids.

use crate::decoder::DualStream;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{Activation, Conv2d, ConvBnAct};

/// Initialisation gain of the prediction heads. Small weights start every
/// prediction near probability 0.5.
pub const HEAD_INIT_GAIN: f64 = 0.1;
use crate::params::{Builder, ParamId};
use crate::tensor::Float;

/// 1x1 prediction heads with learned scalar gains (initialised to 1).
#[derive(Clone, Debug)]
pub struct Heads {
    pub sal: Conv2d,
    pub ctr: Conv2d,
    pub k_sal: ParamId,
    pub k_ctr: ParamId,
}

impl Heads {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            sal: Conv2d::with_gain(&mut b.sub("sal_head"), channels, 1, 1, 1, true, HEAD_INIT_GAIN),
            ctr: Conv2d::with_gain(&mut b.sub("ctr_head"), channels, 1, 1, 1, true, HEAD_INIT_GAIN),
            k_sal: b.constant("k_sal", [1, 1, 1, 1], 1.0),
            k_ctr: b.constant("k_ctr", [1, 1, 1, 1], 1.0),
        }
    }

    /// `(F1(S) * K_sal, F1(C) * K_ctr)` as raw logits.
    pub fn predict<T: Float>(&self, g: &Graph<T>, x: &DualStream<T>) -> Result<(Var<T>, Var<T>)> {
        let sal = g.scale_by(&self.sal.forward(g, &x.sal)?, &g.param(self.k_sal))?;
        let ctr = g.scale_by(&self.ctr.forward(g, &x.ctr)?, &g.param(self.k_ctr))?;
        Ok((sal, ctr))
    }
}

/// Supervised stage logits plus the features handed to the next (2x larger) stage.
#[derive(Clone, Debug)]
pub struct StageOutput<T> {
    pub sal_logits: Var<T>,
    pub ctr_logits: Var<T>,
    /// `None` for the last stage, whose predictions feed the refinement instead.
    pub next_features: Option<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct Sfe {
    pub heads: Heads,
    /// 3x3 convolution producing next-stage features (absent on the last stage).
    pub fuse: Option<ConvBnAct>,
    pub enabled: bool,
}

impl Sfe {
    /// With `enabled`, the fuse convolution reads the two upsampled probability
    /// planes; otherwise it reads the upsampled saliency stream (side-branch layout).
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize, enabled: bool, with_fuse: bool) -> Self {
        let fuse_in = if enabled { 2 } else { channels };
        Self {
            heads: Heads::new(b, channels),
            fuse: with_fuse
                .then(|| ConvBnAct::new(&mut b.sub("fuse"), fuse_in, channels, 3, 1, Activation::Leaky)),
            enabled,
        }
    }

    pub fn stage_predict<T: Float>(&self, g: &Graph<T>, x: &DualStream<T>) -> Result<(Var<T>, Var<T>)> {
        self.heads.predict(g, x)
    }

    /// `F3(Up2([sigmoid(sal), sigmoid(ctr)]))`.
    pub fn extract_features<T: Float>(
        &self,
        g: &Graph<T>,
        fuse: &ConvBnAct,
        sal_logits: &Var<T>,
        ctr_logits: &Var<T>,
    ) -> Result<Var<T>> {
        let probs = upsampled_probabilities(g, sal_logits, ctr_logits)?;
        fuse.forward(g, &probs)
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: &DualStream<T>) -> Result<StageOutput<T>> {
        let (sal_logits, ctr_logits) = self.stage_predict(g, x)?;
        let next_features = self.features_from(g, x, &sal_logits, &ctr_logits)?;
        Ok(StageOutput {
            sal_logits,
            ctr_logits,
            next_features,
        })
    }

    /// Next-stage features given the stage streams and their predictions.
    /// With extraction enabled the streams are not read.
    pub fn features_from<T: Float>(
        &self,
        g: &Graph<T>,
        x: &DualStream<T>,
        sal_logits: &Var<T>,
        ctr_logits: &Var<T>,
    ) -> Result<Option<Var<T>>> {
        Ok(match &self.fuse {
            None => None,
            Some(fuse) if self.enabled => Some(self.extract_features(g, fuse, sal_logits, ctr_logits)?),
            Some(fuse) => Some(fuse.forward(g, &g.upsample2x(&x.sal)?)?),
        })
    }
}

/// `Up2([sigmoid(sal), sigmoid(ctr)])` as a two-channel map.
pub fn upsampled_probabilities<T: Float>(
    g: &Graph<T>,
    sal_logits: &Var<T>,
    ctr_logits: &Var<T>,
) -> Result<Var<T>> {
    let both = g.concat(&[&g.sigmoid(sal_logits), &g.sigmoid(ctr_logits)])?;
    g.upsample2x(&both)
}
