//! Full-resolution refinement: image and last-stage probabilities pass through
//! per-stream entry convolutions, one recursive block stack and prediction heads.

use crate::decoder::{DualStream, RcsbConfig, RcsbStack};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Activation, ConvBnAct};
use crate::params::Builder;
use crate::sfe::Heads;
use crate::tensor::Float;

#[derive(Clone, Debug)]
pub struct Refinement {
    pub entry_sal: ConvBnAct,
    pub entry_ctr: ConvBnAct,
    pub stack: RcsbStack,
    pub heads: Heads,
}

impl Refinement {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize, cfg: RcsbConfig) -> Result<Self> {
        Ok(Self {
            entry_sal: ConvBnAct::new(&mut b.sub("entry_sal"), 5, channels, 3, 1, Activation::Leaky),
            entry_ctr: ConvBnAct::new(&mut b.sub("entry_ctr"), 5, channels, 3, 1, Activation::Leaky),
            stack: RcsbStack::new(&mut b.sub("rcsb"), channels, cfg)?,
            heads: Heads::new(b, channels),
        })
    }

    /// Returns final `(saliency, contour)` logits at the image resolution.
    pub fn refine<T: Float>(
        &self,
        g: &Graph<T>,
        image: &Var<T>,
        sal_prob: &Var<T>,
        ctr_prob: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let [n, _, h, w] = image.shape();
        for p in [sal_prob, ctr_prob] {
            if p.shape() != [n, 1, h, w] {
                return Err(Error::Shape(format!(
                    "refinement input {:?} does not match image {:?}",
                    p.shape(),
                    image.shape()
                )));
            }
        }
        let joined = g.concat(&[image, sal_prob, ctr_prob])?;
        let seed = DualStream::new(
            self.entry_sal.forward(g, &joined)?,
            self.entry_ctr.forward(g, &joined)?,
        )?;
        let out = self.stack.forward(g, &seed)?;
        self.heads.predict(g, &out)
    }
}
