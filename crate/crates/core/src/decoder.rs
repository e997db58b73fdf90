//! Dual-stream decoder: the contour-saliency blending unit, its weight-shared
//! recursion, stacks of recursive blocks and the per-stage wiring.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Activation, ConvBnAct};
use crate::params::Builder;
use crate::tensor::Float;

/// Saliency and contour feature maps of identical shape.
#[derive(Clone, Debug)]
pub struct DualStream<T> {
    pub sal: Var<T>,
    pub ctr: Var<T>,
}

impl<T: Float> DualStream<T> {
    pub fn new(sal: Var<T>, ctr: Var<T>) -> Result<Self> {
        if sal.shape() != ctr.shape() {
            return Err(Error::Shape(format!(
                "saliency stream {:?} and contour stream {:?} differ",
                sal.shape(),
                ctr.shape()
            )));
        }
        Ok(Self { sal, ctr })
    }

    /// Both streams seeded from the same features.
    pub fn seeded(x: Var<T>) -> Self {
        Self {
            sal: x.clone(),
            ctr: x,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.sal.shape()
    }

    pub fn add(&self, g: &Graph<T>, other: &Self) -> Result<Self> {
        Ok(Self {
            sal: g.add(&self.sal, &other.sal)?,
            ctr: g.add(&self.ctr, &other.ctr)?,
        })
    }
}

/// Per-stage recursive block settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RcsbConfig {
    /// Number of stacked recursive blocks.
    pub blocks: usize,
    /// Recursions per block; parameters are shared across them.
    pub recursions: usize,
    /// Exchange features between streams inside every unit.
    pub early_fusion: bool,
}

impl RcsbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.recursions == 0 {
            return Err(Error::Config(format!(
                "blocks ({}) and recursions ({}) must be at least 1",
                self.blocks, self.recursions
            )));
        }
        Ok(())
    }
}

/// Contour-saliency blending unit.
///
/// `CTR = F3(C)`, `SAL = F3(S)`, then each stream applies a 1x1 convolution to
/// `[CTR, SAL]` followed by a 3x3 convolution. Without early fusion each
/// stream's 1x1 convolution only sees its own features.
#[derive(Clone, Debug)]
pub struct Csbu {
    pub ctr_in: ConvBnAct,
    pub sal_in: ConvBnAct,
    pub ctr_mix: ConvBnAct,
    pub sal_mix: ConvBnAct,
    pub ctr_out: ConvBnAct,
    pub sal_out: ConvBnAct,
    pub early_fusion: bool,
}

impl Csbu {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize, early_fusion: bool) -> Self {
        let c = channels;
        let mix_in = if early_fusion { 2 * c } else { c };
        let act = Activation::Leaky;
        Self {
            ctr_in: ConvBnAct::new(&mut b.sub("ctr_in"), c, c, 3, 1, act),
            sal_in: ConvBnAct::new(&mut b.sub("sal_in"), c, c, 3, 1, act),
            ctr_mix: ConvBnAct::new(&mut b.sub("ctr_mix"), mix_in, c, 1, 1, act),
            sal_mix: ConvBnAct::new(&mut b.sub("sal_mix"), mix_in, c, 1, 1, act),
            ctr_out: ConvBnAct::new(&mut b.sub("ctr_out"), c, c, 3, 1, act),
            sal_out: ConvBnAct::new(&mut b.sub("sal_out"), c, c, 3, 1, act),
            early_fusion,
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: &DualStream<T>) -> Result<DualStream<T>> {
        DualStream::new(x.sal.clone(), x.ctr.clone())?;
        let ctr = self.ctr_in.forward(g, &x.ctr)?;
        let sal = self.sal_in.forward(g, &x.sal)?;
        let (ctr_mixed, sal_mixed) = if self.early_fusion {
            let both = g.concat(&[&ctr, &sal])?;
            (self.ctr_mix.forward(g, &both)?, self.sal_mix.forward(g, &both)?)
        } else {
            (self.ctr_mix.forward(g, &ctr)?, self.sal_mix.forward(g, &sal)?)
        };
        DualStream::new(
            self.sal_out.forward(g, &sal_mixed)?,
            self.ctr_out.forward(g, &ctr_mixed)?,
        )
    }
}

/// One blending unit unrolled `R` times with shared weights, plus a trailing
/// 3x3 convolution per stream:
///
/// `Y1 = f(X)`, `Yr = f(Y(r-1) + X)`, `out = F3(YR + X) + X`.
#[derive(Clone, Debug)]
pub struct RecursiveBlock {
    pub unit: Csbu,
    pub tail_sal: ConvBnAct,
    pub tail_ctr: ConvBnAct,
}

impl RecursiveBlock {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize, early_fusion: bool) -> Self {
        Self {
            unit: Csbu::new(&mut b.sub("csbu"), channels, early_fusion),
            tail_sal: ConvBnAct::new(&mut b.sub("tail_sal"), channels, channels, 3, 1, Activation::Leaky),
            tail_ctr: ConvBnAct::new(&mut b.sub("tail_ctr"), channels, channels, 3, 1, Activation::Leaky),
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        x: &DualStream<T>,
        recursions: usize,
    ) -> Result<DualStream<T>> {
        if recursions == 0 {
            return Err(Error::Config("recursions must be at least 1".into()));
        }
        let mut y = self.unit.forward(g, x)?;
        for _ in 1..recursions {
            y = self.unit.forward(g, &y.add(g, x)?)?;
        }
        let z = y.add(g, x)?;
        let tail = DualStream::new(
            self.tail_sal.forward(g, &z.sal)?,
            self.tail_ctr.forward(g, &z.ctr)?,
        )?;
        tail.add(g, x)
    }
}

/// `G` recursive blocks with distinct parameters, applied in sequence.
#[derive(Clone, Debug)]
pub struct RcsbStack {
    pub blocks: Vec<RecursiveBlock>,
    pub recursions: usize,
}

impl RcsbStack {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize, cfg: RcsbConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| RecursiveBlock::new(&mut b.sub(&format!("block{i}")), channels, cfg.early_fusion))
            .collect();
        Ok(Self {
            blocks,
            recursions: cfg.recursions,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, x: &DualStream<T>) -> Result<DualStream<T>> {
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.forward(g, &y, self.recursions)?;
        }
        Ok(y)
    }
}

/// One decoder stage: fuse the encoder skip with the features carried up from
/// the deeper stage, seed both streams with the sum and run the stage's stack.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub stack: RcsbStack,
}

impl DecoderStage {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, channels: usize, cfg: RcsbConfig) -> Result<Self> {
        Ok(Self {
            stack: RcsbStack::new(b, channels, cfg)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        skip: &Var<T>,
        carried: Option<&Var<T>>,
    ) -> Result<DualStream<T>> {
        let fused = match carried {
            Some(c) => {
                if c.shape() != skip.shape() {
                    return Err(Error::Shape(format!(
                        "carried features {:?} do not match skip {:?}",
                        c.shape(),
                        skip.shape()
                    )));
                }
                g.add(skip, c)?
            }
            None => skip.clone(),
        };
        self.stack.forward(g, &DualStream::seeded(fused))
    }
}
