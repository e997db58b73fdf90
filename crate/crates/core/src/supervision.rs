//! Training objective: accuracy losses on every stage prediction plus the
//! confidence loss (or the accuracy losses, when it is switched off) on the
//! final output.

use std::collections::BTreeMap;

use crate::config::{LossTerm, ModelConfig};
use crate::encoder::LEVEL_STRIDES;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{bce_loss, confidence_loss, dual_confinement_loss, weighted_iou_loss, LossConfig};
use crate::model::ModelOutput;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug)]
pub struct Supervision<T> {
    pub total: Var<T>,
    /// Term values keyed `<point>.<term>`, e.g. `s32.dcloss` or `final.closs`.
    pub terms: BTreeMap<String, f64>,
}

impl<T: Float> Supervision<T> {
    pub fn value(&self) -> f64 {
        self.total.value().data()[0].as_f64()
    }
}

/// Names of the six supervision points, deepest stage first.
pub fn point_names() -> Vec<String> {
    let mut names: Vec<String> = LEVEL_STRIDES.iter().rev().map(|s| format!("s{s}")).collect();
    names.push("final".into());
    names
}

pub fn total_loss<T: Float>(
    g: &Graph<T>,
    out: &ModelOutput<T>,
    sal_gt: &Tensor<T>,
    ctr_gt: Option<&Tensor<T>>,
    model: &ModelConfig,
    loss: &LossConfig,
) -> Result<Supervision<T>> {
    let [n, c, h, w] = sal_gt.shape();
    if c != 1 {
        return Err(Error::Shape(format!("saliency ground truth must have 1 channel, got {c}")));
    }
    if let Some(t) = ctr_gt {
        t.expect_shape([n, 1, h, w])?;
    }
    let accuracy = model.accuracy_terms();
    let needs_contour = accuracy.iter().any(|t| matches!(t, LossTerm::Bce | LossTerm::Dcloss))
        || model.confidence_active();
    let ctr_gt = match ctr_gt {
        Some(t) => Some(t),
        None if needs_contour => {
            return Err(Error::Invalid(
                "contour ground truth is required by the selected losses".into(),
            ))
        }
        None => None,
    };
    let names = point_names();
    let mut parts = Vec::new();
    let mut terms = BTreeMap::new();
    let mut supervise = |name: &str, sal: &Var<T>, ctr: &Var<T>, selected: &[LossTerm]| -> Result<()> {
        let sal = probability(g, sal, h, w)?;
        let ctr = probability(g, ctr, h, w)?;
        let mut value = T::zero();
        let mut d_sal = vec![T::zero(); sal.value().numel()];
        let mut d_ctr = vec![T::zero(); ctr.value().numel()];
        for term in selected {
            let v = apply_term(*term, &sal, &ctr, sal_gt, ctr_gt, model, loss, &mut d_sal, &mut d_ctr)?;
            terms.insert(format!("{name}.{}", term_name(*term)), v.as_f64());
            value += v;
        }
        let inputs = vec![
            (sal.clone(), Tensor::from_vec(sal.shape(), d_sal)?),
            (ctr.clone(), Tensor::from_vec(ctr.shape(), d_ctr)?),
        ];
        parts.push(g.scalar_fn(value, inputs)?);
        Ok(())
    };
    for (stage, name) in out.stages.iter().zip(&names) {
        supervise(name, &stage.sal_logits, &stage.ctr_logits, &accuracy)?;
    }
    let final_terms = if model.confidence_active() {
        vec![LossTerm::Closs]
    } else {
        accuracy.clone()
    };
    supervise("final", &out.final_sal, &out.final_ctr, &final_terms)?;
    let total = g.sum(&parts)?;
    Ok(Supervision { total, terms })
}

fn term_name(t: LossTerm) -> &'static str {
    match t {
        LossTerm::Bce => "bce",
        LossTerm::Wiou => "wiou",
        LossTerm::Dcloss => "dcloss",
        LossTerm::Closs => "closs",
    }
}

fn probability<T: Float>(g: &Graph<T>, logits: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let [_, _, lh, lw] = logits.shape();
    let logits = if (lh, lw) == (h, w) {
        logits.clone()
    } else {
        g.resize(logits, h, w)?
    };
    Ok(g.sigmoid(&logits))
}

#[allow(clippy::too_many_arguments)]
fn apply_term<T: Float>(
    term: LossTerm,
    sal: &Var<T>,
    ctr: &Var<T>,
    sal_gt: &Tensor<T>,
    ctr_gt: Option<&Tensor<T>>,
    model: &ModelConfig,
    loss: &LossConfig,
    d_sal: &mut [T],
    d_ctr: &mut [T],
) -> Result<T> {
    let xs = sal.value().data();
    let xc = ctr.value().data();
    let ys = sal_gt.data();
    let yc = || ctr_gt.map(|t| t.data()).expect("checked by caller");
    let accumulate = |dst: &mut [T], src: &[T], k: T| dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s * k);
    let one = T::one();
    Ok(match term {
        LossTerm::Bce => {
            let a = bce_loss(xs, ys)?;
            let b = bce_loss(xc, yc())?;
            accumulate(d_sal, &a.grad, one);
            accumulate(d_ctr, &b.grad, one);
            a.value + b.value
        }
        LossTerm::Wiou => {
            let [n, _, h, w] = sal_gt.shape();
            let inv = one / T::c(n as f64);
            let mut total = T::zero();
            for i in 0..n {
                let r = i * h * w..(i + 1) * h * w;
                let l = weighted_iou_loss(&xs[r.clone()], &ys[r.clone()], h, w)?;
                accumulate(&mut d_sal[r], &l.grad, inv);
                total += l.value * inv;
            }
            total
        }
        LossTerm::Dcloss => {
            let k = T::c(if model.double_count_dc { 2.0 } else { 1.0 });
            let dc = dual_confinement_loss(xs, ys, xc, yc(), loss)?;
            accumulate(d_sal, &dc.d_x_sal, k);
            accumulate(d_ctr, &dc.d_x_ctr, k);
            dc.value * k
        }
        LossTerm::Closs => {
            let a = confidence_loss(xs, ys, loss)?;
            let b = confidence_loss(xc, yc(), loss)?;
            accumulate(d_sal, &a.grad, one);
            accumulate(d_ctr, &b.grad, one);
            a.value + b.value
        }
    })
}
