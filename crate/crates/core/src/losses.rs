//! Training objective: conditional adversarial term, per-pixel L1 and
//! attention supervision.
//!
//! The graph-level functions record differentiable scalars; the `*_value`
//! helpers evaluate the same quantities on plain tensors.

use crate::numerics::{ops, Graph, Tensor, Var};
use crate::{Error, Result};

/// Weights of the three generator terms plus per-channel L1 weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub l1: f64,
    pub att: f64,
    pub channel: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            l1: 1.0,
            att: 1.0,
            channel: [1.0; 3],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.l1, self.att]
            .into_iter()
            .chain(self.channel);
        for w in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "loss weights must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// How the attention term is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionNorm {
    /// Mean over maps of the per-pixel mean squared difference.
    #[default]
    MeanOverMaps,
    /// Unnormalized squared Frobenius norm of the last map only.
    LastMapFrobenius,
}

/// Component values of one generator/discriminator evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub l1: f64,
    pub att: f64,
    pub total_g: f64,
}

pub fn l1_loss(g: &mut Graph, pred: &Var, truth: &Var, channel: &[f64]) -> Result<Var> {
    g.weighted_l1(pred, truth, channel)
}

pub fn l1_loss_value(pred: &Tensor, truth: &Tensor, channel: &[f64]) -> Result<f64> {
    ops::weighted_l1(pred, truth, channel)
}

fn check_maps(maps: &[&Tensor], mask: &Tensor) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("attention loss needs at least one map".into()));
    }
    for m in maps {
        if m.shape() != mask.shape() {
            return Err(Error::shape(
                "attention_loss",
                format!("map {:?} vs mask {:?}", m.shape(), mask.shape()),
            ));
        }
    }
    Ok(())
}

pub fn attention_loss(g: &mut Graph, maps: &[Var], mask: &Var, norm: AttentionNorm) -> Result<Var> {
    let values: Vec<&Tensor> = maps.iter().map(Var::value).collect();
    check_maps(&values, mask.value())?;
    match norm {
        AttentionNorm::MeanOverMaps => {
            let mut total: Option<Var> = None;
            for m in maps {
                let term = g.mean_squared_diff(m, mask)?;
                total = Some(match total {
                    Some(t) => g.add(&t, &term)?,
                    None => term,
                });
            }
            let total = total.expect("at least one map");
            Ok(g.scale(&total, 1.0 / maps.len() as f64))
        }
        AttentionNorm::LastMapFrobenius => g.sum_squared_diff(maps.last().expect("non-empty"), mask),
    }
}

pub fn attention_loss_value(maps: &[&Tensor], mask: &Tensor, norm: AttentionNorm) -> Result<f64> {
    check_maps(maps, mask)?;
    match norm {
        AttentionNorm::MeanOverMaps => {
            let mut total = 0.0;
            for m in maps {
                total += ops::mean_squared_diff(m, mask)?;
            }
            Ok(total / maps.len() as f64)
        }
        AttentionNorm::LastMapFrobenius => ops::sum_squared_diff(maps[maps.len() - 1], mask),
    }
}

/// `-mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake)))`.
pub fn discriminator_loss(g: &mut Graph, real_logits: &Var, fake_logits: &Var) -> Result<Var> {
    let real = g.bce_with_logits(real_logits, 1.0);
    let fake = g.bce_with_logits(fake_logits, 0.0);
    g.add(&real, &fake)
}

/// Non-saturating generator term `-mean(log sigmoid(fake))`.
pub fn generator_adversarial_loss(g: &mut Graph, fake_logits: &Var) -> Var {
    g.bce_with_logits(fake_logits, 1.0)
}

/// `(d_loss, g_loss)` evaluated on logit tensors.
pub fn adversarial_losses(real_logits: &Tensor, fake_logits: &Tensor) -> (f64, f64) {
    let d = ops::bce_with_logits(real_logits, 1.0) + ops::bce_with_logits(fake_logits, 0.0);
    let g = ops::bce_with_logits(fake_logits, 1.0);
    (d, g)
}

/// Combine components into the weighted generator objective.
pub fn total_generator_loss(
    adv_g: f64,
    adv_d: f64,
    l1: f64,
    att: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        adv_g,
        adv_d,
        l1,
        att,
        total_g: weights.adv * adv_g + weights.l1 * l1 + weights.att * att,
    })
}

/// Record `w_adv * adv + w_l1 * l1 + w_att * att` on the graph.
pub fn weighted_total(
    g: &mut Graph,
    adv: &Var,
    l1: &Var,
    att: &Var,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let a = g.scale(adv, weights.adv);
    let b = g.scale(l1, weights.l1);
    let c = g.scale(att, weights.att);
    let ab = g.add(&a, &b)?;
    g.add(&ab, &c)
}
