//! Conditional patch discriminator built from conv / norm / leaky-relu blocks.

use super::params::{Initializer, ParamTree};
use crate::numerics::{ops, BoundParams, Graph, NumericMode, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Output channels per layer; the last must be 1 (patch logits).
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub pad: usize,
    pub slope: f64,
    pub eps: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::with_base_width(64)
    }
}

impl DiscriminatorConfig {
    /// Widths `b, 2b, 4b, 8b, 1` with strides `2, 2, 2, 1, 1`.
    pub fn with_base_width(b: usize) -> Self {
        DiscriminatorConfig {
            widths: vec![b, 2 * b, 4 * b, 8 * b, 1],
            strides: vec![2, 2, 2, 1, 1],
            kernel: 4,
            pad: 1,
            slope: 0.2,
            eps: 1e-5,
        }
    }

    pub fn base_width(&self) -> usize {
        self.widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::InvalidArgument(
                "discriminator needs one stride per layer".into(),
            ));
        }
        if self.widths.last() != Some(&1) {
            return Err(Error::InvalidArgument(
                "discriminator must end in one logit channel".into(),
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.kernel == 0 {
            return Err(Error::InvalidArgument(
                "discriminator widths, strides and kernel must be >= 1".into(),
            ));
        }
        ops::check_slope(self.slope)
    }

    /// Spatial size of the logit map for an `h x w` input, or `None` when
    /// some layer would collapse to nothing.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let step = |n: usize, s: usize| (n + 2 * self.pad).checked_sub(self.kernel).map(|r| r / s + 1);
        self.strides
            .iter()
            .try_fold((h, w), |(h, w), &s| Some((step(h, s)?, step(w, s)?)))
    }

    fn has_norm(&self, layer: usize) -> bool {
        layer > 0 && layer + 1 < self.widths.len()
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Discriminator { config })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn init_params(&self, seed: u64) -> ParamTree {
        let mut init = Initializer::new(seed);
        let mut c_in = 6;
        for (i, &c_out) in self.config.widths.iter().enumerate() {
            let layer = format!("discriminator/layer{}", i + 1);
            init.conv(&format!("{layer}/conv"), c_in, c_out, self.config.kernel);
            if self.config.has_norm(i) {
                init.norm(&format!("{layer}/norm"), c_out);
            }
            c_in = c_out;
        }
        init.tree
    }

    /// Record `D(condition, candidate)`, returning a `(1, h, w)` logit map.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        condition: &Var,
        candidate: &Var,
    ) -> Result<Var> {
        if condition.shape() != candidate.shape() {
            return Err(Error::shape(
                "discriminator",
                format!(
                    "condition {:?} vs candidate {:?}",
                    condition.shape(),
                    candidate.shape()
                ),
            ));
        }
        let (_, h, w) = condition.value().chw()?;
        if self.config.output_size(h, w).is_none() {
            return Err(Error::shape(
                "discriminator",
                format!("input {h}x{w} too small for {} layers", self.config.widths.len()),
            ));
        }
        let mut x = g.concat_channels(&[condition, candidate])?;
        let last = self.config.widths.len() - 1;
        for (i, &stride) in self.config.strides.iter().enumerate() {
            let layer = format!("discriminator/layer{}", i + 1);
            let w = p.get(&format!("{layer}/conv/weight"))?;
            let b = p.get(&format!("{layer}/conv/bias"))?;
            x = g.conv2d(&x, w, b, stride, self.config.pad)?;
            if self.config.has_norm(i) {
                let gain = p.get(&format!("{layer}/norm/gain"))?;
                let shift = p.get(&format!("{layer}/norm/shift"))?;
                x = g.channel_norm(&x, gain, shift, self.config.eps)?;
            }
            if i < last {
                x = g.leaky_relu(&x, self.config.slope)?;
            }
        }
        Ok(x)
    }

    /// Patch logits without recording.
    pub fn logits(
        &self,
        params: &ParamTree,
        condition: &Tensor,
        candidate: &Tensor,
        mode: NumericMode,
    ) -> Result<Tensor> {
        let mut g = Graph::inference(mode);
        let p = g.bind(params, false);
        let c = g.constant(condition.clone());
        let x = g.constant(candidate.clone());
        Ok(self.forward(&mut g, &p, &c, &x)?.value().clone())
    }

    /// Mean patch probability of "real".
    pub fn probability(
        &self,
        params: &ParamTree,
        condition: &Tensor,
        candidate: &Tensor,
    ) -> Result<f64> {
        let logits = self.logits(params, condition, candidate, NumericMode::Exact)?;
        Ok(ops::sigmoid(&logits).mean())
    }
}
