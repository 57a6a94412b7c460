//! Attentive generator: feature conv, plain residual blocks, spatial
//! attentive blocks and a residual image head.

use super::params::{Initializer, ParamTree};
use super::AttentionMap;
use crate::numerics::{BoundParams, Direction, Graph, NumericMode, Tensor, Var};
use crate::{Error, Result};

/// Generator layout. Defaults follow the reference architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_width: usize,
    pub n_pre_res: usize,
    pub n_sab: usize,
    pub n_post_res: usize,
    pub sarbs_per_sab: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_width: 32,
            n_pre_res: 3,
            n_sab: 4,
            n_post_res: 2,
            sarbs_per_sab: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn with_width(base_width: usize) -> Self {
        GeneratorConfig {
            base_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("base_width", self.base_width),
            ("n_pre_res", self.n_pre_res),
            ("n_sab", self.n_sab),
            ("n_post_res", self.n_post_res),
            ("sarbs_per_sab", self.sarbs_per_sab),
        ];
        match counts.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(Error::InvalidArgument(format!(
                "generator {name} must be >= 1"
            ))),
            None => Ok(()),
        }
    }
}

/// Smallest spatial size the generator accepts.
pub const MIN_GENERATOR_SIZE: usize = 8;

/// Result of a generator pass recorded on a [`Graph`].
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub output: Var,
    /// One attention map per attentive block, in network order.
    pub maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Generator { config })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn init_params(&self, seed: u64) -> ParamTree {
        let c = self.config.base_width;
        let mut init = Initializer::new(seed);
        init.conv("generator/conv_in", 3, c, 3);
        for i in 1..=self.config.n_pre_res {
            residual_params(&mut init, &format!("generator/pre_res{i}"), c);
        }
        for s in 1..=self.config.n_sab {
            let sab = format!("generator/sab{s}");
            sam_params(&mut init, &format!("{sab}/sam"), c);
            for j in 1..=self.config.sarbs_per_sab {
                residual_params(&mut init, &format!("{sab}/sarb{j}"), c);
            }
        }
        for i in 1..=self.config.n_post_res {
            residual_params(&mut init, &format!("generator/post_res{i}"), c);
        }
        init.conv("generator/conv_out", c, 3, 3);
        init.tree
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (c, h, w) = image.chw()?;
        if c != 3 {
            return Err(Error::shape(
                "generator",
                format!("expected 3 image channels, got {c}"),
            ));
        }
        if h < MIN_GENERATOR_SIZE || w < MIN_GENERATOR_SIZE {
            return Err(Error::shape(
                "generator",
                format!("image {h}x{w} is smaller than {MIN_GENERATOR_SIZE}x{MIN_GENERATOR_SIZE}"),
            ));
        }
        Ok(())
    }

    /// Record a forward pass: `output = image + head(features)`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, image: &Var) -> Result<GeneratorOutput> {
        self.check_image(image.value())?;
        let mut x = conv(g, p, "generator/conv_in", image, 1)?;
        for i in 1..=self.config.n_pre_res {
            x = residual_block(g, p, &format!("generator/pre_res{i}"), &x)?;
        }
        let mut maps = Vec::with_capacity(self.config.n_sab);
        for s in 1..=self.config.n_sab {
            let (y, map) = sab_forward(
                g,
                p,
                &format!("generator/sab{s}"),
                &x,
                self.config.sarbs_per_sab,
            )?;
            x = y;
            maps.push(map);
        }
        for i in 1..=self.config.n_post_res {
            x = residual_block(g, p, &format!("generator/post_res{i}"), &x)?;
        }
        let residual = conv(g, p, "generator/conv_out", &x, 1)?;
        let output = g.add(image, &residual)?;
        Ok(GeneratorOutput { output, maps })
    }

    /// Forward pass without recording. Returns the raw (unclamped) output
    /// and the attention maps.
    pub fn infer(
        &self,
        params: &ParamTree,
        image: &Tensor,
        mode: NumericMode,
    ) -> Result<(Tensor, Vec<AttentionMap>)> {
        let mut g = Graph::inference(mode);
        let p = g.bind(params, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, &x)?;
        let maps = out
            .maps
            .iter()
            .map(|m| AttentionMap::new(m.value().clone()))
            .collect::<Result<_>>()?;
        Ok((out.output.value().clone(), maps))
    }
}

fn residual_params(init: &mut Initializer, prefix: &str, c: usize) {
    init.conv(&format!("{prefix}/conv1"), c, c, 3);
    init.conv(&format!("{prefix}/conv2"), c, c, 3);
}

fn sam_params(init: &mut Initializer, prefix: &str, c: usize) {
    init.conv(&format!("{prefix}/conv_in"), c, c, 1);
    for r in 1..=2 {
        for dir in Direction::ALL {
            init.recurrent(&format!("{prefix}/round{r}/dir_{}", dir.name()), c);
        }
        init.conv(&format!("{prefix}/round{r}/fuse"), 4 * c, c, 1);
    }
    init.conv(&format!("{prefix}/conv_out"), c, 1, 1);
    // Identity recurrences make the swept features grow with image size, so a
    // random head would start with saturated maps. A zero head starts every
    // map at exactly 0.5.
    if let Ok(w) = init.tree.get_mut(&format!("{prefix}/conv_out/weight")) {
        w.data_mut().fill(0.0);
    }
}

/// Same-padded convolution using `{name}/weight` and `{name}/bias`.
pub(crate) fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: &Var, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}/weight"))?;
    let b = p.get(&format!("{name}/bias"))?;
    g.conv2d(x, w, b, 1, pad)
}

/// `conv3x3 -> relu -> conv3x3`.
fn residual_branch(g: &mut Graph, p: &BoundParams, prefix: &str, x: &Var) -> Result<Var> {
    let h = conv(g, p, &format!("{prefix}/conv1"), x, 1)?;
    let h = g.relu(&h);
    conv(g, p, &format!("{prefix}/conv2"), &h, 1)
}

/// Plain residual block `x + branch(x)`.
pub fn residual_block(g: &mut Graph, p: &BoundParams, prefix: &str, x: &Var) -> Result<Var> {
    let b = residual_branch(g, p, prefix, x)?;
    g.add(x, &b)
}

/// One directional recurrence with the `{prefix}/recurrent` weight.
pub fn directional_sweep(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    x: &Var,
    dir: Direction,
) -> Result<Var> {
    let w = p.get(&format!("{prefix}/recurrent"))?;
    g.directional_sweep(x, w, dir)
}

/// Spatial attentive module: 1x1 conv, two rounds of four-direction
/// recurrence (each fused back to `C` channels by a 1x1 conv), then a 1x1
/// conv to one channel and a sigmoid.
pub fn sam_forward(g: &mut Graph, p: &BoundParams, prefix: &str, features: &Var) -> Result<Var> {
    let mut x = conv(g, p, &format!("{prefix}/conv_in"), features, 0)?;
    for r in 1..=2 {
        let round = format!("{prefix}/round{r}");
        let sweeps = Direction::ALL
            .iter()
            .map(|&dir| directional_sweep(g, p, &format!("{round}/dir_{}", dir.name()), &x, dir))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var> = sweeps.iter().collect();
        let joined = g.concat_channels(&refs)?;
        x = conv(g, p, &format!("{round}/fuse"), &joined, 0)?;
    }
    let logits = conv(g, p, &format!("{prefix}/conv_out"), &x, 0)?;
    Ok(g.sigmoid(&logits))
}

/// Spatial attentive residual block `x + attention * branch(x)`.
pub fn sarb_forward(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    features: &Var,
    attention: &Var,
) -> Result<Var> {
    let (_, h, w) = features.value().chw()?;
    if attention.shape() != [1, h, w] {
        return Err(Error::shape(
            "sarb",
            format!(
                "attention {:?} does not match features {:?}",
                attention.shape(),
                features.shape()
            ),
        ));
    }
    let b = residual_branch(g, p, prefix, features)?;
    let gated = g.mul(&b, attention)?;
    g.add(features, &gated)
}

/// Spatial attentive block: the module computes one map from the block
/// input, then `n_sarb` attentive residual blocks run in sequence under it.
pub fn sab_forward(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    features: &Var,
    n_sarb: usize,
) -> Result<(Var, Var)> {
    let map = sam_forward(g, p, &format!("{prefix}/sam"), features)?;
    let mut x = features.clone();
    for j in 1..=n_sarb {
        x = sarb_forward(g, p, &format!("{prefix}/sarb{j}"), &x, &map)?;
    }
    Ok((x, map))
}
