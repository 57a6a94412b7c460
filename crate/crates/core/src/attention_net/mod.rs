//! Generator with spatial attentive blocks and the conditional discriminator.

mod discriminator;
mod generator;
mod params;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{
    directional_sweep, residual_block, sab_forward, sam_forward, sarb_forward, Generator,
    GeneratorConfig, GeneratorOutput, MIN_GENERATOR_SIZE,
};
pub use params::{GradTree, ParamTree};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Per-pixel attention, shape `(1, H, W)`, values in `[0, 1]`.
///
/// Sigmoid outputs lie strictly inside the interval; in `f64` they only reach
/// the endpoints for logits beyond roughly ±37.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != 1 {
            return Err(Error::shape(
                "attention map",
                format!("expected one channel, got {c}"),
            ));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "attention value {v} outside [0, 1]"
            )));
        }
        Ok(AttentionMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.data()[y * self.width() + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::random_tensor;
    use crate::numerics::{Graph, NumericMode};

    fn small() -> (Generator, ParamTree) {
        let gen = Generator::new(GeneratorConfig::with_width(8)).unwrap();
        let params = gen.init_params(11);
        (gen, params)
    }

    #[test]
    fn default_configs_mirror_reference_layout() {
        let c = GeneratorConfig::default();
        assert_eq!(
            (c.base_width, c.n_pre_res, c.n_sab, c.n_post_res, c.sarbs_per_sab),
            (32, 3, 4, 2, 3)
        );
        let d = DiscriminatorConfig::default();
        assert_eq!(d.widths, vec![64, 128, 256, 512, 1]);
        assert_eq!(d.strides, vec![2, 2, 2, 1, 1]);
        assert!(GeneratorConfig {
            n_sab: 0,
            ..GeneratorConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn init_is_deterministic_and_irnn_starts_at_identity() {
        let gen = Generator::new(GeneratorConfig::default()).unwrap();
        let a = gen.init_params(5);
        let b = gen.init_params(5);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), gen.init_params(6).fingerprint());
        let recurrent: Vec<_> = a.iter().filter(|(n, _)| n.ends_with("/recurrent")).collect();
        assert_eq!(recurrent.len(), 4 * 2 * 4);
        for (_, t) in recurrent {
            assert_eq!(t, &Tensor::eye(32));
        }
        assert!(a.contains("generator/sab2/sam/round1/dir_left/recurrent"));
    }

    #[test]
    fn generator_param_count_golden() {
        // conv3x3(cin, cout) = 9 cin cout + cout; the attentive module adds a
        // 1x1 entry conv, two rounds of four CxC recurrences plus a 4C->C
        // fuse, and a C->1 head.
        let count = |c: usize| {
            let conv3 = |i: usize, o: usize| 9 * i * o + o;
            let conv1 = |i: usize, o: usize| i * o + o;
            let sam = conv1(c, c) + 2 * (4 * c * c + conv1(4 * c, c)) + conv1(c, 1);
            conv3(3, c) + (3 + 2) * 2 * conv3(c, c) + 4 * (sam + 3 * 2 * conv3(c, c)) + conv3(c, 3)
        };
        let gen = Generator::new(GeneratorConfig::default()).unwrap();
        assert_eq!(gen.init_params(0).param_count(), count(32));
        assert_eq!(count(32), 386_343);
        assert_eq!(small().1.param_count(), 24_783);

        let disc = Discriminator::new(DiscriminatorConfig::default()).unwrap();
        assert_eq!(disc.init_params(0).param_count(), 2_769_601);
    }

    #[test]
    fn generator_shapes_and_residual_identity() {
        let (gen, mut params) = small();
        let img = random_tensor(&[3, 12, 9], 0.0, 1.0, 2);
        let (out, maps) = gen.infer(&params, &img, NumericMode::Exact).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert_eq!(maps.len(), 4);
        for m in &maps {
            assert_eq!(m.tensor().shape(), &[1, 12, 9]);
            assert!(m.tensor().data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
        // zero attention heads start every map at one half
        assert!(maps.iter().all(|m| m.tensor().data().iter().all(|&a| a == 0.5)));
        for s in 1..=4 {
            let name = format!("generator/sab{s}/sam/conv_out/weight");
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.insert(name, random_tensor(&shape, -0.01, 0.01, s as u64));
        }
        let (_, maps) = gen.infer(&params, &img, NumericMode::Exact).unwrap();
        for m in &maps {
            assert!(m.tensor().data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
        // with non-zero heads the four stages produce distinct maps
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(maps[i], maps[j]);
            }
        }

        for name in ["generator/conv_out/weight", "generator/conv_out/bias"] {
            params.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let (out, _) = gen.infer(&params, &img, NumericMode::Exact).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn generator_rejects_bad_images() {
        let (gen, params) = small();
        assert!(gen
            .infer(&params, &Tensor::zeros(&[3, 7, 16]), NumericMode::Exact)
            .is_err());
        assert!(gen
            .infer(&params, &Tensor::zeros(&[4, 16, 16]), NumericMode::Exact)
            .is_err());
    }

    #[test]
    fn sam_on_zero_features_is_one_half() {
        let (_, params) = small();
        let mut g = Graph::inference(NumericMode::Exact);
        let p = g.bind(&params, false);
        let x = g.constant(Tensor::zeros(&[8, 8, 8]));
        let map = sam_forward(&mut g, &p, "generator/sab1/sam", &x).unwrap();
        assert!(map.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sarb_reductions() {
        let (_, mut params) = small();
        let feats = random_tensor(&[8, 8, 8], -1.0, 1.0, 4);
        let run = |params: &ParamTree, att: Tensor| {
            let mut g = Graph::inference(NumericMode::Exact);
            let p = g.bind(params, false);
            let x = g.constant(feats.clone());
            let a = g.constant(att);
            sarb_forward(&mut g, &p, "generator/sab1/sarb1", &x, &a)
                .unwrap()
                .value()
                .clone()
        };
        assert_eq!(run(&params, Tensor::zeros(&[1, 8, 8])), feats);

        let plain = {
            let mut g = Graph::inference(NumericMode::Exact);
            let p = g.bind(&params, false);
            let x = g.constant(feats.clone());
            residual_block(&mut g, &p, "generator/sab1/sarb1", &x)
                .unwrap()
                .value()
                .clone()
        };
        assert_eq!(run(&params, Tensor::ones(&[1, 8, 8])), plain);

        for conv in ["conv1", "conv2"] {
            for part in ["weight", "bias"] {
                params
                    .get_mut(&format!("generator/sab1/sarb1/{conv}/{part}"))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
        assert_eq!(run(&params, random_tensor(&[1, 8, 8], 0.0, 1.0, 9)), feats);
    }

    #[test]
    fn sab_passes_features_when_branches_are_zero() {
        let (_, mut params) = small();
        let names: Vec<String> = params
            .names()
            .filter(|n| n.starts_with("generator/sab1/sarb"))
            .map(String::from)
            .collect();
        for n in names {
            params.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let feats = random_tensor(&[8, 10, 10], -1.0, 1.0, 4);
        let mut g = Graph::inference(NumericMode::Exact);
        let p = g.bind(&params, false);
        let x = g.constant(feats.clone());
        let (y, map) = sab_forward(&mut g, &p, "generator/sab1", &x, 3).unwrap();
        assert_eq!(y.value(), &feats);
        assert_eq!(map.shape(), &[1, 10, 10]);
    }

    #[test]
    fn discriminator_patch_geometry() {
        let disc = Discriminator::new(DiscriminatorConfig::default()).unwrap();
        // 64 -> 32 -> 16 -> 8 (stride 2), then 8 -> 7 -> 6 (stride 1, pad 1, k 4)
        assert_eq!(disc.config().output_size(64, 64), Some((6, 6)));
        assert_eq!(disc.config().output_size(16, 16), None);

        let small = Discriminator::new(DiscriminatorConfig::with_base_width(4)).unwrap();
        let params = small.init_params(1);
        let a = random_tensor(&[3, 64, 64], 0.0, 1.0, 1);
        let b = random_tensor(&[3, 64, 64], 0.0, 1.0, 2);
        let l1 = small.logits(&params, &a, &b, NumericMode::Exact).unwrap();
        let l2 = small.logits(&params, &b, &a, NumericMode::Exact).unwrap();
        assert_eq!(l1.shape(), &[1, 6, 6]);
        assert_eq!(l2.shape(), &[1, 6, 6]);

        let zero = params.zeros_like();
        assert_eq!(small.probability(&zero, &a, &b).unwrap(), 0.5);
        assert!(small
            .logits(&params, &a, &random_tensor(&[3, 32, 64], 0.0, 1.0, 3), NumericMode::Exact)
            .is_err());
    }

    #[test]
    fn attention_map_validation() {
        assert!(AttentionMap::new(Tensor::full(&[1, 2, 2], 0.3)).is_ok());
        assert!(AttentionMap::new(Tensor::full(&[2, 2, 2], 0.3)).is_err());
        assert!(AttentionMap::new(Tensor::full(&[1, 2, 2], 1.5)).is_err());
    }
}
