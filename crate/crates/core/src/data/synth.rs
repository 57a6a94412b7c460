//! Seeded synthetic cloudy/cloudless pairs.
//!
//! The ground texture is multi-octave value noise; the cloud layer is a
//! smoothed threshold of a second fractal noise field, composited over the
//! texture towards a fixed white level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CloudMask, ImageU8, Sample};
use crate::{Error, Result};

/// Colour the cloud layer blends towards.
pub const CLOUD_WHITE: [f64; 3] = [245.0, 245.0, 245.0];
/// Alpha above which a synthetic pixel is labelled cloud.
pub const SYNTH_MASK_ALPHA: f64 = 30.0 / 255.0;
/// Alpha level at which coverage is measured.
pub const COVERAGE_ALPHA: f64 = 0.1;
pub const MIN_SYNTH_SIZE: usize = 16;

/// Intermediate pieces of a synthetic sample.
#[derive(Clone, Debug)]
pub struct SynthComponents {
    pub cloudless: ImageU8,
    /// Row-major cloud opacity in `[0, 1)`.
    pub alpha: Vec<f64>,
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

fn smoothstep_inverse(y: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if smoothstep(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fractal value noise in `[0, 1]` on a `size x size` grid.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, base_cells: usize, octaves: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let mut amp = 1.0;
    let mut total_amp = 0.0;
    for o in 0..octaves {
        let cells = base_cells << o;
        let side = cells + 1;
        let lattice: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
        for y in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..size {
                let fx = x as f64 / size as f64 * cells as f64;
                let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let at = |j: usize, i: usize| lattice[j * side + i];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out[y * size + x] += amp * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total_amp += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total_amp);
    out
}

/// Draw the ground texture and cloud opacity for `seed`.
pub fn synth_components(seed: u64, size: usize) -> Result<SynthComponents> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "synthetic size must be >= {MIN_SYNTH_SIZE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let base = value_noise(&mut rng, size, 3, 4);
    let tint: Vec<Vec<f64>> = (0..3).map(|_| value_noise(&mut rng, size, 2, 3)).collect();
    let palette: [f64; 3] = [
        rng.random_range(0.6..1.0),
        rng.random_range(0.6..1.0),
        rng.random_range(0.5..0.9),
    ];
    let mut ground = vec![0u8; size * size * 3];
    for i in 0..size * size {
        for c in 0..3 {
            let v = 0.08 + 0.75 * palette[c] * (0.7 * base[i] + 0.3 * tint[c][i]);
            ground[i * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }

    let field = value_noise(&mut rng, size, 2, 5);
    let coverage: f64 = rng.random_range(0.25..0.5);
    let peak: f64 = rng.random_range(0.5..0.85);
    let ramp = 0.25;
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let q = sorted[((1.0 - coverage) * sorted.len() as f64) as usize];
    // alpha > COVERAGE_ALPHA exactly where field > q
    let threshold = q - ramp * smoothstep_inverse(COVERAGE_ALPHA / peak);
    let alpha = field
        .iter()
        .map(|&f| peak * smoothstep(((f - threshold) / ramp).clamp(0.0, 1.0)))
        .collect();

    Ok(SynthComponents {
        cloudless: ImageU8::new(size, size, ground)?,
        alpha,
    })
}

/// Blend `cloudless` towards [`CLOUD_WHITE`] by `alpha` and derive the mask.
pub fn composite(cloudless: &ImageU8, alpha: &[f64]) -> Result<(ImageU8, CloudMask)> {
    let (w, h) = (cloudless.width(), cloudless.height());
    if alpha.len() != w * h {
        return Err(Error::shape(
            "composite",
            format!("{} alpha values for {w}x{h}", alpha.len()),
        ));
    }
    let mut cloudy = cloudless.clone();
    for (i, &a) in alpha.iter().enumerate() {
        for c in 0..3 {
            let v = cloudless.data()[i * 3 + c] as f64;
            cloudy.data_mut()[i * 3 + c] = ((1.0 - a) * v + a * CLOUD_WHITE[c]).round() as u8;
        }
    }
    let mask = alpha.iter().map(|&a| u8::from(a > SYNTH_MASK_ALPHA)).collect();
    Ok((cloudy, CloudMask::new(w, h, mask)?))
}

/// A fully seeded synthetic sample of side `size`.
pub fn synth_pair(seed: u64, size: usize) -> Result<Sample> {
    let parts = synth_components(seed, size)?;
    let (cloudy, mask) = composite(&parts.cloudless, &parts.alpha)?;
    Ok(Sample {
        id: format!("synth{seed}"),
        cloudy,
        cloudless: parts.cloudless,
        mask: Some(mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(synth_pair(3, 32).unwrap(), synth_pair(3, 32).unwrap());
        assert_ne!(synth_pair(3, 32).unwrap().cloudy, synth_pair(4, 32).unwrap().cloudy);
        assert!(synth_pair(3, 15).is_err());
    }

    #[test]
    fn coverage_within_band() {
        for seed in 0..20 {
            let parts = synth_components(seed, 64).unwrap();
            let covered = parts.alpha.iter().filter(|&&a| a > COVERAGE_ALPHA).count() as f64
                / parts.alpha.len() as f64;
            assert!((0.2..=0.6).contains(&covered), "seed {seed}: {covered}");
            assert!(parts.alpha.iter().all(|&a| (0.0..0.9).contains(&a)));
        }
    }

    #[test]
    fn zero_alpha_leaves_ground_untouched() {
        let parts = synth_components(9, 32).unwrap();
        let (cloudy, mask) = composite(&parts.cloudless, &vec![0.0; 32 * 32]).unwrap();
        assert_eq!(cloudy, parts.cloudless);
        assert!(mask.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn compositing_inverts() {
        for seed in 0..10 {
            let parts = synth_components(seed, 48).unwrap();
            let (cloudy, _) = composite(&parts.cloudless, &parts.alpha).unwrap();
            for (i, &a) in parts.alpha.iter().enumerate() {
                for c in 0..3 {
                    let y = cloudy.data()[i * 3 + c] as f64;
                    let x = parts.cloudless.data()[i * 3 + c] as f64;
                    let rec = (y - a * CLOUD_WHITE[c]) / (1.0 - a);
                    // rounding the composite moves it by at most 1/2 level
                    let bound = 0.5 / (1.0 - a) + 1e-9;
                    assert!((rec - x).abs() <= bound, "seed {seed} px {i}: {rec} vs {x}");
                    if a <= 0.5 {
                        assert!((rec - x).abs() <= 1.0);
                    }
                }
            }
        }
    }
}
