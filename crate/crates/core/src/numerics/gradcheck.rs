//! Central finite-difference verification of the analytic gradients.

use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::ops::NumericMode;
use super::Tensor;
use crate::{Error, Result};

/// Outcome of comparing analytic and numeric derivatives.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Leaf name and flat index of the element with the largest relative error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Elements that only agreed at a smaller step (a kink inside `+-h`).
    pub refined: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} elements, max abs {:.3e}, max rel {:.3e} (tol {:.0e})",
            self.op, self.checked, self.max_abs_error, self.max_rel_error, self.tolerance
        )?;
        if self.refined > 0 {
            write!(f, ", {} refined", self.refined)?;
        }
        if let Some((name, idx)) = &self.worst {
            write!(f, ", worst at {name}[{idx}]")?;
        }
        Ok(())
    }
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub tolerance: f64,
    /// Check at most this many elements per leaf, chosen with `seed`.
    pub max_per_leaf: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator. Gradients below it
    /// are effectively held to an absolute tolerance of `floor * tolerance`.
    pub floor: f64,
    /// Retry a failing element at `h / 10` and `h / 100`. A correct gradient
    /// can disagree with the symmetric difference when a ReLU kink lies
    /// within the step; a wrong one disagrees at every step.
    pub refine: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            tolerance: 1e-4,
            max_per_leaf: None,
            seed: 0,
            floor: 1e-8,
            refine: false,
        }
    }
}

/// Compare reverse-mode gradients of the scalar produced by `f` against
/// `(f(x + h) - f(x - h)) / 2h` with `h = 1e-5 * max(1, |x|)`.
///
/// `f` receives one [`Var`] per entry of `leaves`, in order, and must return a
/// one-element tensor. The relative error of an element is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(
    op: &str,
    leaves: &[(String, Tensor)],
    settings: &GradCheck,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| graph.input(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    check_scalar(&loss, op)?;
    let grads = graph.backward(&loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference(NumericMode::Exact);
        let vs: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vs)?;
        check_scalar(&out, op)?;
        out.item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut current: Vec<Tensor> = leaves.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        op: op.to_string(),
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        refined: 0,
        tolerance: settings.tolerance,
    };
    for (li, (name, leaf)) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[li]);
        if !analytic.is_finite() {
            return Err(Error::NonFinite {
                tensor: format!("{op}: gradient of {name}"),
            });
        }
        let coords: Vec<usize> = match settings.max_per_leaf {
            Some(k) if k < leaf.numel() => {
                let mut c = index::sample(&mut rng, leaf.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..leaf.numel()).collect(),
        };
        for idx in coords {
            let x0 = leaf.data()[idx];
            let a = analytic.data()[idx];
            let base = 1e-5 * x0.abs().max(1.0);
            let steps: &[f64] = if settings.refine { &[1.0, 0.1, 0.01] } else { &[1.0] };
            let mut best: Option<(f64, f64)> = None;
            for (k, &scale) in steps.iter().enumerate() {
                let h = base * scale;
                current[li].data_mut()[idx] = x0 + h;
                let up = eval(&current)?;
                current[li].data_mut()[idx] = x0 - h;
                let down = eval(&current)?;
                current[li].data_mut()[idx] = x0;
                let numeric = (up - down) / (2.0 * h);
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(settings.floor);
                if best.is_none_or(|(_, r)| rel < r) {
                    best = Some((abs, rel));
                }
                if rel < settings.tolerance {
                    if k > 0 {
                        report.refined += 1;
                    }
                    break;
                }
            }
            let (abs, rel) = best.expect("at least one step");
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

fn check_scalar(v: &Var, op: &str) -> Result<()> {
    if v.value().numel() != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("{op} produced non-scalar shape {:?}", v.shape()),
        ));
    }
    if !v.value().is_finite() {
        return Err(Error::NonFinite {
            tensor: format!("{op}: loss"),
        });
    }
    Ok(())
}

/// Fixed random weights in `[-1, 1)` for collapsing a tensor output to a
/// scalar via `sum(weights * y)`.
pub fn projection_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(weights * y)` recorded on `g`.
pub fn project(g: &mut Graph, y: &Var, seed: u64) -> Result<Var> {
    let w = g.constant(projection_weights(y.shape(), seed));
    let prod = g.mul(y, &w)?;
    Ok(g.sum(&prod))
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // relu's kink: evaluate right at 0 where the one-sided rules disagree
        // with the symmetric difference.
        let leaves = vec![("x".to_string(), Tensor::zeros(&[1, 1, 1]))];
        let r = grad_check("relu@0", &leaves, &GradCheck::default(), |g, v| {
            let y = g.relu(&v[0]);
            Ok(g.sum(&y))
        })
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst, Some(("x".to_string(), 0)));
    }

    #[test]
    fn refinement_steps_past_nearby_kinks_only() {
        let relu_sum = |g: &mut Graph, v: &[Var]| {
            let y = g.relu(&v[0]);
            Ok(g.sum(&y))
        };
        let refine = GradCheck {
            refine: true,
            ..GradCheck::default()
        };
        // kink 3e-6 away: the default step straddles it, h / 10 does not
        let near = vec![("x".to_string(), Tensor::full(&[1, 1, 1], 3e-6))];
        assert!(!grad_check("near", &near, &GradCheck::default(), relu_sum).unwrap().passed());
        let r = grad_check("near", &near, &refine, relu_sum).unwrap();
        assert!(r.passed());
        assert_eq!(r.refined, 1);
        // exactly on the kink every step disagrees
        let on = vec![("x".to_string(), Tensor::zeros(&[1, 1, 1]))];
        assert!(!grad_check("on", &on, &refine, relu_sum).unwrap().passed());
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let leaves = vec![("x".to_string(), Tensor::ones(&[1, 2, 2]))];
        let r = grad_check("id", &leaves, &GradCheck::default(), |g, v| Ok(g.relu(&v[0])));
        assert!(r.is_err());
    }

    #[test]
    fn sampling_limits_checked_elements() {
        let leaves = vec![("x".to_string(), random_tensor(&[2, 4, 4], -1.0, 1.0, 3))];
        let settings = GradCheck {
            max_per_leaf: Some(5),
            ..GradCheck::default()
        };
        let r = grad_check("sigmoid", &leaves, &settings, |g, v| {
            let y = g.sigmoid(&v[0]);
            project(g, &y, 1)
        })
        .unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.passed(), "{r}");
    }
}
