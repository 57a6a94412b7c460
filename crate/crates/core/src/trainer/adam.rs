use crate::attention_net::{GradTree, ParamTree};
use crate::{Error, Result};

/// Step size and moment decay rates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamTree,
    pub v: ParamTree,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamTree) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
///
/// Parameters and both moments are rounded to `f32` afterwards so that the
/// in-memory state equals what a checkpoint stores.
pub fn adam_step(
    params: &mut ParamTree,
    grads: &GradTree,
    opt: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_mirrors(grads)?;
    params.check_mirrors(&opt.m)?;
    params.check_mirrors(&opt.v)?;
    opt.t += 1;
    let bc1 = 1.0 - cfg.beta1.powf(opt.t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(opt.t as f64);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?;
        let m = opt.m.get_mut(name)?;
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        m.round_to_f32();
        let v = opt.v.get_mut(name)?;
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        v.round_to_f32();
        let (m, v) = (opt.m.get(name)?, opt.v.get(name)?);
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.round_to_f32();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn cfg() -> AdamConfig {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn tree(values: Vec<f64>) -> ParamTree {
        let mut t = ParamTree::new();
        let n = values.len();
        t.insert("w", Tensor::new(&[n], values).unwrap());
        t
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = tree(vec![0.25, -1.5, 3.0]);
        let before = p.clone();
        let mut opt = OptimizerState::new(&p);
        let zeros = p.zeros_like();
        for _ in 0..25 {
            adam_step(&mut p, &zeros, &mut opt, &cfg()).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.t, 25);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = tree(vec![0.0; 4]);
        let mut opt = OptimizerState::new(&p);
        let g = tree(vec![0.3, -2.0, 1e-3, -7.5]);
        adam_step(&mut p, &g, &mut opt, &cfg()).unwrap();
        for (&pi, &gi) in p.get("w").unwrap().data().iter().zip(g.get("w").unwrap().data()) {
            let expect = -4e-4 * gi.signum();
            assert!((pi - expect).abs() < 1e-8, "{pi} vs {expect}");
        }
    }

    #[test]
    fn constant_positive_gradient_descends() {
        let mut p = tree(vec![1.0]);
        let mut opt = OptimizerState::new(&p);
        let g = tree(vec![0.7]);
        let mut last = 1.0;
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut opt, &cfg()).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(now < last);
            last = now;
        }
        assert!(opt.v.get("w").unwrap().data()[0] >= 0.0);
    }

    #[test]
    fn mismatched_trees_rejected() {
        let mut p = tree(vec![1.0, 2.0]);
        let mut opt = OptimizerState::new(&p);
        assert!(adam_step(&mut p, &tree(vec![1.0]), &mut opt, &cfg()).is_err());
        let bad = AdamConfig { lr: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
    }
}
