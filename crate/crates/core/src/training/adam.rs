use crate::error::{Error, Result};
use crate::tensor::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one parameter partition.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected step. Parameters without an entry in `grads`
    /// are treated as having zero gradient.
    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Validation(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(name, p.shape(), g.shape()));
            }
        }
        for (name, p) in params.iter() {
            let ok = self.m.get(name).is_some_and(|m| m.shape() == p.shape())
                && self.v.get(name).is_some_and(|v| v.shape() == p.shape());
            if !ok {
                return Err(Error::Validation(format!("optimizer moments do not match parameter {name}")));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).map(|g| g.data());
            let m = self.m.expect_mut(name).data_mut();
            let v = self.v.expect_mut(name).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.data_mut()[i] -= step;
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::update`].
pub fn adam_update(state: &mut OptimizerState, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
    state.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn first_step_identity() {
        let mut params = scalar("w", 0.0);
        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        opt.update(&mut params, &scalar("w", 1.0)).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w + 0.0002 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut params = scalar("w", 0.3);
        let mut fresh = OptimizerState::new(AdamConfig::default(), &params);
        fresh.update(&mut params, &scalar("w", 0.0)).unwrap();
        assert_eq!(params.get("w").unwrap().data()[0], 0.3);

        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        opt.update(&mut params, &scalar("w", 2.0)).unwrap();
        let (m, v) = (opt.m.get("w").unwrap().data()[0], opt.v.get("w").unwrap().data()[0]);
        opt.update(&mut params, &scalar("w", 0.0)).unwrap();
        assert_eq!(opt.m.get("w").unwrap().data()[0], 0.5 * m);
        assert_eq!(opt.v.get("w").unwrap().data()[0], 0.999 * v);
    }

    /// Textbook scalar Adam written independently of the implementation.
    fn reference(w0: f64, grad: impl Fn(f64) -> f64, steps: usize) -> f64 {
        let (lr, b1, b2, eps) = (0.0002_f64, 0.5_f64, 0.999_f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let (mut p1, mut p2) = (1.0, 1.0);
        for _ in 0..steps {
            let g = grad(w);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            p1 *= b1;
            p2 *= b2;
            let mhat = m / (1.0 - p1);
            let vhat = v / (1.0 - p2);
            w -= lr * mhat / (vhat.sqrt() + eps);
        }
        w
    }

    #[test]
    fn quadratic_bowl_matches_reference() {
        let starts = [1.5, -0.7, 0.0, 3.0];
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(&[4], starts.to_vec()).unwrap());
        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            // f(w) = sum (w - 1)^2
            let g: Vec<f64> = params.get("w").unwrap().data().iter().map(|w| 2.0 * (w - 1.0)).collect();
            let mut grads = ParamSet::new();
            grads.insert("w", Tensor::from_vec(&[4], g).unwrap());
            adam_update(&mut opt, &mut params, &grads).unwrap();
        }
        for (i, &w0) in starts.iter().enumerate() {
            let expect = reference(w0, |w| 2.0 * (w - 1.0), 5);
            assert!((params.get("w").unwrap().data()[i] - expect).abs() <= 1e-12);
        }
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = scalar("w", 0.0);
        let mut opt = OptimizerState::new(AdamConfig::default(), &params);
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::zeros(&[2]));
        assert!(opt.update(&mut params, &grads).is_err());
        assert!(opt.update(&mut params, &scalar("other", 1.0)).is_err());
        assert_eq!(opt.step, 0);
    }
}
