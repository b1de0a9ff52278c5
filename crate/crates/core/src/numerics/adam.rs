use std::collections::BTreeMap;

use super::{NumericsError, ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<(), NumericsError> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!("bad Adam coefficients {self:?}")));
        }
        Ok(())
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            step_count: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
        }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(
        &mut self,
        cfg: &AdamConfig,
        param: &mut Tensor,
        grad: &Tensor,
        lr: f64,
    ) -> Result<(), NumericsError> {
        cfg.validate()?;
        if !lr.is_finite() || lr <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        for (what, t) in [("gradient", grad), ("first moment", &self.first_moment)] {
            if t.shape() != param.shape() {
                return Err(NumericsError::ShapeMismatch {
                    node: format!("adam {what}"),
                    expected: param.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if !grad.is_finite() {
            return Err(NumericsError::NonFinite {
                node: "adam gradient".into(),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Adam over a named parameter set; states are created on first use.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    lr: f64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self, NumericsError> {
        let mut adam = Self {
            config: AdamConfig::default(),
            lr: 1.0,
            states: BTreeMap::new(),
        };
        adam.set_lr(lr)?;
        Ok(adam)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<(), NumericsError> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// Updates every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(String, Tensor)]) -> Result<(), NumericsError> {
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownInput(name.clone()))?;
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(param.shape()));
            state.step(&self.config, param, grad, self.lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        for g in [0.3, -2.0, 1e-9] {
            let mut p = Tensor::scalar(1.0);
            let mut s = AdamState::new(&[1]);
            s.step(&cfg, &mut p, &Tensor::scalar(g), 0.01).unwrap();
            let expected = 0.01 * g.abs() / (g.abs() + cfg.eps);
            assert!(((1.0 - p.data()[0]).abs() - expected).abs() < 1e-15);
            assert_eq!(s.step_count, 1);
        }
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut p = Tensor::scalar(1.0);
        let mut s = AdamState::new(&[1]);
        for lr in [0.0, -1.0, f64::NAN] {
            assert!(s.step(&AdamConfig::default(), &mut p, &Tensor::scalar(1.0), lr).is_err());
        }
        assert!(Adam::new(0.0).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut s = AdamState::new(&[2]);
        assert!(s.step(&AdamConfig::default(), &mut p, &Tensor::zeros(&[3]), 0.1).is_err());
    }

    #[test]
    fn defaults() {
        let cfg = AdamConfig::default();
        assert_eq!((cfg.beta1, cfg.beta2, cfg.eps), (0.9, 0.999, 1e-8));
    }
}
