use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step-based learning-rate schedule: multiply by `factor` at each
/// milestone.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Optimizer steps (1-based) from which each decay applies.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            milestones: Vec::new(),
            factor: 0.1,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|&&m| step >= m)
            .fold(self.base, |lr, _| lr * self.factor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Variance rectification; off gives the plain adaptive-moment update.
    pub rectify: bool,
    /// Smallest rectification term at which the adaptive step is used.
    pub rho_threshold: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            schedule: LrSchedule::constant(1e-3),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rectify: true,
            rho_threshold: 5.0,
        }
    }
}

/// Rectified adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: usize,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.schedule.base > 0.0) || !(config.schedule.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(OptimizerState {
            config,
            step: 0,
            moments: IndexMap::new(),
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.config.schedule.at(self.step + 1)
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut IndexMap<String, Tensor>, grads: &IndexMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!("`{name}`: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "non-finite gradient {} at index {bad} of `{name}` (step {})",
                    g.data()[bad],
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let lr = c.schedule.at(self.step);
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        let adaptive_scale = if c.rectify {
            let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
            let rho_t = rho_inf - 2.0 * t * c.beta2.powf(t) / bias2;
            (rho_t >= c.rho_threshold).then(|| {
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
            })
        } else {
            Some(1.0)
        };

        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                *w -= match adaptive_scale {
                    Some(r) => lr * r * m_hat / ((*vi / bias2).sqrt() + c.eps),
                    None => lr * m_hat,
                };
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(x: f64) -> (IndexMap<String, Tensor>, IndexMap<String, Tensor>) {
        let p: IndexMap<_, _> = [("w".to_string(), Tensor::scalar(x))].into_iter().collect();
        let g: IndexMap<_, _> = [("w".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        (p, g)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = OptimizerState::new(OptimizerConfig::default()).unwrap();
        let (mut p, mut g) = scalar_problem(0.5);
        g["w"] = Tensor::scalar(0.0);
        for _ in 0..10 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p["w"].data()[0], 0.5);
    }

    #[test]
    fn early_steps_use_momentum_update() {
        // rho_1 = 1, rho_2 ~ 2.0, rho_3 ~ 3.0: all below 5, so each step
        // moves by lr * m_hat = lr exactly.
        let mut opt = OptimizerState::new(OptimizerConfig::default()).unwrap();
        let (mut p, g) = scalar_problem(0.0);
        let mut expected = 0.0;
        for _ in 0..3 {
            opt.step(&mut p, &g).unwrap();
            expected -= 1e-3;
            assert!((p["w"].data()[0] - expected).abs() < 1e-18);
        }
    }

    #[test]
    fn unrectified_matches_adam() {
        let cfg = OptimizerConfig {
            rectify: false,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg).unwrap();
        let (mut p, g) = scalar_problem(0.0);
        opt.step(&mut p, &g).unwrap();
        assert!((p["w"].data()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn schedule_divides_by_ten() {
        let s = LrSchedule {
            base: 1e-3,
            milestones: vec![5, 8],
            factor: 0.1,
        };
        assert_eq!(s.at(4), 1e-3);
        assert_eq!(s.at(5), 1e-3 * 0.1);
        assert_eq!(s.at(8), 1e-3 * 0.1 * 0.1);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut opt = OptimizerState::new(OptimizerConfig::default()).unwrap();
        let (mut p, mut g) = scalar_problem(0.0);
        g["w"] = Tensor::scalar(f64::NAN);
        assert!(opt.step(&mut p, &g).is_err());
        assert_eq!(opt.steps(), 0);
    }
}
