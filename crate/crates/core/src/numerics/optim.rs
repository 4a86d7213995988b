use crate::error::{invalid, Error, Result};

/// Classical momentum SGD: `v <- mu * v + g; w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, n: usize) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", lr)));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", momentum)));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: vec![0.0; n],
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.velocity.len() {
            return Err(crate::error::shape(format!(
                "sgd step: {} params, {} grads, {} velocity slots",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {}", i)));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// Adam with bias correction; `beta1` plays the role of momentum.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, n: usize) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", lr)));
        }
        if !(0.0..1.0).contains(&beta1) {
            return Err(invalid(format!("beta1 must lie in [0, 1), got {}", beta1)));
        }
        Ok(Self {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || grads.len() != self.m.len() {
            return Err(crate::error::shape(format!(
                "adam step: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient coordinate {}", i)));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Single stateless step (zero initial velocity).
pub fn sgd_step(params: &[f64], grads: &[f64], lr: f64, momentum: f64) -> Result<Vec<f64>> {
    let mut opt = Sgd::new(lr, momentum, params.len())?;
    let mut out = params.to_vec();
    opt.step(&mut out, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_noop() {
        let p = [1.0, -2.0];
        assert_eq!(sgd_step(&p, &[5.0, 7.0], 0.0, 0.9).unwrap(), p.to_vec());
    }

    #[test]
    fn unit_lr_subtracts_gradient() {
        assert_eq!(sgd_step(&[1.0, 2.0], &[0.5, -1.0], 1.0, 0.0).unwrap(), vec![0.5, 3.0]);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut opt = Sgd::new(0.1, 0.0, 1).unwrap();
        let mut w = [0.0];
        for _ in 0..100 {
            let g = [2.0 * (w[0] - 3.0)];
            opt.step(&mut w, &g).unwrap();
        }
        // Contraction factor 0.8 per step: |w - 3| = 3 * 0.8^100.
        assert!((w[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_has_unit_magnitude() {
        let mut opt = Adam::new(0.01, 0.9, 2).unwrap();
        let mut w = [0.0, 0.0];
        opt.step(&mut w, &[1e6, -1e-3]).unwrap();
        assert!((w[0] + 0.01).abs() < 1e-9 && (w[1] - 0.01).abs() < 1e-6, "{:?}", w);
    }

    #[test]
    fn adam_converges_on_badly_scaled_quadratic() {
        let mut opt = Adam::new(0.05, 0.9, 2).unwrap();
        let mut w = [0.0, 0.0];
        for _ in 0..2000 {
            let g = [2e4 * (w[0] - 1.0), 2e-2 * (w[1] + 1.0)];
            opt.step(&mut w, &g).unwrap();
        }
        assert!((w[0] - 1.0).abs() < 1e-3 && (w[1] + 1.0).abs() < 1e-2, "{:?}", w);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        assert!(sgd_step(&[1.0], &[f64::NAN], 0.1, 0.0).is_err());
        assert!(sgd_step(&[1.0], &[f64::INFINITY], 0.1, 0.0).is_err());
    }
}
