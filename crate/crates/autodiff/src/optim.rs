//! First-order optimizers over named parameters.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::graph::GradMap;
use crate::tensor::Tensor;

/// Stochastic gradient descent with heavy-ball momentum.
///
/// `m ← μ·m + g`, `p ← p − lr·m`; the first step uses `m = g`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(AutodiffError::InvalidOptimizer(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(AutodiffError::InvalidOptimizer(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            buffers: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Momentum buffers keyed by parameter name.
    pub fn buffers(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.buffers
    }

    /// Updates every listed parameter. Fails without touching anything if a
    /// gradient is missing or has the wrong shape.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &GradMap) -> Result<()> {
        check_grads(params, grads)?;
        for (name, p) in params.iter_mut() {
            let g = &grads[*name];
            let m = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for ((pv, mv), gv) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(g.data()) {
                *mv = self.momentum * *mv + gv;
                *pv -= self.lr * *mv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(AutodiffError::InvalidOptimizer(format!("lr must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &GradMap) -> Result<()> {
        check_grads(params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[*name];
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data_mut()[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn check_grads(params: &[(&str, &mut Tensor)], grads: &GradMap) -> Result<()> {
    for (name, p) in params {
        match grads.get(*name) {
            None => return Err(AutodiffError::MissingGradient(name.to_string())),
            Some(g) if g.shape() != p.shape() => {
                return Err(AutodiffError::ShapeMismatch {
                    kind: "sgd_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                    detail: format!("gradient for `{name}` has the wrong shape"),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(name: &str, v: f64) -> GradMap {
        [(name.to_string(), Tensor::scalar(v))].into_iter().collect()
    }

    #[test]
    fn plain_step() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.5, 0.0).unwrap();
        opt.step(&mut [("p", &mut p)], &grads("p", 2.0)).unwrap();
        assert_eq!(p.item(), 0.0);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Sgd::new(1.0, 0.9).unwrap();
        opt.step(&mut [("p", &mut p)], &grads("p", 1.0)).unwrap();
        assert_eq!(p.item(), -1.0);
        opt.step(&mut [("p", &mut p)], &grads("p", 1.0)).unwrap();
        assert!((p.item() - (-2.9)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        let err = opt.step(&mut [("p", &mut p)], &GradMap::new()).unwrap_err();
        assert_eq!(err, AutodiffError::MissingGradient("p".into()));
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(Sgd::new(0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Adam::new(-1.0).is_err());
    }
}
