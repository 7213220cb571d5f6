//! Adam over named parameters, with moments that can be saved and restored.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::AdamConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub t: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Restores saved state; moments must match the parameter shapes.
    pub fn restore(&mut self, t: u64, moments: BTreeMap<String, Moments>) {
        self.t = t;
        self.moments = moments;
    }

    /// One update of every parameter in `params` that received a gradient.
    /// Returns the global gradient norm.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<f64> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut sq_norm = 0.0;
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            sq_norm += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            let entry = match self.moments.remove(name) {
                Some(m) => {
                    if m.m.dims() != var.dims() {
                        return Err(Error::Config(format!(
                            "optimizer moments for {name} have shape {:?}, parameter has {:?}",
                            m.m.dims(),
                            var.dims()
                        )));
                    }
                    m
                }
                None => Moments {
                    m: var.zeros_like()?.detach(),
                    v: var.zeros_like()?.detach(),
                },
            };
            let g = g.detach();
            let m = ((entry.m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), Moments { m, v });
        }
        Ok(sq_norm.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    /// Scalar Adam written out by hand.
    fn reference(grads: &[f64], lr: f64, c: AdamConfig) -> f64 {
        let (mut p, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= lr * mh / (vh.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn matches_scalar_reference() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let params = vec![("p".to_string(), var.clone())];
        let mut adam = Adam::new(AdamConfig::default());
        let mut seen = Vec::new();
        for k in 0..5 {
            // loss = c * p, gradient c
            let c = 0.3 + k as f64;
            seen.push(c);
            let loss = (var.as_tensor() * c).unwrap().sum_all().unwrap();
            adam.step(&params, &loss.backward().unwrap(), 0.01).unwrap();
        }
        let got = var.to_vec1::<f64>().unwrap()[0];
        assert!((got - reference(&seen, 0.01, AdamConfig::default())).abs() < 1e-12);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn parameters_without_gradients_are_untouched() {
        let a = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[2.0f64], &Device::Cpu).unwrap()).unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let loss = a.as_tensor().sqr().unwrap().sum_all().unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&params, &loss.backward().unwrap(), 0.1).unwrap();
        assert_eq!(b.to_vec1::<f64>().unwrap(), vec![2.0]);
        assert!(!adam.moments().contains_key("b"));
    }

    #[test]
    fn moments_hold_no_graph() {
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -1.0], &Device::Cpu).unwrap()).unwrap();
        let params = vec![("p".to_string(), var.clone())];
        let loss = var.as_tensor().exp().unwrap().sum_all().unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&params, &loss.backward().unwrap(), 0.1).unwrap();
        let m = &adam.moments()["p"];
        assert!(!m.m.track_op() && !m.v.track_op());
    }
}
