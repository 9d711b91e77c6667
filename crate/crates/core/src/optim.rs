use std::collections::HashMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

/// Adam with bias correction. Unlike candle's optimizers the moment
/// estimates are reachable, so they can be checkpointed.
pub struct Adam {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::precondition(format!("learning rate must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::precondition(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Applies one update from the gradients in `grads`. Variables without a
    /// gradient keep their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let m = ((&self.m[k] * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            let v = ((&self.v[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let denom = ((&v / c2)?.sqrt()? + self.eps)?;
            let delta = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (delta * self.lr)?)?)?;
            self.m[k] = m;
            self.v[k] = v;
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    /// Moments as named tensors plus the step counter.
    pub fn state(&self) -> (HashMap<String, Tensor>, u64) {
        let mut out = HashMap::new();
        for (k, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("m.{name}"), self.m[k].clone());
            out.insert(format!("v.{name}"), self.v[k].clone());
        }
        (out, self.step)
    }

    pub fn load_state(&mut self, state: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (k, (name, var)) in self.vars.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("{prefix}.{name}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("optimizer state missing {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::shape(format!("optimizer state {key}: {:?} vs {:?}", t.dims(), var.dims())));
                }
                *slot = t.to_dtype(var.dtype())?.to_device(var.device())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update exactly lr·sign(g) up to eps
        let x = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], 0.1, 0.5, 0.99).unwrap();
        let loss = (x.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let v: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-8);
        assert!((v[1] + 2.1).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let x = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], 0.05, 0.5, 0.99).unwrap();
        for _ in 0..500 {
            opt.backward_step(&x.as_tensor().sqr().unwrap().sum_all().unwrap()).unwrap();
        }
        let v: Vec<f64> = x.as_tensor().to_vec1().unwrap();
        assert!(v[0].abs() < 0.05);
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let run = |split: Option<usize>| {
            let x = Var::from_tensor(&Tensor::new(&[1.5f64, 0.5], &Device::Cpu).unwrap()).unwrap();
            let mut opt = Adam::new(vec![("x".into(), x.clone())], 0.01, 0.5, 0.99).unwrap();
            for i in 0..10 {
                if Some(i) == split {
                    let (state, step) = opt.state();
                    let x2 = Var::from_tensor(&x.as_tensor().copy().unwrap()).unwrap();
                    let mut fresh = Adam::new(vec![("x".into(), x2.clone())], 0.01, 0.5, 0.99).unwrap();
                    fresh.load_state(&state, step).unwrap();
                    opt = fresh;
                }
                let cur = opt.vars()[0].1.clone();
                let loss = cur.as_tensor().powf(4.0).unwrap().sum_all().unwrap();
                opt.backward_step(&loss).unwrap();
            }
            opt.vars()[0].1.as_tensor().to_vec1::<f64>().unwrap()
        };
        assert_eq!(run(None), run(Some(4)));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let x = Var::zeros(2, DType::F32, &Device::Cpu).unwrap();
        assert!(Adam::new(vec![("x".into(), x.clone())], 0.0, 0.5, 0.99).is_err());
        assert!(Adam::new(vec![("x".into(), x.clone())], 1e-4, 1.0, 0.99).is_err());
        assert!(Adam::new(vec![("x".into(), x)], 1e-4, 0.5, -0.1).is_err());
    }
}
