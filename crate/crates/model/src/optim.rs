//! Adam with bias correction.

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug)]
pub struct Adam {
    params: AdamParams,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new<'a>(vars: impl IntoIterator<Item = (&'a String, &'a Var)>, params: AdamParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.clone(),
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, step: 0, slots })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> AdamParams {
        self.params
    }

    /// Applies one update. Parameters without a gradient in `grads` are left
    /// untouched, moments included.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue;
            };
            // leaf gradients can still reference the forward graph; keeping
            // them in the moments would pin every step's graph in memory
            let g = g.detach();
            s.m = ((&s.m * beta1)? + (&g * (1.0 - beta1))?)?;
            s.v = ((&s.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&s.v * (1.0 / bc2))?.sqrt()? + eps)?;
            let update = ((&s.m * (lr / bc1))? / denom)?;
            s.var.set(&(s.var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }

    /// Moment tensors by parameter name, for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.m, &s.v))
    }

    pub fn restore(&mut self, step: u64, mut lookup: impl FnMut(&str) -> Option<(Tensor, Tensor)>) -> Result<()> {
        for s in &mut self.slots {
            let Some((m, v)) = lookup(&s.name) else {
                candle_core::bail!("optimizer state for {} is missing", s.name);
            };
            if m.shape() != s.var.shape() || v.shape() != s.var.shape() {
                candle_core::bail!("optimizer state for {} has the wrong shape", s.name);
            }
            s.m = m;
            s.v = v;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let x = Var::new(&[1.0f32, -2.0, 3.0], &Device::Cpu).unwrap();
        let name = "x".to_string();
        let mut opt = Adam::new(
            [(&name, &x)],
            AdamParams { lr: 0.1, beta1: 0.0, beta2: 0.9, eps: 1e-12 },
        )
        .unwrap();
        let loss = (x.as_tensor() * Tensor::new(&[2.0f32, -1.0, 0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = x.as_tensor().to_vec1::<f32>().unwrap();
        for (g, w) in got.iter().zip([0.9f32, -1.9, 2.9]) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn minimizes_quadratic() {
        let x = Var::new(&[5.0f32, -3.0], &Device::Cpu).unwrap();
        let name = "x".to_string();
        let mut opt = Adam::new(
            [(&name, &x)],
            AdamParams { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        )
        .unwrap();
        for _ in 0..2000 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        assert!(x.as_tensor().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() < 1e-2);
    }

    #[test]
    fn moments_do_not_hold_the_graph() {
        let x = Var::new(&[1.0f32, 2.0], &Device::Cpu).unwrap();
        let name = "x".to_string();
        let mut opt = Adam::new([(&name, &x)], AdamParams { lr: 0.1, beta1: 0.5, beta2: 0.9, eps: 1e-8 }).unwrap();
        // d/dx (x / |x|^2) has x itself in its gradient expression
        let loss = x.as_tensor().broadcast_div(&x.as_tensor().sqr().unwrap().sum_all().unwrap()).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        for (_, m, v) in opt.state() {
            assert!(!m.track_op() && !v.track_op());
        }
    }
}
