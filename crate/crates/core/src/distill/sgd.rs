use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParameterSet;
use crate::tensor::Tensor;

/// Heavy-ball SGD with L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            let theta = params
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown tensor {name}")))?;
            if theta.shape() != g.shape() {
                return Err(Error::shape("sgd", format!("{name}: gradient {:?} vs tensor {:?}", g.shape(), theta.shape())));
            }
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *t);
                *t -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Step decay: ×0.1 from 60% of the epochs, ×0.01 from 85%.
pub fn learning_rate_at(base: f64, epoch: usize, epochs: usize) -> f64 {
    let first = (epochs as f64 * 0.6).floor() as usize;
    let second = (epochs as f64 * 0.85).floor() as usize;
    let drops = (epoch >= first) as i32 + (epoch >= second) as i32;
    base * 0.1f64.powi(drops)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_milestones() {
        let lrs: Vec<f64> = (0..20).map(|e| learning_rate_at(1.0, e, 20)).collect();
        assert_eq!(lrs[11], 1.0);
        assert_eq!(lrs[12], 0.1);
        assert_eq!(lrs[16], 0.1);
        assert!((lrs[17] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut params = crate::nn::build(&crate::nn::ModelConfig::uniform(1, &[2], 3, 1, 1, 2), 2, 0).unwrap();
        let before = params.classifier().clone();
        let g = Tensor::full(before.shape(), 1.0);
        let mut opt = Sgd::new(0.5, 0.0);
        let grads = vec![(crate::nn::CLASSIFIER.to_string(), g)];
        opt.step(&mut params, &grads, 0.1).unwrap();
        opt.step(&mut params, &grads, 0.1).unwrap();
        // 0.1·1 + 0.1·1.5
        for (a, b) in params.classifier().data().iter().zip(before.data()) {
            assert!((b - a - 0.25).abs() < 1e-12);
        }
    }
}
