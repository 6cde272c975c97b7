//! Adam with classic (coupled) L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coefficient of the L2 term folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = |p: &Tensor<T>| Tensor::zeros(p.shape().to_vec());
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update. `grads[i]` must be present for every
    /// parameter.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else {
                return Err(Error::MissingGradient { index: i });
            };
            if g.shape() != p.shape() || self.first_moment[i].shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }

        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let one = T::one();
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        let wd = T::lit(c.weight_decay);
        let t = self.step as i32;
        let bias1 = one - T::lit(c.beta1.powi(t));
        let bias2 = one - T::lit(c.beta2.powi(t));

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].expect("checked above");
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gr = gr + wd * *w;
                *mi = b1 * *mi + (one - b1) * gr;
                *vi = b2 * *vi + (one - b2) * gr * gr;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
