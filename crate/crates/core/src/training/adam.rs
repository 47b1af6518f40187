use super::TrainError;
use crate::diff::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], learning_rate: f64) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            learning_rate,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Applies one update in place. Nothing is modified when any gradient
    /// entry is non-finite or a shape disagrees.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TrainError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TrainError::OptimizerShape {
                index: params.len().min(grads.len()),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[index].shape() {
                return Err(TrainError::OptimizerShape { index });
            }
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient { param: index });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gk), mk), vk) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mk = BETA1 * *mk + (1.0 - BETA1) * gk;
                *vk = BETA2 * *vk + (1.0 - BETA2) * gk * gk;
                let m_hat = *mk / c1;
                let v_hat = *vk / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
