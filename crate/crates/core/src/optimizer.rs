//! ADAM, the `[0, 1]` box projection, and the arctanh change of variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdversarialState, ReparamMode};
use crate::numerics::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Boundary clamp that keeps `arctanh` finite.
pub const ARCTANH_MARGIN: f64 = 1e-6;

/// Bias-corrected ADAM moments over a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Parameter delta that descends along `grad`.
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "gradient of {} values for ADAM state of {}",
                grad.len(),
                self.first.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut delta = Vec::with_capacity(grad.len());
        for ((m, v), g) in self.first.iter_mut().zip(self.second.iter_mut()).zip(grad) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            delta.push(-self.learning_rate * m_hat / (v_hat.sqrt() + self.eps));
        }
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(Error::Numerical("non-finite ADAM update".into()));
        }
        Ok(delta)
    }
}

/// `clamp(I0 + eps, 0, 1) - I0`.
pub fn project_box(base: &Tensor, noise: &Tensor) -> Result<Tensor> {
    if !base.same_shape(noise) {
        return Err(Error::Dimension(format!(
            "projection of {:?} onto {:?}",
            noise.shape(),
            base.shape()
        )));
    }
    let data = base
        .data()
        .iter()
        .zip(noise.data())
        .map(|(b, e)| {
            let x = b + e;
            if x < 0.0 {
                -b
            } else if x > 1.0 {
                1.0 - b
            } else {
                *e
            }
        })
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// `arctanh(2x - 1)` after clamping `x` to `[δ, 1 - δ]`.
pub fn to_tanh_space(pixel: f64) -> f64 {
    let x = pixel.clamp(ARCTANH_MARGIN, 1.0 - ARCTANH_MARGIN);
    (2.0 * x - 1.0).atanh()
}

pub fn from_tanh_space(w: f64) -> f64 {
    (w.tanh() + 1.0) / 2.0
}

/// `dx/dw` of [`from_tanh_space`].
pub fn tanh_space_jacobian(w: f64) -> f64 {
    let t = w.tanh();
    (1.0 - t * t) / 2.0
}

/// Optimizes the noise of an [`AdversarialState`] with ADAM, either directly
/// with clipping or through the arctanh change of variables.
#[derive(Clone, Debug)]
pub struct NoiseOptimizer {
    state: AdversarialState,
    /// `eps` in clip mode, `w` in arctanh mode.
    variable: Vec<f64>,
    adam: AdamState,
}

impl NoiseOptimizer {
    pub fn new(base: Tensor, mode: ReparamMode, learning_rate: f64) -> Result<Self> {
        let mut state = AdversarialState::new(base, mode)?;
        let variable = match mode {
            ReparamMode::Clip => vec![0.0; state.base().len()],
            ReparamMode::Arctanh => state
                .base()
                .data()
                .iter()
                .map(|&x| to_tanh_space(x))
                .collect(),
        };
        if mode == ReparamMode::Arctanh {
            let noise = noise_from_tanh(state.base(), &variable)?;
            state.set_noise(noise)?;
        }
        let adam = AdamState::new(variable.len(), learning_rate);
        Ok(Self {
            state,
            variable,
            adam,
        })
    }

    pub fn state(&self) -> &AdversarialState {
        &self.state
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    /// One step that increases the objective whose gradient w.r.t. `eps` is `grad`.
    pub fn ascend(&mut self, grad: &Tensor) -> Result<()> {
        let neg = grad.scaled(-1.0);
        self.descend(&neg)
    }

    /// One step that decreases the objective whose gradient w.r.t. `eps` is `grad`.
    pub fn descend(&mut self, grad: &Tensor) -> Result<()> {
        if !grad.same_shape(self.state.base()) {
            return Err(Error::Dimension(format!(
                "gradient {:?} vs image {:?}",
                grad.shape(),
                self.state.base().shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite noise gradient after {} steps",
                self.adam.steps()
            )));
        }
        match self.state.mode() {
            ReparamMode::Clip => {
                let delta = self.adam.step(grad.data())?;
                for (v, d) in self.variable.iter_mut().zip(&delta) {
                    *v += d;
                }
                let noise = project_box(
                    self.state.base(),
                    &Tensor::new(self.state.base().shape().to_vec(), self.variable.clone())?,
                )?;
                self.variable.copy_from_slice(noise.data());
                self.state.set_noise(noise)?;
            }
            ReparamMode::Arctanh => {
                let chained: Vec<f64> = grad
                    .data()
                    .iter()
                    .zip(&self.variable)
                    .map(|(g, &w)| g * tanh_space_jacobian(w))
                    .collect();
                let delta = self.adam.step(&chained)?;
                for (v, d) in self.variable.iter_mut().zip(&delta) {
                    *v += d;
                }
                let noise = noise_from_tanh(self.state.base(), &self.variable)?;
                self.state.set_noise(noise)?;
            }
        }
        Ok(())
    }
}

fn noise_from_tanh(base: &Tensor, w: &[f64]) -> Result<Tensor> {
    let data = base
        .data()
        .iter()
        .zip(w)
        .map(|(b, &wi)| from_tanh_space(wi) - b)
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_difference, relative_error, seeded_rng};

    #[test]
    fn zero_gradient_gives_zero_delta() {
        let mut adam = AdamState::new(3, 0.001);
        for _ in 0..5 {
            assert!(adam.step(&[0.0; 3]).unwrap().iter().all(|d| *d == 0.0));
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(2, 0.001);
        let d = adam.step(&[3.0, -0.5]).unwrap();
        assert!((d[0] + 0.001).abs() < 1e-10);
        assert!((d[1] - 0.001).abs() < 1e-10);
    }

    #[test]
    fn two_step_trace_matches_hand_recurrence() {
        // m1 = 0.1 g1, v1 = 0.001 g1², m2 = 0.9 m1 + 0.1 g2, v2 = 0.999 v1 + 0.001 g2²,
        // delta2 = -lr (m2 / 0.19) / (sqrt(v2 / 0.001999) + 1e-8); computed in a script.
        let mut adam = AdamState::new(2, 0.001);
        let d1 = adam.step(&[1.0, -2.0]).unwrap();
        let d2 = adam.step(&[0.5, 4.0]).unwrap();
        let expected1 = [-0.0009999999900000003, 0.000999999995];
        let expected2 = [-0.000932179627018389, -0.00036610352587829566];
        for (a, b) in d1.iter().zip(expected1) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        for (a, b) in d2.iter().zip(expected2) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(AdamState::new(2, 0.1).step(&[1.0]).is_err());
    }

    #[test]
    fn projection_examples() {
        let base = Tensor::vector(vec![0.9, 0.2]).unwrap();
        let p = project_box(&base, &Tensor::vector(vec![0.5, 0.1]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.1).abs() < 1e-12);
        assert_eq!(p.data()[1], 0.1);
        let q = project_box(&base, &p).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn arctanh_examples() {
        assert_eq!(to_tanh_space(0.5), 0.0);
        for x in [0.01, 0.3, 0.5, 0.77, 0.99] {
            assert!((from_tanh_space(to_tanh_space(x)) - x).abs() < 1e-9);
        }
        for x in [0.1, 0.4, 0.8] {
            let fd = central_difference(&[x], 0, 1e-5, |p| Ok(to_tanh_space(p[0]))).unwrap();
            let analytic = 2.0 / (1.0 - (2.0 * x - 1.0).powi(2));
            assert!(relative_error(analytic, fd, 1e-12) < 1e-8);
            assert!((1.0 / tanh_space_jacobian(to_tanh_space(x)) - analytic).abs() < 1e-6);
        }
    }

    #[test]
    fn clip_mode_keeps_image_in_box() {
        let mut rng = seeded_rng(3);
        let base = Tensor::uniform(&[4, 4], 0.5, &mut rng)
            .add(&Tensor::filled(&[4, 4], 0.5))
            .unwrap();
        let mut opt = NoiseOptimizer::new(base, ReparamMode::Clip, 0.3).unwrap();
        for i in 0..20 {
            let g = Tensor::uniform(&[4, 4], 10.0, &mut seeded_rng(i));
            opt.ascend(&g).unwrap();
            assert!(opt
                .state()
                .perturbed()
                .data()
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn arctanh_mode_keeps_image_in_box() {
        let base = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        let mut opt = NoiseOptimizer::new(base, ReparamMode::Arctanh, 0.5).unwrap();
        assert!(opt.state().noise_norm() < 1e-5);
        for _ in 0..50 {
            opt.ascend(&Tensor::new(vec![1, 3], vec![1.0, 1.0, -1.0]).unwrap())
                .unwrap();
        }
        let p = opt.state().perturbed();
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(p.data()[1] > 0.9);
    }
}
