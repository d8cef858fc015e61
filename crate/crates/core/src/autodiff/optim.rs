//! Adam and gradient clipping over named parameters.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A trainable leaf with a stable name (used in diagnostics and checkpoints).
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Param {
            name: name.into(),
            tensor,
        }
    }
}

pub fn zero_grads(params: &[Param]) {
    params.iter().for_each(|p| p.tensor.zero_grad());
}

/// Global L2 norm over every listed gradient (missing grads count as zero).
pub fn grad_norm(params: &[Param]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.into_iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`. Returns the norm measured before clipping.
pub fn clip_grad_norm(params: &[Param], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::invalid(format!(
            "clip_grad_norm: max_norm must be > 0, got {max_norm}"
        )));
    }
    let norm = grad_norm(params);
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in params {
            if let Some(g) = p.tensor.grad_mut().as_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    Ok(norm)
}

/// Clamps every gradient component into `[-clip, clip]`.
pub fn clip_grad_value(params: &[Param], clip: f64) -> Result<()> {
    if clip.is_nan() || clip <= 0.0 {
        return Err(Error::invalid(format!("clip_grad_value: clip must be > 0, got {clip}")));
    }
    for p in params {
        if let Some(g) = p.tensor.grad_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
        }
    }
    Ok(())
}

/// Clamps parameter values themselves into `[-clip, clip]` (WGAN-style).
pub fn clip_weights(params: &[Param], clip: f64) {
    for p in params {
        p.tensor.values_mut().iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
    }
}

/// Adam with bias correction. Moments are allocated lazily per parameter on
/// the first step and are matched to parameters by position.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently stored on `params`.
    ///
    /// Every gradient is checked before anything is written, so a rejected
    /// step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(params).any(|(m, p)| m.len() != p.tensor.numel()) {
            return Err(Error::invalid("Adam: parameter list changed shape between steps"));
        }
        let grads: Vec<Vec<f64>> = params.iter().map(|p| p.tensor.grad_or_zeros()).collect();
        for (p, g) in params.iter().zip(&grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let mut theta = p.tensor.values_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>) -> Param {
        let n = values.len();
        Param::new("w", Tensor::param([n], values).unwrap())
    }

    fn set_grad(p: &Param, g: Vec<f64>) {
        *p.tensor.grad_mut() = Some(g);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = param(vec![0.0]);
        set_grad(&p, vec![0.3]);
        let mut adam = Adam::new(5e-5);
        adam.step(std::slice::from_ref(&p)).unwrap();
        let delta = p.tensor.to_vec()[0];
        assert!((delta + 5e-5).abs() < 5e-7, "delta {delta}");
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = param(vec![1.5, -2.0]);
        set_grad(&p, vec![0.0, 0.0]);
        let mut adam = Adam::new(0.1);
        adam.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.tensor.to_vec(), vec![1.5, -2.0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        // f(theta) = theta^2, gradient 2 theta
        let p = param(vec![1.0]);
        let mut adam = Adam::new(0.1);
        for _ in 0..10 {
            let theta = p.tensor.to_vec()[0];
            set_grad(&p, vec![2.0 * theta]);
            adam.step(std::slice::from_ref(&p)).unwrap();
        }
        assert!(p.tensor.to_vec()[0].abs() < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let p = Param::new("disc.l1.weight", Tensor::param([1], vec![0.0]).unwrap());
        set_grad(&p, vec![f64::NAN]);
        let err = Adam::new(0.1).step(std::slice::from_ref(&p)).unwrap_err();
        assert!(err.to_string().contains("disc.l1.weight"));
        assert_eq!(p.tensor.to_vec(), vec![0.0]);
    }

    #[test]
    fn norm_clip_scales_down() {
        let p = param(vec![0.0, 0.0]);
        set_grad(&p, vec![3.0, 4.0]);
        let before = clip_grad_norm(std::slice::from_ref(&p), 1.0).unwrap();
        assert_eq!(before, 5.0);
        let g = p.tensor.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn norm_clip_below_threshold_is_noop() {
        let p = param(vec![0.0, 0.0]);
        set_grad(&p, vec![0.1, 0.1]);
        clip_grad_norm(std::slice::from_ref(&p), 1.0).unwrap();
        assert_eq!(p.tensor.grad().unwrap(), vec![0.1, 0.1]);
        assert!(clip_grad_norm(&[], 1.0).is_ok());
    }

    #[test]
    fn value_clip_clamps_components() {
        let p = param(vec![0.0; 3]);
        set_grad(&p, vec![0.5, -0.5, 0.005]);
        clip_grad_value(std::slice::from_ref(&p), 0.01).unwrap();
        assert_eq!(p.tensor.grad().unwrap(), vec![0.01, -0.01, 0.005]);
    }

    #[test]
    fn clip_thresholds_must_be_positive() {
        assert!(clip_grad_norm(&[], 0.0).is_err());
        assert!(clip_grad_value(&[], -1.0).is_err());
    }
}
