//! Named parameter storage and the AMSGrad / Adam update rules.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(self.id(&name).is_none(), "ParamSet::insert", "duplicate parameter `{}`", name);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.tensors[id.0])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        OptimHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "OptimHyper";
        ensure!(self.lr > 0.0, OP, "lr must be positive, got {}", self.lr);
        ensure!((0.0..1.0).contains(&self.beta1), OP, "beta1 must lie in [0, 1), got {}", self.beta1);
        ensure!((0.0..1.0).contains(&self.beta2), OP, "beta2 must lie in [0, 1), got {}", self.beta2);
        ensure!(self.epsilon > 0.0, OP, "epsilon must be positive, got {}", self.epsilon);
        Ok(())
    }
}

/// Per-parameter moment estimates, stored as `f32` (update arithmetic runs in
/// `f64`). `v_hat` is the running elementwise max of `v` for AMSGrad; Adam
/// leaves it untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub v_hat: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        OptState {
            m: zeros(),
            v: zeros(),
            v_hat: zeros(),
            step: 0,
        }
    }
}

fn check_shapes(op: &'static str, params: &ParamSet, grads: &[Tensor], state: &OptState) -> Result<()> {
    ensure!(
        grads.len() == params.len() && state.m.len() == params.len(),
        op,
        "{} parameters, {} gradients, {} state slots",
        params.len(),
        grads.len(),
        state.m.len()
    );
    for ((name, p), g) in params.iter().zip(grads) {
        ensure!(
            p.shape() == g.shape(),
            op,
            "gradient for `{}` has shape {:?}, parameter has {:?}",
            name,
            g.shape(),
            p.shape()
        );
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: name.to_string() });
        }
    }
    Ok(())
}

/// AMSGrad without bias correction:
/// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g^2`, `v_hat = max(v_hat, v)`,
/// `theta -= lr m / (sqrt(v_hat) + eps)`.
pub fn amsgrad_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptState, h: &OptimHyper) -> Result<()> {
    h.validate()?;
    check_shapes("amsgrad_step", params, grads, state)?;
    state.step += 1;
    for (i, g) in grads.iter().enumerate() {
        let theta = params.tensor_mut(ParamId(i)).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let vh = state.v_hat[i].data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let gk = gk as f64;
            let mk = h.beta1 * m[k] as f64 + (1.0 - h.beta1) * gk;
            let vk = h.beta2 * v[k] as f64 + (1.0 - h.beta2) * gk * gk;
            let vhk = (vh[k] as f64).max(vk);
            theta[k] = (theta[k] as f64 - h.lr * mk / (vhk.sqrt() + h.epsilon)) as f32;
            m[k] = mk as f32;
            v[k] = vk as f32;
            vh[k] = vhk as f32;
        }
    }
    Ok(())
}

/// Adam with bias-corrected moments.
pub fn adam_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptState, h: &OptimHyper) -> Result<()> {
    h.validate()?;
    check_shapes("adam_step", params, grads, state)?;
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - h.beta1.powf(t);
    let c2 = 1.0 - h.beta2.powf(t);
    for (i, g) in grads.iter().enumerate() {
        let theta = params.tensor_mut(ParamId(i)).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let gk = gk as f64;
            let mk = h.beta1 * m[k] as f64 + (1.0 - h.beta1) * gk;
            let vk = h.beta2 * v[k] as f64 + (1.0 - h.beta2) * gk * gk;
            theta[k] = (theta[k] as f64 - h.lr * (mk / c1) / ((vk / c2).sqrt() + h.epsilon)) as f32;
            m[k] = mk as f32;
            v[k] = vk as f32;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(theta)).unwrap();
        p
    }

    fn hyper(lr: f64) -> OptimHyper {
        OptimHyper { lr, ..OptimHyper::default() }
    }

    #[test]
    fn amsgrad_single_step() {
        let mut p = single(0.0);
        let mut s = OptState::new(&p);
        amsgrad_step(&mut p, &[Tensor::scalar(1.0)], &mut s, &hyper(0.1)).unwrap();
        assert!((s.m[0].item() - 0.1).abs() < 1e-7);
        assert!((s.v[0].item() - 0.001).abs() < 1e-10);
        assert_eq!(s.v_hat[0].item(), s.v[0].item());
        // -0.1 * 0.1 / sqrt(0.001)
        assert!((p.tensors()[0].item() + 0.316_227_76).abs() < 1e-6, "{}", p.tensors()[0].item());
    }

    #[test]
    fn adam_single_step() {
        let mut p = single(0.0);
        let mut s = OptState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, &hyper(0.1)).unwrap();
        assert!((p.tensors()[0].item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for step in [amsgrad_step, adam_step] {
            let mut p = single(0.75);
            let mut s = OptState::new(&p);
            step(&mut p, &[Tensor::scalar(0.0)], &mut s, &hyper(0.1)).unwrap();
            assert_eq!(p.tensors()[0].item(), 0.75);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(0.0);
        let mut s = OptState::new(&p);
        let err = amsgrad_step(&mut p, &[Tensor::scalar(f32::NAN)], &mut s, &hyper(0.1)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "theta"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(0.0);
        let mut s = OptState::new(&p);
        assert!(amsgrad_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &hyper(0.1)).is_err());
    }

    #[test]
    fn adam_update_approaches_lr_on_constant_gradient() {
        let mut p = single(0.0);
        let mut s = OptState::new(&p);
        let h = hyper(0.01);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.tensors()[0].item();
            adam_step(&mut p, &[Tensor::scalar(0.3)], &mut s, &h).unwrap();
            last = before - p.tensors()[0].item();
        }
        assert!((last - 0.01).abs() < 1e-5, "{last}");
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Tensor::full(&[4], 3.0)];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert_eq!(norm, 6.0);
        assert!((g[0].data()[0] - 0.5).abs() < 1e-7);
    }
}
