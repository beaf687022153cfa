//! Named parameter store with Adam optimizer state.
//!
//! Parameters live outside any tape. Each training step binds them onto a
//! fresh tape (see [`Binder`]), runs forward/backward, folds the tape
//! gradients back into the store, and applies one optimizer step.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Vec<F>,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// Map from parameter path ("dec/lstm_bottom/w_ih") to tensor + Adam moments.
/// BTreeMap keeps iteration order deterministic everywhere (updates,
/// checkpoints, gradient collection).
#[derive(Debug, Clone, Default)]
pub struct Parameters<F: Scalar> {
    entries: BTreeMap<String, Param<F>>,
    step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl<F: Scalar> Parameters<F> {
    pub fn new() -> Self {
        Parameters { entries: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<F>) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter {name}: shape/data mismatch");
        assert!(
            !self.entries.contains_key(name),
            "parameter path {name} already registered"
        );
        self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
                grad: vec![F::zero(); numel],
                m: vec![F::zero(); numel],
                v: vec![F::zero(); numel],
            },
        );
    }

    pub fn get(&self, name: &str) -> &Param<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter path: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter path: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Sum of |g| over every parameter; zero iff all gradient buffers are
    /// exactly zero.
    pub fn grad_abs_sum(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.into_f64().abs())
            .sum()
    }

    /// One bias-corrected Adam update over all parameters. Increments the
    /// step counter and zeroes gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - cfg.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = F::from_f64(cfg.lr);
        let eps = F::from_f64(cfg.eps);
        for p in self.entries.values_mut() {
            for i in 0..p.data.len() {
                let g = p.grad[i];
                p.m[i] = b1 * p.m[i] + (one - b1) * g;
                p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = F::zero();
            }
        }
    }

    /// Convert every buffer to another precision (used to run f64 gradient
    /// checks against f32-trained models).
    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let mut out = Parameters::new();
        for (name, p) in &self.entries {
            out.insert(name, &p.shape, p.data.iter().map(|&x| G::from_f64(x.into_f64())).collect());
        }
        out.step = self.step;
        out
    }
}

/// Per-step bridge between a [`Parameters`] store and a [`Tape`]: every
/// parameter becomes a leaf tensor, looked up by path during the forward
/// pass.
pub struct Binder<'t, F: Scalar> {
    bound: BTreeMap<String, Tensor<'t, F>>,
    trainable: bool,
}

impl<'t, F: Scalar> Binder<'t, F> {
    /// Bind all parameters as differentiable leaves.
    pub fn trainable(tape: &'t Tape<F>, params: &Parameters<F>) -> Self {
        let bound = params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf_grad(p.data.clone(), &p.shape)))
            .collect();
        Binder { bound, trainable: true }
    }

    /// Bind all parameters as constants (inference).
    pub fn frozen(tape: &'t Tape<F>, params: &Parameters<F>) -> Self {
        let bound = params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.data.clone(), &p.shape)))
            .collect();
        Binder { bound, trainable: false }
    }

    pub fn get(&self, name: &str) -> Tensor<'t, F> {
        *self
            .bound
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Fold tape gradients back into the store (`params.grad += leaf.grad`).
    pub fn accumulate_grads(&self, params: &mut Parameters<F>) -> Result<()> {
        if !self.trainable {
            return Err(Error::CheckFailed(
                "accumulate_grads on a frozen binder".to_string(),
            ));
        }
        for (name, tensor) in &self.bound {
            if !params.contains(name) {
                return Err(Error::CheckFailed(format!(
                    "gradient for unknown parameter path {name}"
                )));
            }
            let g = tensor.grad();
            let p = params.get_mut(name);
            for (acc, v) in p.grad.iter_mut().zip(g.iter()) {
                *acc = *acc + *v;
            }
        }
        Ok(())
    }
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); biases zero;
/// embeddings uniform(-0.1, 0.1).
pub fn xavier_uniform<F: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize, numel: usize) -> Vec<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..numel).map(|_| F::from_f64(rng.gen_range(-a..a))).collect()
}

pub fn add_linear<F: Scalar>(
    params: &mut Parameters<F>,
    rng: &mut impl Rng,
    prefix: &str,
    din: usize,
    dout: usize,
) {
    let w = xavier_uniform(rng, din, dout, din * dout);
    params.insert(&format!("{prefix}/w"), &[din, dout], w);
    params.insert(&format!("{prefix}/b"), &[dout], vec![F::zero(); dout]);
}

pub fn add_lstm<F: Scalar>(
    params: &mut Parameters<F>,
    rng: &mut impl Rng,
    prefix: &str,
    din: usize,
    dh: usize,
) {
    let w_ih = xavier_uniform(rng, din, 4 * dh, din * 4 * dh);
    let w_hh = xavier_uniform(rng, dh, 4 * dh, dh * 4 * dh);
    params.insert(&format!("{prefix}/w_ih"), &[din, 4 * dh], w_ih);
    params.insert(&format!("{prefix}/w_hh"), &[dh, 4 * dh], w_hh);
    params.insert(&format!("{prefix}/b"), &[4 * dh], vec![F::zero(); 4 * dh]);
}

pub fn add_embedding<F: Scalar>(
    params: &mut Parameters<F>,
    rng: &mut impl Rng,
    name: &str,
    rows: usize,
    dim: usize,
) {
    let data = (0..rows * dim).map(|_| F::from_f64(rng.gen_range(-0.1..0.1))).collect();
    params.insert(name, &[rows, dim], data);
}
