use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip applied by the trainer; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.max_grad_norm < 0.0 {
            return Err(Error::Config(
                "eps must be positive; weight_decay and max_grad_norm non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments of one parameter tensor.
///
/// `step` counts the updates this tensor has received since its moments
/// were created and drives bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub shape: Vec<usize>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Moments {
            shape: shape.to_vec(),
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    /// Number of `adam_step` calls, never reset.
    pub t: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Moments<T>> {
        self.moments.get_mut(name)
    }

    pub fn insert(&mut self, name: String, moments: Moments<T>) {
        self.moments.insert(name, moments);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Moments<T>)> {
        self.moments.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Moments<T>)> {
        self.moments.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.moments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.moments.is_empty()
    }

    /// Drops the moments of every tensor for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.moments.retain(|k, _| keep(k));
    }
}

fn check_grads<T: Scalar>(params: &[(String, &mut Tensor<T>)]) -> Result<()> {
    for (name, p) in params {
        if !p.requires_grad() {
            continue;
        }
        let g = p
            .grad()
            .ok_or_else(|| Error::Config(format!("trainable parameter `{name}` has no gradient")))?;
        if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at flat index {pos}")));
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [(String, &mut Tensor<T>)], max_norm: f64) -> Result<f64> {
    check_grads(params)?;
    let total: f64 = params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let coef = T::of(max_norm / (total + 1e-6));
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                for x in g {
                    *x = *x * coef;
                }
            }
        }
    }
    Ok(total)
}

/// One bias-corrected Adam update of every trainable tensor in `params`,
/// reading gradients from the tensors themselves. Nothing is modified if
/// any gradient is non-finite.
pub fn adam_step<T: Scalar>(params: &mut [(String, &mut Tensor<T>)], state: &mut AdamState<T>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    check_grads(params)?;
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr} is invalid")));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (name, p) in params.iter_mut() {
        if !p.requires_grad() {
            continue;
        }
        let shape = p.shape().to_vec();
        let mom = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments::zeros(&shape));
        if mom.shape != shape {
            return Err(Error::TensorShape {
                name: format!("adam state of {name}"),
                expected: shape,
                found: mom.shape.clone(),
            });
        }
        mom.step += 1;
        let bc1 = 1.0 - b1.powi(mom.step as i32);
        let bc2 = 1.0 - b2.powi(mom.step as i32);
        let grad = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad[i].f64();
            let m = b1 * mom.m[i].f64() + (1.0 - b1) * g;
            let v = b2 * mom.v[i].f64() + (1.0 - b2) * g * g;
            mom.m[i] = T::of(m);
            mom.v[i] = T::of(v);
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let mut x = data[i].f64();
            if cfg.weight_decay > 0.0 {
                x -= lr * cfg.weight_decay * x;
            }
            x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            data[i] = T::of(x);
        }
    }
    Ok(())
}
