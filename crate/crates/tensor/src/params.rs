use std::collections::BTreeMap;

use crate::{Graph, Real, Result, Tensor, TensorError, Var};

/// A learnable tensor together with its Adam slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self {
            value,
            grad: None,
            m,
            v,
            step: 0,
        }
    }
}

/// Named parameters iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

/// Graph handles for a [`ParamSet`] bound into one [`Graph`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `name`; panics when the name was never registered, which is a wiring bug.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor; an existing name is an error.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(TensorError::ParamMismatch(format!("duplicate name `{name}`")));
        }
        self.params.insert(name.to_string(), Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy every value into `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let v = if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Add the leaf gradients of a backward pass into each parameter's grad.
    ///
    /// Bound trainable leaves that the loss never reached receive explicit zeros.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &Bound) -> Result<()> {
        for (name, var) in bound.iter() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| TensorError::ParamMismatch(format!("unknown name `{name}`")))?;
            if !g.requires_grad(var) {
                continue;
            }
            let acc = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(gr) = g.grad(var) {
                acc.data_mut()
                    .iter_mut()
                    .zip(gr.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Global L2 norm of the populated gradients.
    pub fn grad_norm_sq(&self) -> Real {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum()
    }

    /// Overwrite values (and optionally slots) from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        check_same_layout(self, other)?;
        for (dst, src) in self.params.values_mut().zip(other.params.values()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

fn check_same_layout(a: &ParamSet, b: &ParamSet) -> Result<()> {
    if a.params.len() != b.params.len() {
        return Err(TensorError::ParamMismatch(format!(
            "{} vs {} tensors",
            a.params.len(),
            b.params.len()
        )));
    }
    for ((na, pa), (nb, pb)) in a.params.iter().zip(&b.params) {
        if na != nb || pa.value.shape() != pb.value.shape() {
            return Err(TensorError::ParamMismatch(format!(
                "`{na}` {:?} vs `{nb}` {:?}",
                pa.value.shape(),
                pb.value.shape()
            )));
        }
    }
    Ok(())
}

/// Adam with bias correction and global-norm gradient clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub clip_norm: Real,
}

impl Adam {
    pub fn new(lr: Real) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 100.0,
        }
    }

    /// One update over the union of `sets`; clears every gradient afterwards.
    ///
    /// Returns the pre-clip global gradient norm.
    pub fn step(&self, sets: &mut [&mut ParamSet]) -> Result<Real> {
        for set in sets.iter() {
            if let Some((name, _)) = set.params.iter().find(|(_, p)| p.grad.is_none()) {
                return Err(TensorError::MissingGrad(name.clone()));
            }
        }
        let norm = sets.iter().map(|s| s.grad_norm_sq()).sum::<Real>().sqrt();
        let clip = if norm > self.clip_norm && norm > 0.0 {
            self.clip_norm / norm
        } else {
            1.0
        };
        for set in sets.iter_mut() {
            for p in set.params.values_mut() {
                let grad = p.grad.take().expect("checked above");
                p.step += 1;
                let t = p.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
                for i in 0..w.len() {
                    let g = grad.data()[i] * clip;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
        Ok(norm)
    }
}

/// `target <- (1 - eta) * target + eta * online`, elementwise.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, eta: Real) -> Result<()> {
    check_same_layout(target, online)?;
    for (dst, src) in target.params.values_mut().zip(online.params.values()) {
        for (t, o) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
            *t = (1.0 - eta) * *t + eta * o;
        }
    }
    Ok(())
}
