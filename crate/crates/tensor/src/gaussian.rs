use crate::{Graph, Real, Result, Tensor, TensorError, Var};

/// Lower bound added to `softplus(raw)` when building a standard deviation.
pub const STD_FLOOR: Real = 0.1;

const HALF_LN_2PI: Real = 0.918_938_533_204_672_8;

/// Diagonal Gaussian whose event dimension is the last axis.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub std: Var,
}

impl DiagGaussian {
    /// `std = softplus(raw_std) + STD_FLOOR`.
    pub fn from_raw(g: &mut Graph, mean: Var, raw_std: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(raw_std) {
            return Err(TensorError::ShapeMismatch {
                op: "diag_gaussian",
                lhs: g.shape(mean).to_vec(),
                rhs: g.shape(raw_std).to_vec(),
            });
        }
        let sp = g.softplus(raw_std);
        let std = g.add_scalar(sp, STD_FLOOR);
        Ok(Self { mean, std })
    }

    /// Split a `[.., 2d]` head output into mean and raw std halves.
    pub fn from_head(g: &mut Graph, head: Var) -> Result<Self> {
        let shape = g.shape(head).to_vec();
        let axis = shape.len() - 1;
        let d = shape[axis];
        if d % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "diag_gaussian",
                msg: format!("head width {d} is odd"),
            });
        }
        let mean = g.slice(head, axis, 0, d / 2)?;
        let raw = g.slice(head, axis, d / 2, d)?;
        Self::from_raw(g, mean, raw)
    }

    /// Build from explicit positive std values.
    pub fn new(g: &mut Graph, mean: Var, std: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(std) {
            return Err(TensorError::ShapeMismatch {
                op: "diag_gaussian",
                lhs: g.shape(mean).to_vec(),
                rhs: g.shape(std).to_vec(),
            });
        }
        if g.value(std).data().iter().any(|&s| s <= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "diag_gaussian",
                msg: "std must be positive".into(),
            });
        }
        Ok(Self { mean, std })
    }

    fn event_axis(&self, g: &Graph) -> usize {
        g.shape(self.mean).len() - 1
    }

    /// `mean + std * noise`; gradients flow into mean and std.
    pub fn sample(&self, g: &mut Graph, noise: Tensor) -> Result<Var> {
        if noise.shape() != g.shape(self.mean) {
            return Err(TensorError::ShapeMismatch {
                op: "sample",
                lhs: g.shape(self.mean).to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        let eps = g.constant(noise);
        let scaled = g.mul(self.std, eps)?;
        g.add(self.mean, scaled)
    }

    /// Log density summed over the event axis.
    pub fn log_prob(&self, g: &mut Graph, value: Var) -> Result<Var> {
        if g.shape(value) != g.shape(self.mean) {
            return Err(TensorError::ShapeMismatch {
                op: "log_prob",
                lhs: g.shape(self.mean).to_vec(),
                rhs: g.shape(value).to_vec(),
            });
        }
        let diff = g.sub(value, self.mean)?;
        let z = g.div(diff, self.std)?;
        let z2 = g.square(z);
        let quad = g.scale(z2, -0.5);
        let log_std = g.log(self.std);
        let t = g.sub(quad, log_std)?;
        let t = g.add_scalar(t, -HALF_LN_2PI);
        let axis = self.event_axis(g);
        g.sum(t, axis)
    }

    /// `KL(self || other)` summed over the event axis.
    pub fn kl(&self, g: &mut Graph, other: &DiagGaussian) -> Result<Var> {
        if g.shape(self.mean) != g.shape(other.mean) {
            return Err(TensorError::ShapeMismatch {
                op: "kl",
                lhs: g.shape(self.mean).to_vec(),
                rhs: g.shape(other.mean).to_vec(),
            });
        }
        // ln(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2
        let log_p = g.log(other.std);
        let log_q = g.log(self.std);
        let log_ratio = g.sub(log_p, log_q)?;
        let var_q = g.square(self.std);
        let diff = g.sub(self.mean, other.mean)?;
        let diff2 = g.square(diff);
        let num = g.add(var_q, diff2)?;
        let var_p = g.square(other.std);
        let den = g.scale(var_p, 2.0);
        let frac = g.div(num, den)?;
        let t = g.add(log_ratio, frac)?;
        let t = g.add_scalar(t, -0.5);
        let axis = self.event_axis(g);
        g.sum(t, axis)
    }
}
