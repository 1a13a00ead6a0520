//! Prototypical context learning: projection, prototype assignment,
//! Sinkhorn-Knopp targets, the temporal-crossover loss, and feature assembly.
//!
//! Batched time series are stacked time-major, so row `t * B + b` holds batch
//! element `b` at step `t`.

use std::fmt;
use std::str::FromStr;

use protocad_tensor::{Bound, Graph, ParamSet, Real, Tensor, Var, EPS};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{init_linear, linear, normal_noise};
use crate::{Error, Result};

pub const PROTOTYPES: &str = "protos";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtoConfig {
    /// Number of prototypes.
    pub k: usize,
    /// Projection and prototype dimension.
    pub d: usize,
    pub temperature: Real,
    pub sinkhorn_eps: Real,
    pub sinkhorn_iters: usize,
    /// EMA fraction for the target projector.
    pub ema: Real,
    /// Block observation-loss gradients from reaching `u` and `e`.
    pub detach_context_in_decoder: bool,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            k: 32,
            d: 32,
            temperature: 0.1,
            sinkhorn_eps: 0.05,
            sinkhorn_iters: 3,
            ema: 0.05,
            detach_context_in_decoder: false,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("proto.k must be >= 2, got {}", self.k)));
        }
        if self.d == 0 {
            return Err(Error::Config("proto.d must be positive".into()));
        }
        if self.temperature <= 0.0 || self.sinkhorn_eps <= 0.0 {
            return Err(Error::Config(
                "proto.temperature and proto.sinkhorn_eps must be positive".into(),
            ));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("proto.sinkhorn_iters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::Config(format!("proto.ema must lie in [0, 1], got {}", self.ema)));
        }
        Ok(())
    }
}

/// Training variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Features omit the projection embedding: `x = (s, e)`.
    NoProjection,
    /// Swapped-view loss without the temporal crossing.
    PlainSwav,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoProjection => "no_projection",
            Ablation::PlainSwav => "plain_swav",
        }
    }

    pub fn crossed(self) -> bool {
        self != Ablation::PlainSwav
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_projection" => Ok(Ablation::NoProjection),
            "plain_swav" => Ok(Ablation::PlainSwav),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

/// Width of `x` for a latent state of width `state_dim`.
pub fn feature_dim(state_dim: usize, d: usize, ablation: Ablation) -> usize {
    match ablation {
        Ablation::NoProjection => state_dim + d,
        _ => state_dim + 2 * d,
    }
}

/// Online projector, its EMA target, and the prototype bank.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoContext {
    pub config: ProtoConfig,
    pub projector: ParamSet,
    pub target_projector: ParamSet,
    pub prototypes: ParamSet,
}

impl ProtoContext {
    pub fn new<R: Rng + ?Sized>(config: ProtoConfig, state_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut projector = ParamSet::new();
        init_linear(&mut projector, "proj", state_dim, config.d, rng)?;
        let target_projector = projector.clone();
        let mut protos = normal_noise(rng, &[config.k, config.d]);
        normalize_rows(&mut protos);
        let mut prototypes = ParamSet::new();
        prototypes.insert(PROTOTYPES, protos)?;
        Ok(Self {
            config,
            projector,
            target_projector,
            prototypes,
        })
    }

    /// Pull the target projector towards the online one.
    pub fn update_target(&mut self) -> Result<()> {
        protocad_tensor::ema_update(&mut self.target_projector, &self.projector, self.config.ema)?;
        Ok(())
    }

    /// Rescale every prototype to unit norm; returns how many rows had to be redrawn.
    pub fn renormalize_prototypes<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let p = self
            .prototypes
            .get_mut(PROTOTYPES)
            .expect("prototype bank registered at construction");
        renormalize_rows(&mut p.value, rng)
    }

    pub fn prototype_matrix(&self) -> &Tensor {
        self.prototypes.value(PROTOTYPES).expect("registered")
    }
}

/// `u = normalize(W s + b)` using whichever projector `p` was bound from.
pub fn project(g: &mut Graph, p: &Bound, s: Var) -> Result<Var> {
    let y = linear(g, p, "proj", s)?;
    Ok(g.l2_normalize(y, 1, EPS)?)
}

/// Scores `U Cᵀ`, shape `[N, K]`.
pub fn scores(g: &mut Graph, u: Var, c: Var) -> Result<Var> {
    Ok(g.matmul_nt(u, c)?)
}

/// Row-wise `softmax(U Cᵀ / T)`.
pub fn assign_softmax(g: &mut Graph, u: Var, c: Var, temperature: Real) -> Result<Var> {
    let s = scores(g, u, c)?;
    Ok(g.softmax(s, 1, temperature)?)
}

/// Row-wise `log softmax(U Cᵀ / T)`.
pub fn assign_log_softmax(g: &mut Graph, u: Var, c: Var, temperature: Real) -> Result<Var> {
    let s = scores(g, u, c)?;
    Ok(g.log_softmax(s, 1, temperature)?)
}

/// Balanced assignment from a score matrix `[N, K]`.
///
/// Starts from `exp((S - max S) / eps)` and alternates column scaling (each
/// column to `N / K`) with row scaling (each row to 1), `iters` times.
pub fn sinkhorn(scores: &Tensor, eps: Real, iters: usize) -> Result<Tensor> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Invalid(format!("sinkhorn: bad score shape {shape:?}")));
    }
    if eps <= 0.0 || iters == 0 {
        return Err(Error::Invalid("sinkhorn: eps must be positive and iters >= 1".into()));
    }
    let (n, k) = (shape[0], shape[1]);
    let max = scores.data().iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut q: Vec<Real> = scores.data().iter().map(|s| ((s - max) / eps).exp()).collect();
    let col_target = n as Real / k as Real;
    let mut col = vec![0.0 as Real; k];
    for _ in 0..iters {
        col.iter_mut().for_each(|c| *c = 0.0);
        for row in q.chunks_exact(k) {
            col.iter_mut().zip(row).for_each(|(c, v)| *c += v);
        }
        for row in q.chunks_exact_mut(k) {
            for (v, c) in row.iter_mut().zip(&col) {
                *v *= col_target / c.max(Real::MIN_POSITIVE);
            }
        }
        for row in q.chunks_exact_mut(k) {
            let sum: Real = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum.max(Real::MIN_POSITIVE));
        }
    }
    Ok(Tensor::new(&[n, k], q)?)
}

/// Gradient-free Sinkhorn targets for target projections `ū`.
pub fn sinkhorn_assign(g: &mut Graph, u_bar: Var, c: Var, eps: Real, iters: usize) -> Result<Var> {
    let s = scores(g, u_bar, c)?;
    let q = sinkhorn(g.value(s), eps, iters)?;
    let q = g.constant(q);
    Ok(g.stop_gradient(q))
}

/// Swapped-prediction cross-entropy over time-major rows `[M * B, K]`.
///
/// With `crossed`, targets from the first half of the sequence are scored
/// against predictions from the second half at the same offset and vice
/// versa; otherwise each target pairs with the prediction at its own step.
/// The sum is divided by `B * M`.
pub fn temporal_crossover_loss(
    g: &mut Graph,
    log_w: Var,
    w_bar: Var,
    m: usize,
    crossed: bool,
) -> Result<Var> {
    let shape = g.shape(log_w).to_vec();
    if g.shape(w_bar) != shape.as_slice() || shape.len() != 2 {
        return Err(Error::Invalid(format!(
            "crossover loss: prediction {:?} vs target {:?}",
            shape,
            g.shape(w_bar)
        )));
    }
    if m == 0 || m % 2 != 0 {
        return Err(Error::Invalid(format!("crossover loss: sequence length {m} must be even")));
    }
    let rows = shape[0];
    if rows % m != 0 {
        return Err(Error::Invalid(format!(
            "crossover loss: {rows} rows do not split into {m} steps"
        )));
    }
    let paired = if crossed {
        let half = rows / 2;
        let late = g.slice(log_w, 0, half, rows)?;
        let early = g.slice(log_w, 0, 0, half)?;
        g.concat(&[late, early], 0)?
    } else {
        log_w
    };
    let prod = g.mul(w_bar, paired)?;
    let total = g.sum_all(prod);
    Ok(g.scale(total, -1.0 / rows as Real))
}

/// `e = W C`: per-row convex combination of prototypes.
pub fn aggregate(g: &mut Graph, w: Var, c: Var) -> Result<Var> {
    Ok(g.matmul(w, c)?)
}

/// `x = (s, u, e)`, or `(s, e)` without the projection embedding.
pub fn build_feature(g: &mut Graph, s: Var, u: Var, e: Var, ablation: Ablation) -> Result<Var> {
    let (su, ue) = (g.shape(u)[1], g.shape(e)[1]);
    if su != ue {
        return Err(Error::Invalid(format!(
            "build_feature: projection width {su} vs prototype width {ue}"
        )));
    }
    let parts: &[Var] = match ablation {
        Ablation::NoProjection => &[s, e],
        _ => &[s, u, e],
    };
    Ok(g.concat(parts, 1)?)
}

/// Intermediate values of the latent-feature path for one batch of states.
#[derive(Clone, Copy, Debug)]
pub struct FeatureParts {
    pub u: Var,
    pub logits: Var,
    pub w: Var,
    pub e: Var,
    pub x: Var,
}

/// `s -> (u, w, e) -> x`, shared by model training, imagination and acting.
///
/// `proj` and `c` decide which parameters receive gradients. With
/// `detach_context`, `u` and `e` enter `x` through a stop-gradient.
pub fn feature_path(
    g: &mut Graph,
    proj: &Bound,
    c: Var,
    s: Var,
    temperature: Real,
    ablation: Ablation,
    detach_context: bool,
) -> Result<FeatureParts> {
    g.push_scope("projection");
    let u = project(g, proj, s);
    g.pop_scope();
    let u = u?;
    g.push_scope("assign");
    let parts = (|| -> Result<(Var, Var, Var)> {
        let logits = scores(g, u, c)?;
        let w = g.softmax(logits, 1, temperature)?;
        let e = aggregate(g, w, c)?;
        Ok((logits, w, e))
    })();
    g.pop_scope();
    let (logits, w, e) = parts?;
    g.push_scope("feature");
    let x = if detach_context {
        let (ud, ed) = (g.stop_gradient(u), g.stop_gradient(e));
        build_feature(g, s, ud, ed, ablation)
    } else {
        build_feature(g, s, u, e, ablation)
    };
    g.pop_scope();
    Ok(FeatureParts {
        u,
        logits,
        w,
        e,
        x: x?,
    })
}

fn normalize_rows(t: &mut Tensor) {
    let d = t.shape()[1];
    for row in t.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Unit-normalize rows in place, redrawing zero rows from a unit Gaussian.
pub fn renormalize_rows<R: Rng + ?Sized>(t: &mut Tensor, rng: &mut R) -> usize {
    let d = t.shape()[1];
    let mut redrawn = 0;
    for row in t.data_mut().chunks_exact_mut(d) {
        let mut n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
        while !(n > EPS) || !n.is_finite() {
            let fresh = normal_noise(rng, &[d]);
            row.copy_from_slice(fresh.data());
            n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            redrawn += 1;
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    if redrawn > 0 {
        eprintln!("warning: re-drew {redrawn} degenerate prototype row(s)");
    }
    redrawn
}
