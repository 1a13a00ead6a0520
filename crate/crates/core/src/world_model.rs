//! Recurrent state-space model with observation and reward heads.
//!
//! The deterministic path is a GRU cell fed by a one-layer ELU embedding of
//! `(z_{t-1}, a_{t-1})`. Posterior and prior are diagonal Gaussians produced by
//! ELU MLPs over `(h_t, o_t)` and `h_t` respectively. The observation head
//! reads the full latent feature `x = (s, u, e)`; the reward head reads only
//! `s = (h, z)`.

use protocad_tensor::{Bound, DiagGaussian, Graph, ParamSet, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{init_linear, init_mlp, linear, mlp, normal_noise};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModelConfig {
    pub h_dim: usize,
    pub z_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    /// KL loss scale.
    pub beta: Real,
    /// KL values below this floor contribute a constant.
    pub free_nats: Real,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            h_dim: 64,
            z_dim: 16,
            hidden: 64,
            depth: 2,
            beta: 1.0,
            free_nats: 1.0,
        }
    }
}

impl WorldModelConfig {
    pub fn state_dim(&self) -> usize {
        self.h_dim + self.z_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_dim == 0 || self.z_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("world model dims must be positive".into()));
        }
        if self.beta < 0.0 || self.free_nats < 0.0 {
            return Err(Error::Config("beta and free_nats must be non-negative".into()));
        }
        Ok(())
    }
}

/// Batched latent state; `dist` is the distribution `z` was drawn from, if any.
#[derive(Clone, Copy, Debug)]
pub struct RssmState {
    pub h: Var,
    pub z: Var,
    pub dist: Option<DiagGaussian>,
}

impl RssmState {
    /// All-zero state for `batch` rows.
    pub fn zeros(g: &mut Graph, batch: usize, cfg: &WorldModelConfig) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[batch, cfg.h_dim])),
            z: g.constant(Tensor::zeros(&[batch, cfg.z_dim])),
            dist: None,
        }
    }

    /// `s = concat(h, z)`.
    pub fn features(&self, g: &mut Graph) -> Result<Var> {
        Ok(g.concat(&[self.h, self.z], 1)?)
    }
}

/// Output of a filtering pass.
#[derive(Clone, Debug, Default)]
pub struct Observed {
    pub states: Vec<RssmState>,
    pub priors: Vec<DiagGaussian>,
    pub posteriors: Vec<DiagGaussian>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub feature_dim: usize,
    pub params: ParamSet,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(
        config: WorldModelConfig,
        obs_dim: usize,
        act_dim: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut p = ParamSet::new();
        init_linear(&mut p, "rec.in", c.z_dim + act_dim, c.hidden, rng)?;
        init_linear(&mut p, "gru.gates", c.hidden + c.h_dim, 2 * c.h_dim, rng)?;
        init_linear(&mut p, "gru.cand", c.hidden + c.h_dim, c.h_dim, rng)?;
        init_mlp(&mut p, "post", c.h_dim + obs_dim, c.hidden, c.depth, 2 * c.z_dim, rng)?;
        init_mlp(&mut p, "prior", c.h_dim, c.hidden, c.depth, 2 * c.z_dim, rng)?;
        init_mlp(&mut p, "dec", feature_dim, c.hidden, c.depth, obs_dim, rng)?;
        init_mlp(&mut p, "rew", c.state_dim(), c.hidden, c.depth, 1, rng)?;
        Ok(Self {
            config,
            obs_dim,
            act_dim,
            feature_dim,
            params: p,
        })
    }

    /// `h_t = GRU(h_{t-1}, elu(W [z_{t-1}, a_{t-1}]))`.
    pub fn recurrent_step(
        &self,
        g: &mut Graph,
        p: &Bound,
        prev: &RssmState,
        action: Var,
    ) -> Result<Var> {
        let hd = self.config.h_dim;
        let za = g.concat(&[prev.z, action], 1)?;
        let inp = linear(g, p, "rec.in", za)?;
        let inp = g.elu(inp);
        let xh = g.concat(&[inp, prev.h], 1)?;
        let gates = linear(g, p, "gru.gates", xh)?;
        let gates = g.sigmoid(gates);
        let reset = g.slice(gates, 1, 0, hd)?;
        let update = g.slice(gates, 1, hd, 2 * hd)?;
        let rh = g.mul(reset, prev.h)?;
        let xrh = g.concat(&[inp, rh], 1)?;
        let cand = linear(g, p, "gru.cand", xrh)?;
        let cand = g.tanh(cand);
        let delta = g.sub(cand, prev.h)?;
        let step = g.mul(update, delta)?;
        Ok(g.add(prev.h, step)?)
    }

    /// `q(z_t | h_t, o_t)`.
    pub fn posterior(&self, g: &mut Graph, p: &Bound, h: Var, obs: Var) -> Result<DiagGaussian> {
        let ho = g.concat(&[h, obs], 1)?;
        let head = mlp(g, p, "post", self.config.depth, ho)?;
        Ok(DiagGaussian::from_head(g, head)?)
    }

    /// `p(ẑ_t | h_t)`.
    pub fn prior(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<DiagGaussian> {
        let head = mlp(g, p, "prior", self.config.depth, h)?;
        Ok(DiagGaussian::from_head(g, head)?)
    }

    /// One imagination step: recurrent update then a prior sample.
    pub fn imagine_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        prev: &RssmState,
        action: Var,
        rng: &mut R,
    ) -> Result<RssmState> {
        let h = self.recurrent_step(g, p, prev, action)?;
        let dist = self.prior(g, p, h)?;
        let noise = normal_noise(rng, g.shape(dist.mean));
        let z = dist.sample(g, noise)?;
        Ok(RssmState {
            h,
            z,
            dist: Some(dist),
        })
    }

    /// One filtering step: recurrent update then a posterior sample.
    pub fn observe_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        prev: &RssmState,
        prev_action: Var,
        obs: Var,
        rng: &mut R,
    ) -> Result<RssmState> {
        let h = self.recurrent_step(g, p, prev, prev_action)?;
        let dist = self.posterior(g, p, h, obs)?;
        let noise = normal_noise(rng, g.shape(dist.mean));
        let z = dist.sample(g, noise)?;
        Ok(RssmState {
            h,
            z,
            dist: Some(dist),
        })
    }

    /// Filtering rollout over aligned `obs[t]` and `prev_actions[t]` (the action
    /// that led to `obs[t]`), each `[batch, dim]`.
    ///
    /// Priors are only evaluated when `with_priors` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn observe_sequence<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        obs: &[Var],
        prev_actions: &[Var],
        init: Option<RssmState>,
        with_priors: bool,
        rng: &mut R,
    ) -> Result<Observed> {
        if obs.len() != prev_actions.len() {
            return Err(Error::Invalid(format!(
                "observe_sequence: {} observations vs {} actions",
                obs.len(),
                prev_actions.len()
            )));
        }
        let Some(first) = obs.first() else {
            return Ok(Observed::default());
        };
        let batch = g.shape(*first)[0];
        let mut state = match init {
            Some(s) => s,
            None => RssmState::zeros(g, batch, &self.config),
        };
        let mut out = Observed::default();
        for (&o, &a) in obs.iter().zip(prev_actions) {
            state = self.observe_step(g, p, &state, a, o, rng)?;
            if with_priors {
                let prior = self.prior(g, p, state.h)?;
                out.priors.push(prior);
            }
            out.posteriors.push(state.dist.expect("observe_step sets dist"));
            out.states.push(state);
        }
        Ok(out)
    }

    /// Observation head over latent features `x`; unit variance.
    pub fn decode_obs(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<DiagGaussian> {
        let width = g.shape(x)[1];
        if width != self.feature_dim {
            return Err(Error::Invalid(format!(
                "decode_obs: feature width {width}, expected {}",
                self.feature_dim
            )));
        }
        let mean = mlp(g, p, "dec", self.config.depth, x)?;
        unit_gaussian(g, mean)
    }

    /// Reward head over the latent state `s` only; unit variance.
    pub fn predict_reward(&self, g: &mut Graph, p: &Bound, s: Var) -> Result<DiagGaussian> {
        let mean = mlp(g, p, "rew", self.config.depth, s)?;
        unit_gaussian(g, mean)
    }
}

fn unit_gaussian(g: &mut Graph, mean: Var) -> Result<DiagGaussian> {
    let std = g.constant(Tensor::full(g.shape(mean), 1.0));
    Ok(DiagGaussian::new(g, mean, std)?)
}

/// `β · mean_t max(free_nats, E_b KL(q_t || p_t))`.
pub fn kl_objective(
    g: &mut Graph,
    posteriors: &[DiagGaussian],
    priors: &[DiagGaussian],
    beta: Real,
    free_nats: Real,
) -> Result<Var> {
    if posteriors.len() != priors.len() || posteriors.is_empty() {
        return Err(Error::Invalid(format!(
            "kl_objective: {} posteriors vs {} priors",
            posteriors.len(),
            priors.len()
        )));
    }
    let mut terms = Vec::with_capacity(posteriors.len());
    for (q, p) in posteriors.iter().zip(priors) {
        let kl = q.kl(g, p)?;
        let kl = g.mean(kl, 0)?;
        terms.push(g.max_scalar(kl, free_nats));
    }
    let mut rows = Vec::with_capacity(terms.len());
    for &t in &terms {
        rows.push(g.reshape(t, &[1])?);
    }
    let stacked = g.concat(&rows, 0)?;
    let mean = g.mean_all(stacked);
    Ok(g.scale(mean, beta))
}

/// Negative unit-variance Gaussian log-likelihood without its constant:
/// `½ Σ_d (mean - target)²`, averaged over rows.
pub fn unit_nll(g: &mut Graph, dist: &DiagGaussian, target: Var) -> Result<Var> {
    let diff = g.sub(dist.mean, target)?;
    let sq = g.square(diff);
    let total = g.sum_all(sq);
    let rows = g.shape(dist.mean)[0].max(1);
    Ok(g.scale(total, 0.5 / rows as Real))
}
