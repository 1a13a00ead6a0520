//! Actor-critic learned in imagination over latent features.

use protocad_tensor::{Adam, Bound, DiagGaussian, Graph, ParamSet, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{init_mlp, mlp, normal_noise};
use crate::proto::{feature_path, Ablation, ProtoContext, PROTOTYPES};
use crate::world_model::{RssmState, WorldModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Imagination horizon H.
    pub horizon: usize,
    pub gamma: Real,
    pub lambda: Real,
    /// Std of the Gaussian noise added to explore-mode actions.
    pub explore_noise: Real,
    pub hidden: usize,
    pub depth: usize,
    pub actor_lr: Real,
    pub critic_lr: Real,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            explore_noise: 0.3,
            hidden: 64,
            depth: 2,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("agent.horizon must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("agent.gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("agent.lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.explore_noise < 0.0 {
            return Err(Error::Config("agent.explore_noise must be non-negative".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("agent.hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub config: AgentConfig,
    pub feature_dim: usize,
    pub act_dim: usize,
    pub actor: ParamSet,
    pub critic: ParamSet,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        config: AgentConfig,
        feature_dim: usize,
        act_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut actor = ParamSet::new();
        init_mlp(&mut actor, "actor", feature_dim, config.hidden, config.depth, 2 * act_dim, rng)?;
        let mut critic = ParamSet::new();
        init_mlp(&mut critic, "critic", feature_dim, config.hidden, config.depth, 1, rng)?;
        Ok(Self {
            config,
            feature_dim,
            act_dim,
            actor,
            critic,
        })
    }

    fn check_width(&self, g: &Graph, x: Var) -> Result<()> {
        let w = g.shape(x)[1];
        if w != self.feature_dim {
            return Err(Error::Invalid(format!(
                "feature width {w}, agent expects {}",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Pre-squash Gaussian; actions are `tanh` of its samples.
    pub fn actor_dist(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<DiagGaussian> {
        self.check_width(g, x)?;
        let head = mlp(g, p, "actor", self.config.depth, x)?;
        Ok(DiagGaussian::from_head(g, head)?)
    }

    /// Reparameterized squashed sample `tanh(mean + std * noise)`.
    pub fn sample_action(&self, g: &mut Graph, dist: &DiagGaussian, noise: Tensor) -> Result<Var> {
        let raw = dist.sample(g, noise)?;
        Ok(g.tanh(raw))
    }

    /// Distribution mode `tanh(mean)`.
    pub fn mode_action(&self, g: &mut Graph, dist: &DiagGaussian) -> Var {
        g.tanh(dist.mean)
    }

    /// Value estimate per row, shape `[N]`.
    pub fn critic_value(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_width(g, x)?;
        let v = mlp(g, p, "critic", self.config.depth, x)?;
        let n = g.shape(v)[0];
        Ok(g.reshape(v, &[n])?)
    }

    /// Actions for a batch of features, clamped to `[-1, 1]`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Tensor> {
        let dist = self.actor_dist(g, p, x)?;
        match mode {
            ActMode::Eval => {
                let a = self.mode_action(g, &dist);
                Ok(g.value(a).clone())
            }
            ActMode::Explore => {
                let shape = g.shape(dist.mean).to_vec();
                let a = self.sample_action(g, &dist, normal_noise(rng, &shape))?;
                let mut out = g.value(a).clone();
                let sigma = self.config.explore_noise;
                let jitter = normal_noise(rng, &shape);
                for (v, n) in out.data_mut().iter_mut().zip(jitter.data()) {
                    *v = (*v + sigma * n).clamp(-1.0, 1.0);
                }
                Ok(out)
            }
        }
    }
}

/// Latent rollout under the prior and the current policy.
#[derive(Clone, Debug, Default)]
pub struct Imagined {
    /// `s_τ`, τ = 0..=H.
    pub states: Vec<Var>,
    /// `x_τ`, τ = 0..=H.
    pub features: Vec<Var>,
    /// `a_τ`, τ = 0..H.
    pub actions: Vec<Var>,
}

/// Parameter handles used while imagining.
pub struct ImagineParams<'a> {
    pub world: &'a Bound,
    pub projector: &'a Bound,
    pub prototypes: Var,
    pub actor: &'a Bound,
}

/// Roll `start` forward `horizon` steps with prior samples and policy actions.
#[allow(clippy::too_many_arguments)]
pub fn imagine<R: Rng + ?Sized>(
    g: &mut Graph,
    wm: &WorldModel,
    proto: &ProtoContext,
    agent: &Agent,
    p: &ImagineParams<'_>,
    start: RssmState,
    horizon: usize,
    ablation: Ablation,
    rng: &mut R,
) -> Result<Imagined> {
    let mut out = Imagined::default();
    let mut state = start;
    for tau in 0..=horizon {
        let s = state.features(g)?;
        let fp = feature_path(
            g,
            p.projector,
            p.prototypes,
            s,
            proto.config.temperature,
            ablation,
            false,
        )?;
        out.states.push(s);
        out.features.push(fp.x);
        if tau == horizon {
            break;
        }
        g.push_scope("policy");
        let dist = agent.actor_dist(g, p.actor, fp.x);
        g.pop_scope();
        let dist = dist?;
        let shape = g.shape(dist.mean).to_vec();
        let a = agent.sample_action(g, &dist, normal_noise(rng, &shape))?;
        out.actions.push(a);
        g.push_scope("dynamics");
        let next = wm.imagine_step(g, p.world, &state, a, rng);
        g.pop_scope();
        state = next?;
    }
    Ok(out)
}

/// λ-returns by the backward recursion
/// `V_τ = r_τ + γ((1 - λ) v_{τ+1} + λ V_{τ+1})`, `V_H = v_H`.
///
/// `values` holds `v_0..=v_H`; the first `H` rewards are used. Returns `H + 1` values.
pub fn lambda_returns(rewards: &[Real], values: &[Real], gamma: Real, lambda: Real) -> Result<Vec<Real>> {
    if values.len() < 2 || rewards.len() + 1 < values.len() {
        return Err(Error::Invalid(format!(
            "lambda_returns: {} rewards, {} values",
            rewards.len(),
            values.len()
        )));
    }
    let h = values.len() - 1;
    let mut out = vec![0.0; h + 1];
    out[h] = values[h];
    for t in (0..h).rev() {
        out[t] = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * out[t + 1]);
    }
    Ok(out)
}

/// Graph version of [`lambda_returns`] over per-row vectors `[N]`.
pub fn lambda_returns_graph(
    g: &mut Graph,
    rewards: &[Var],
    values: &[Var],
    gamma: Real,
    lambda: Real,
) -> Result<Vec<Var>> {
    if values.len() < 2 || rewards.len() + 1 < values.len() {
        return Err(Error::Invalid(format!(
            "lambda_returns: {} rewards, {} values",
            rewards.len(),
            values.len()
        )));
    }
    let h = values.len() - 1;
    let mut out = vec![values[h]; h + 1];
    for t in (0..h).rev() {
        let boot = g.scale(values[t + 1], gamma * (1.0 - lambda));
        let tail = g.scale(out[t + 1], gamma * lambda);
        let mix = g.add(boot, tail)?;
        out[t] = g.add(rewards[t], mix)?;
    }
    Ok(out)
}

/// `actor = -mean_n Σ_τ V_τ`; `critic = mean_n Σ_τ ½(v_τ - sg(V_τ))²`.
pub fn behavior_losses(
    g: &mut Graph,
    returns: &[Var],
    critic_values: &[Var],
) -> Result<(Var, Var)> {
    if returns.len() != critic_values.len() || returns.is_empty() {
        return Err(Error::Invalid("behavior_losses: misaligned sequences".into()));
    }
    let n = g.shape(returns[0])[0].max(1) as Real;
    let mut actor_terms = Vec::with_capacity(returns.len());
    let mut critic_terms = Vec::with_capacity(returns.len());
    for (&ret, &v) in returns.iter().zip(critic_values) {
        actor_terms.push(g.sum_all(ret));
        let target = g.stop_gradient(ret);
        let diff = g.sub(v, target)?;
        let sq = g.square(diff);
        critic_terms.push(g.sum_all(sq));
    }
    let actor = sum_scalars(g, &actor_terms)?;
    let actor = g.scale(actor, -1.0 / n);
    let critic = sum_scalars(g, &critic_terms)?;
    let critic = g.scale(critic, 0.5 / n);
    Ok((actor, critic))
}

fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BehaviorLosses {
    pub actor: Real,
    pub critic: Real,
}

/// Graph of one behavior update; the caller owns backward and optimizer steps.
pub struct BehaviorGraph {
    pub actor_params: Bound,
    pub critic_params: Bound,
    pub actor_loss: Var,
    pub critic_loss: Var,
    pub total: Var,
    pub imagined: Imagined,
}

/// Build the imagination and loss graph from detached start states `h`, `z`.
///
/// Model, projector and prototypes enter as constants. The actor path reads a
/// constant copy of the critic so only the critic loss reaches its weights.
/// `frozen_returns` replaces the λ-return targets of the critic loss with
/// fixed values, which makes the critic loss an ordinary function for
/// finite-difference checks.
#[allow(clippy::too_many_arguments)]
pub fn build_behavior_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    wm: &WorldModel,
    proto: &ProtoContext,
    agent: &Agent,
    h: &Tensor,
    z: &Tensor,
    ablation: Ablation,
    frozen_returns: Option<&[Tensor]>,
    rng: &mut R,
) -> Result<BehaviorGraph> {
    let world = wm.params.bind(g, false);
    let projector = proto.projector.bind(g, false);
    let protos = proto.prototypes.bind(g, false).get(PROTOTYPES);
    let actor_params = agent.actor.bind(g, true);
    let critic_fixed = agent.critic.bind(g, false);
    let critic_params = agent.critic.bind(g, true);
    let start = RssmState {
        h: g.constant(h.clone()),
        z: g.constant(z.clone()),
        dist: None,
    };
    let params = ImagineParams {
        world: &world,
        projector: &projector,
        prototypes: protos,
        actor: &actor_params,
    };
    let imagined = imagine(g, wm, proto, agent, &params, start, agent.config.horizon, ablation, rng)?;

    g.push_scope("returns");
    let built = (|| -> Result<(Vec<Var>, Vec<Var>)> {
        let mut rewards = Vec::with_capacity(agent.config.horizon);
        for &s in &imagined.states[..agent.config.horizon] {
            let r = wm.predict_reward(g, &world, s)?;
            let n = g.shape(r.mean)[0];
            rewards.push(g.reshape(r.mean, &[n])?);
        }
        let mut values = Vec::with_capacity(imagined.features.len());
        for &x in &imagined.features {
            values.push(agent.critic_value(g, &critic_fixed, x)?);
        }
        let returns =
            lambda_returns_graph(g, &rewards, &values, agent.config.gamma, agent.config.lambda)?;
        Ok((returns, values))
    })();
    g.pop_scope();
    let (returns, _) = built?;

    g.push_scope("critic");
    let critic_values = (|| -> Result<Vec<Var>> {
        imagined
            .features
            .iter()
            .map(|&x| {
                let xd = g.stop_gradient(x);
                agent.critic_value(g, &critic_params, xd)
            })
            .collect()
    })();
    g.pop_scope();
    let critic_values = critic_values?;

    let targets: Vec<Var> = match frozen_returns {
        Some(frozen) => {
            if frozen.len() != returns.len() {
                return Err(Error::Invalid("frozen returns: wrong horizon".into()));
            }
            frozen.iter().map(|t| g.constant(t.clone())).collect()
        }
        None => returns.clone(),
    };
    g.push_scope("behavior_loss");
    let losses = (|| -> Result<(Var, Var, Var)> {
        let (actor_loss, _) = behavior_losses(g, &returns, &critic_values)?;
        let (_, critic_loss) = behavior_losses(g, &targets, &critic_values)?;
        let total = g.add(actor_loss, critic_loss)?;
        Ok((actor_loss, critic_loss, total))
    })();
    g.pop_scope();
    let (actor_loss, critic_loss, total) = losses?;
    Ok(BehaviorGraph {
        actor_params,
        critic_params,
        actor_loss,
        critic_loss,
        total,
        imagined,
    })
}

/// One actor step and one critic step from detached posterior states.
#[allow(clippy::too_many_arguments)]
pub fn behavior_update<R: Rng + ?Sized>(
    wm: &WorldModel,
    proto: &ProtoContext,
    agent: &mut Agent,
    h: &Tensor,
    z: &Tensor,
    ablation: Ablation,
    rng: &mut R,
) -> Result<BehaviorLosses> {
    let mut g = Graph::new();
    let bg = build_behavior_graph(&mut g, wm, proto, agent, h, z, ablation, None, rng)?;
    let losses = BehaviorLosses {
        actor: g.value(bg.actor_loss).item(),
        critic: g.value(bg.critic_loss).item(),
    };
    if !losses.actor.is_finite() || !losses.critic.is_finite() {
        return Err(Error::NonFinite(format!(
            "behavior update: actor {} critic {}",
            losses.actor, losses.critic
        )));
    }
    g.backward(bg.total)?;
    agent.actor.accumulate_grads(&g, &bg.actor_params)?;
    agent.critic.accumulate_grads(&g, &bg.critic_params)?;
    Adam::new(agent.config.actor_lr).step(&mut [&mut agent.actor])?;
    Adam::new(agent.config.critic_lr).step(&mut [&mut agent.critic])?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `V_λ(x_τ)` written out as the weighted sum of truncated n-step estimates.
    fn explicit(rewards: &[Real], values: &[Real], gamma: Real, lambda: Real) -> Vec<Real> {
        let h = values.len() - 1;
        let n_step = |tau: usize, n: usize| {
            let end = (tau + n).min(h);
            let mut acc = 0.0;
            for k in tau..end {
                acc += gamma.powi((k - tau) as i32) * rewards[k];
            }
            acc + gamma.powi((end - tau) as i32) * values[end]
        };
        (0..=h)
            .map(|tau| {
                let mut v = 0.0;
                for n in 1..h {
                    v += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(tau, n);
                }
                v + lambda.powi(h as i32 - 1) * n_step(tau, h)
            })
            .collect()
    }

    #[test]
    fn three_step_example() {
        let r = [1.0, 1.0, 1.0];
        let v = [0.0, 0.0, 0.0, 10.0];
        let a = lambda_returns(&r, &v, 0.9, 0.95).unwrap();
        let b = explicit(&r, &v, 0.9, 0.95);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn lambda_limits() {
        let r = [0.5, -1.0, 2.0];
        let v = [0.3, 0.7, -0.2, 4.0];
        let g = 0.9;
        let one = lambda_returns(&r, &v, g, 1.0).unwrap();
        assert_eq!(one[0], 0.5 + g * (-1.0 + g * (2.0 + g * 4.0)));
        let zero = lambda_returns(&r, &v, g, 0.0).unwrap();
        for t in 0..3 {
            assert_eq!(zero[t], r[t] + g * v[t + 1]);
        }
        assert!(lambda_returns(&r, &[1.0], g, 0.5).is_err());
    }

    #[test]
    fn graph_recursion_matches_scalar() {
        let mut g = Graph::new();
        let r = [0.5, -1.0];
        let v = [0.3, 0.7, -0.2];
        let rv: Vec<Var> = r.iter().map(|&x| g.constant(Tensor::vector(vec![x]))).collect();
        let vv: Vec<Var> = v.iter().map(|&x| g.constant(Tensor::vector(vec![x]))).collect();
        let out = lambda_returns_graph(&mut g, &rv, &vv, 0.99, 0.95).unwrap();
        let want = lambda_returns(&r, &v, 0.99, 0.95).unwrap();
        for (o, w) in out.iter().zip(&want) {
            assert_eq!(g.value(*o).item(), *w);
        }
    }

    fn agent(rng: &mut ChaCha8Rng) -> Agent {
        let cfg = AgentConfig {
            hidden: 6,
            ..Default::default()
        };
        Agent::new(cfg, 5, 2, rng).unwrap()
    }

    #[test]
    fn acting_respects_bounds_and_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = agent(&mut rng);
        let mut g = Graph::new();
        let p = a.actor.bind(&mut g, false);
        let x = g.constant(normal_noise(&mut rng, &[50, 5]).clone());
        let x = g.scale(x, 20.0);
        let explore = a.act(&mut g, &p, x, ActMode::Explore, &mut rng).unwrap();
        assert!(explore.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let e1 = a.act(&mut g, &p, x, ActMode::Eval, &mut rng).unwrap();
        let e2 = a.act(&mut g, &p, x, ActMode::Eval, &mut rng).unwrap();
        assert_eq!(e1, e2);
        assert!(e1.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_noise_explore_is_a_plain_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = agent(&mut rng);
        a.config.explore_noise = 0.0;
        let mut g = Graph::new();
        let p = a.actor.bind(&mut g, false);
        let x = g.constant(normal_noise(&mut rng, &[3, 5]));
        let seed = ChaCha8Rng::seed_from_u64(8);
        let explore = a.act(&mut g, &p, x, ActMode::Explore, &mut seed.clone()).unwrap();
        let dist = a.actor_dist(&mut g, &p, x).unwrap();
        let noise = normal_noise(&mut seed.clone(), &[3, 2]);
        let plain = a.sample_action(&mut g, &dist, noise).unwrap();
        assert_eq!(&explore, g.value(plain));
    }

    #[test]
    fn zero_critic_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = agent(&mut rng);
        for (_, p) in a.critic.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let p = a.critic.bind(&mut g, false);
        let x = g.constant(normal_noise(&mut rng, &[4, 5]));
        let v = a.critic_value(&mut g, &p, x).unwrap();
        assert_eq!(g.value(v).data(), &[0.0; 4]);
    }

    #[test]
    fn critic_loss_zero_when_values_match_and_actor_sign() {
        let mut g = Graph::new();
        let ret = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let (actor, critic) = behavior_losses(&mut g, &[ret], &[ret]).unwrap();
        assert_eq!(g.value(critic).item(), 0.0);
        g.backward(actor).unwrap();
        assert!(g.grad(ret).unwrap().data().iter().all(|&d| d < 0.0));
    }
}
