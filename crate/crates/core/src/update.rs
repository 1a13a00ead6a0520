//! The model update: two augmented views, filtering, prototype assignment,
//! and one optimizer step over the world model, projector and prototypes.

use protocad_tensor::{Adam, Bound, Graph, Real, Tensor, Var};
use rand::Rng;

use crate::behavior::Agent;
use crate::config::RunConfig;
use crate::env::augment_views;
use crate::proto::{
    feature_path, project, sinkhorn_assign, temporal_crossover_loss, Ablation, ProtoContext,
    PROTOTYPES,
};
use crate::replay::Batch;
use crate::world_model::{kl_objective, unit_nll, RssmState, WorldModel};
use crate::{Error, Result};

/// Every learnable component of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub world: WorldModel,
    pub proto: ProtoContext,
    pub agent: Agent,
}

impl Models {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let task = cfg.task;
        let fdim = cfg.feature_dim();
        let world = WorldModel::new(cfg.world.clone(), task.obs_dim(), task.act_dim(), fdim, rng)?;
        let proto = ProtoContext::new(cfg.proto.clone(), cfg.world.state_dim(), rng)?;
        let agent = Agent::new(cfg.agent.clone(), fdim, task.act_dim(), rng)?;
        Ok(Self { world, proto, agent })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelLosses {
    pub kl: Real,
    pub obs: Real,
    pub rew: Real,
    pub tcswav: Real,
    pub total: Real,
}

impl ModelLosses {
    fn all_finite(&self) -> bool {
        [self.kl, self.obs, self.rew, self.tcswav, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Handles into a built model-loss graph.
pub struct ModelGraph {
    pub world: Bound,
    pub projector: Bound,
    pub prototypes: Bound,
    pub kl: Var,
    pub obs: Var,
    pub rew: Var,
    pub tcswav: Var,
    pub total: Var,
    /// View-1 posterior states stacked time-major, `[M * B, dim]`.
    pub h: Var,
    pub z: Var,
    pub w_bar: Var,
}

/// Build the full model loss for one batch and its two views.
///
/// View 2 runs through constant copies of the model and target projector.
/// `frozen_targets` substitutes fixed assignment targets for the Sinkhorn
/// output so that finite differences see the same targets as the analytic
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn build_model_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    models: &Models,
    batch: &Batch,
    view1: &[Tensor],
    view2: &[Tensor],
    ablation: Ablation,
    frozen_targets: Option<&Tensor>,
    rng: &mut R,
) -> Result<ModelGraph> {
    let wm = &models.world;
    let pc = &models.proto;
    let m = batch.seq_len();
    let world = wm.params.bind(g, true);
    let projector = pc.projector.bind(g, true);
    let prototypes = pc.prototypes.bind(g, true);
    let c = prototypes.get(PROTOTYPES);

    g.push_scope("rssm");
    let rollout = (|| -> Result<_> {
        let acts: Vec<Var> = batch.prev_act.iter().map(|t| g.constant(t.clone())).collect();
        let o1: Vec<Var> = view1.iter().map(|t| g.constant(t.clone())).collect();
        let seq1 = wm.observe_sequence(g, &world, &o1, &acts, None, true, rng)?;
        let world_fixed = wm.params.bind(g, false);
        let o2: Vec<Var> = view2.iter().map(|t| g.constant(t.clone())).collect();
        let seq2 = wm.observe_sequence(g, &world_fixed, &o2, &acts, None, false, rng)?;
        let stack = |g: &mut Graph, states: &[RssmState], pick: fn(&RssmState) -> Var| {
            let parts: Vec<Var> = states.iter().map(pick).collect();
            g.concat(&parts, 0)
        };
        let h1 = stack(g, &seq1.states, |s| s.h)?;
        let z1 = stack(g, &seq1.states, |s| s.z)?;
        let s1 = g.concat(&[h1, z1], 1)?;
        let h2 = stack(g, &seq2.states, |s| s.h)?;
        let z2 = stack(g, &seq2.states, |s| s.z)?;
        let s2 = g.concat(&[h2, z2], 1)?;
        Ok((seq1, s1, s2, h1, z1))
    })();
    g.pop_scope();
    let (seq1, s1, s2, h1, z1) = rollout?;

    let fp = feature_path(
        g,
        &projector,
        c,
        s1,
        pc.config.temperature,
        ablation,
        pc.config.detach_context_in_decoder,
    )?;

    g.push_scope("sinkhorn");
    let targets = (|| -> Result<Var> {
        let target_proj = pc.target_projector.bind(g, false);
        let u_bar = project(g, &target_proj, s2)?;
        let w_bar = sinkhorn_assign(g, u_bar, c, pc.config.sinkhorn_eps, pc.config.sinkhorn_iters)?;
        match frozen_targets {
            Some(t) => {
                if t.shape() != g.shape(w_bar) {
                    return Err(Error::Invalid("frozen targets: wrong shape".into()));
                }
                Ok(g.constant(t.clone()))
            }
            None => Ok(w_bar),
        }
    })();
    g.pop_scope();
    let w_bar = targets?;

    g.push_scope("swav_loss");
    let tc = (|| -> Result<Var> {
        let log_w = g.log_softmax(fp.logits, 1, pc.config.temperature)?;
        temporal_crossover_loss(g, log_w, w_bar, m, ablation.crossed())
    })();
    g.pop_scope();
    let tcswav = tc?;

    g.push_scope("decoder");
    let obs = (|| -> Result<Var> {
        let dist = wm.decode_obs(g, &world, fp.x)?;
        let parts: Vec<Var> = view1.iter().map(|t| g.constant(t.clone())).collect();
        let target = g.concat(&parts, 0)?;
        unit_nll(g, &dist, target)
    })();
    g.pop_scope();
    let obs = obs?;

    g.push_scope("reward");
    let rew = (|| -> Result<Var> {
        let dist = wm.predict_reward(g, &world, s1)?;
        let parts: Vec<Var> = batch.rew.iter().map(|t| g.constant(t.clone())).collect();
        let target = g.concat(&parts, 0)?;
        unit_nll(g, &dist, target)
    })();
    g.pop_scope();
    let rew = rew?;

    g.push_scope("kl");
    let kl = kl_objective(g, &seq1.posteriors, &seq1.priors, wm.config.beta, wm.config.free_nats);
    g.pop_scope();
    let kl = kl?;

    g.push_scope("total");
    let a = g.add(kl, obs)?;
    let b = g.add(rew, tcswav)?;
    let total = g.add(a, b)?;
    g.pop_scope();

    Ok(ModelGraph {
        world,
        projector,
        prototypes,
        kl,
        obs,
        rew,
        tcswav,
        total,
        h: h1,
        z: z1,
        w_bar,
    })
}

/// Result of one model update.
#[derive(Clone, Debug)]
pub struct ModelUpdate {
    pub losses: ModelLosses,
    /// Detached view-1 posterior states, time-major `[M * B, dim]`.
    pub h: Tensor,
    pub z: Tensor,
}

/// Augment, build the loss, step the optimizer, then update the target
/// projector and renormalize prototypes.
pub fn world_model_update<R: Rng + ?Sized>(
    models: &mut Models,
    batch: &Batch,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<ModelUpdate> {
    let [lo, hi] = cfg.augment_range;
    let (v1, v2) = augment_views(&batch.obs, rng, lo, hi)?;
    let mut g = Graph::new();
    let mg = build_model_graph(&mut g, models, batch, &v1, &v2, cfg.ablation, None, rng)?;
    let losses = ModelLosses {
        kl: g.value(mg.kl).item(),
        obs: g.value(mg.obs).item(),
        rew: g.value(mg.rew).item(),
        tcswav: g.value(mg.tcswav).item(),
        total: g.value(mg.total).item(),
    };
    if !losses.all_finite() {
        return Err(Error::NonFinite(format!(
            "model update: kl {} obs {} rew {} tcswav {} total {}",
            losses.kl, losses.obs, losses.rew, losses.tcswav, losses.total
        )));
    }
    g.backward(mg.total)?;
    models.world.params.accumulate_grads(&g, &mg.world)?;
    models.proto.projector.accumulate_grads(&g, &mg.projector)?;
    models.proto.prototypes.accumulate_grads(&g, &mg.prototypes)?;
    Adam::new(cfg.model_lr).step(&mut [
        &mut models.world.params,
        &mut models.proto.projector,
        &mut models.proto.prototypes,
    ])?;
    models.proto.update_target()?;
    models.proto.renormalize_prototypes(rng);
    Ok(ModelUpdate {
        losses,
        h: g.value(mg.h).clone(),
        z: g.value(mg.z).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;
    use crate::nn::normal_noise;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::profile(crate::config::Profile::Desk, Task::PendulumSwingup);
        cfg.batch_size = 3;
        cfg.seq_len = 4;
        cfg.world.h_dim = 5;
        cfg.world.z_dim = 3;
        cfg.world.hidden = 6;
        cfg.proto.k = 4;
        cfg.proto.d = 3;
        cfg.agent.hidden = 6;
        cfg.agent.horizon = 3;
        cfg
    }

    fn batch(rng: &mut ChaCha8Rng, cfg: &RunConfig) -> Batch {
        let (b, m) = (cfg.batch_size, cfg.seq_len);
        Batch {
            obs: (0..m).map(|_| normal_noise(rng, &[b, 3])).collect(),
            prev_act: (0..m).map(|_| normal_noise(rng, &[b, 1])).collect(),
            rew: (0..m).map(|_| normal_noise(rng, &[b, 1])).collect(),
        }
    }

    #[test]
    fn total_is_sum_and_prototypes_stay_unit() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut models = Models::new(&cfg, &mut rng).unwrap();
        let b = batch(&mut rng, &cfg);
        for _ in 0..3 {
            let up = world_model_update(&mut models, &b, &cfg, &mut rng).unwrap();
            let l = up.losses;
            assert!((l.kl + l.obs + l.rew + l.tcswav - l.total).abs() < 1e-9);
            assert_eq!(up.h.shape(), &[12, 5]);
            let c = models.proto.prototype_matrix();
            for r in 0..4 {
                let n: Real = c.row(r).iter().map(|v| v * v).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn target_projector_never_gets_gradients() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let models = Models::new(&cfg, &mut rng).unwrap();
        let b = batch(&mut rng, &cfg);
        let mut g = Graph::new();
        let mg =
            build_model_graph(&mut g, &models, &b, &b.obs, &b.obs, Ablation::Full, None, &mut rng)
                .unwrap();
        g.backward(mg.total).unwrap();
        assert!(!g.requires_grad(mg.w_bar));
        assert!(g.grad(mg.w_bar).is_none());
    }
}
