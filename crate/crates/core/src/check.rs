//! Built-in property suites behind `protocad check`.
//!
//! Each suite returns `Ok` with a short summary or `Err` naming the failing
//! property with observed and expected values.

use std::fmt::Write as _;
use std::time::Instant;

use protocad_tensor::{Graph, ParamSet, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::behavior::{behavior_update, build_behavior_graph, lambda_returns};
use crate::config::{Profile, RunConfig};
use crate::env::Task;
use crate::nn::{init_mlp, mlp, normal_noise};
use crate::proto::{
    feature_dim, feature_path, sinkhorn, sinkhorn_assign, temporal_crossover_loss, Ablation,
    PROTOTYPES,
};
use crate::replay::Batch;
use crate::update::{build_model_graph, Models};
use crate::world_model::unit_nll;

pub const FD_STEP: Real = 1e-5;
pub const FD_TOL: Real = 1e-4;

pub type SuiteResult = std::result::Result<String, String>;

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub result: SuiteResult,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub suites: Vec<SuiteOutcome>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.result.is_ok())
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:<6} {:>8}  detail\n", "suite", "status", "seconds");
        for s in &self.suites {
            let (status, detail) = match &s.result {
                Ok(d) => ("pass", d.as_str()),
                Err(d) => ("FAIL", d.as_str()),
            };
            let _ = writeln!(out, "{:<22} {:<6} {:>8.2}  {}", s.name, status, s.seconds, detail);
        }
        out
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> SuiteResult) -> SuiteOutcome {
    let t = Instant::now();
    let result = f();
    SuiteOutcome {
        name,
        result,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Every suite with the production wiring.
pub fn run_all(seed: u64) -> Report {
    Report {
        suites: vec![
            timed("gradients", || gradient_suite(seed)),
            timed("sinkhorn_marginals", || sinkhorn_suite(seed)),
            timed("lambda_returns", || lambda_suite(seed)),
            timed("crossover_loss", crossover_suite),
            timed("gradient_isolation", || isolation_suite(seed, RewardWiring::State)),
        ],
    }
}

/// Small config used by the suites: every dimension at most 8.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::profile(Profile::Desk, Task::PendulumSwingup);
    cfg.batch_size = 2;
    cfg.seq_len = 4;
    cfg.world.h_dim = 4;
    cfg.world.z_dim = 2;
    cfg.world.hidden = 5;
    cfg.world.free_nats = 0.0;
    cfg.proto.k = 3;
    cfg.proto.d = 3;
    cfg.agent.hidden = 5;
    cfg.agent.horizon = 3;
    cfg
}

pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, cfg: &RunConfig) -> Batch {
    let (b, m) = (cfg.batch_size, cfg.seq_len);
    let (od, ad) = (cfg.task.obs_dim(), cfg.task.act_dim());
    Batch {
        obs: (0..m).map(|_| normal_noise(rng, &[b, od])).collect(),
        prev_act: (0..m).map(|_| normal_noise(rng, &[b, ad])).collect(),
        rew: (0..m).map(|_| normal_noise(rng, &[b, 1])).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Kl,
    Obs,
    Rew,
    Crossover,
    Actor,
    Critic,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Kl,
        Term::Obs,
        Term::Rew,
        Term::Crossover,
        Term::Actor,
        Term::Critic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Kl => "kl",
            Term::Obs => "obs",
            Term::Rew => "reward",
            Term::Crossover => "crossover",
            Term::Actor => "actor",
            Term::Critic => "critic",
        }
    }

    fn groups(self) -> &'static [usize] {
        match self {
            Term::Actor => &[4],
            Term::Critic => &[5],
            _ => &[0, 1, 3],
        }
    }
}

fn group_mut(models: &mut Models, i: usize) -> &mut ParamSet {
    match i {
        0 => &mut models.world.params,
        1 => &mut models.proto.projector,
        2 => &mut models.proto.target_projector,
        3 => &mut models.proto.prototypes,
        4 => &mut models.agent.actor,
        _ => &mut models.agent.critic,
    }
}

/// Fixed inputs for evaluating one loss term as a function of the parameters.
pub struct TermFixture {
    pub cfg: RunConfig,
    pub batch: Batch,
    pub view2: Vec<Tensor>,
    pub targets: Tensor,
    pub h: Tensor,
    pub z: Tensor,
    pub returns: Vec<Tensor>,
    pub noise_seed: u64,
}

impl TermFixture {
    pub fn new(models: &Models, cfg: RunConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, &cfg);
        let view2: Vec<Tensor> = batch
            .obs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|v| *v *= 1.1);
                t
            })
            .collect();
        let n = cfg.batch_size * cfg.seq_len;
        let noise_seed = rng.random();
        let mut fx = Self {
            h: normal_noise(&mut rng, &[n, cfg.world.h_dim]),
            z: normal_noise(&mut rng, &[n, cfg.world.z_dim]),
            returns: (0..=cfg.agent.horizon).map(|_| normal_noise(&mut rng, &[n])).collect(),
            targets: Tensor::zeros(&[0]),
            cfg,
            batch,
            view2,
            noise_seed,
        };
        let mut g = Graph::new();
        let mg = build_model_graph(
            &mut g,
            models,
            &fx.batch,
            &fx.batch.obs,
            &fx.view2,
            fx.cfg.ablation,
            None,
            &mut ChaCha8Rng::seed_from_u64(noise_seed),
        )
        .expect("fixture graph");
        fx.targets = g.value(mg.w_bar).clone();
        fx
    }

    /// Value of `term`; with `grads`, backpropagate and store parameter gradients in `models`.
    pub fn eval(&self, models: &mut Models, term: Term, grads: bool) -> Real {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut g = Graph::new();
        match term {
            Term::Actor | Term::Critic => {
                let bg = build_behavior_graph(
                    &mut g,
                    &models.world,
                    &models.proto,
                    &models.agent,
                    &self.h,
                    &self.z,
                    self.cfg.ablation,
                    Some(&self.returns),
                    &mut rng,
                )
                .expect("behavior graph");
                let loss = if term == Term::Actor { bg.actor_loss } else { bg.critic_loss };
                if grads {
                    g.backward(loss).expect("scalar loss");
                    models.agent.actor.accumulate_grads(&g, &bg.actor_params).expect("layout");
                    models.agent.critic.accumulate_grads(&g, &bg.critic_params).expect("layout");
                }
                g.value(loss).item()
            }
            _ => {
                let mg = build_model_graph(
                    &mut g,
                    models,
                    &self.batch,
                    &self.batch.obs,
                    &self.view2,
                    self.cfg.ablation,
                    Some(&self.targets),
                    &mut rng,
                )
                .expect("model graph");
                let loss = match term {
                    Term::Kl => mg.kl,
                    Term::Obs => mg.obs,
                    Term::Rew => mg.rew,
                    _ => mg.tcswav,
                };
                if grads {
                    g.backward(loss).expect("scalar loss");
                    models.world.params.accumulate_grads(&g, &mg.world).expect("layout");
                    models.proto.projector.accumulate_grads(&g, &mg.projector).expect("layout");
                    models.proto.prototypes.accumulate_grads(&g, &mg.prototypes).expect("layout");
                }
                g.value(loss).item()
            }
        }
    }
}

/// Largest relative error between reverse-mode and central-difference gradients of `term`.
pub fn term_gradient_error(models: &Models, fx: &TermFixture, term: Term) -> (Real, usize) {
    let mut analytic = models.clone();
    fx.eval(&mut analytic, term, true);
    let mut worst: Real = 0.0;
    let mut checked = 0;
    for &gi in term.groups() {
        let names: Vec<String> = group_mut(&mut analytic, gi).names().map(String::from).collect();
        for name in names {
            let p = group_mut(&mut analytic, gi).get(&name).expect("name");
            let grad = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            for i in 0..grad.len() {
                let mut probe = models.clone();
                let at = |delta: Real, probe: &mut Models| {
                    let p = group_mut(probe, gi).get_mut(&name).expect("name");
                    p.value.data_mut()[i] += delta;
                    let v = fx.eval(probe, term, false);
                    group_mut(probe, gi).get_mut(&name).expect("name").value.data_mut()[i] -= delta;
                    v
                };
                let plus = at(FD_STEP, &mut probe);
                let minus = at(-FD_STEP, &mut probe);
                let fd = (plus - minus) / (2.0 * FD_STEP);
                let a = grad.data()[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

pub fn gradient_suite(seed: u64) -> SuiteResult {
    let cfg = tiny_config();
    let models = Models::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
    let fx = TermFixture::new(&models, cfg, seed.wrapping_add(1));
    let mut parts = Vec::new();
    for term in Term::ALL {
        let (err, n) = term_gradient_error(&models, &fx, term);
        if !(err <= FD_TOL) {
            return Err(format!(
                "{} loss: max relative error {err:.3e} over {n} entries, expected <= {FD_TOL:e}",
                term.name()
            ));
        }
        parts.push(format!("{} {err:.1e}", term.name()));
    }
    Ok(parts.join(", "))
}

pub fn sinkhorn_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (64usize, 8usize);
    let mut worst_col: Real = 0.0;
    let mut worst_row: Real = 0.0;
    for _ in 0..20 {
        let scores = normal_noise(&mut rng, &[n, k]);
        for (iters, eps) in [(50, 0.5), (3, 0.05)] {
            let q = sinkhorn(&scores, eps, iters).map_err(|e| e.to_string())?;
            for r in 0..n {
                worst_row = worst_row.max((q.row(r).iter().sum::<Real>() - 1.0).abs());
            }
            if iters == 50 {
                for c in 0..k {
                    let col: Real = (0..n).map(|r| q.row(r)[c]).sum();
                    worst_col = worst_col.max((col - n as Real / k as Real).abs());
                }
            }
        }
    }
    if worst_col > 1e-4 {
        return Err(format!("column sums off by {worst_col:.3e}, expected <= 1e-4"));
    }
    if worst_row > 1e-6 {
        return Err(format!("row sums off by {worst_row:.3e}, expected <= 1e-6"));
    }
    let mut g = Graph::new();
    let u = g.leaf(normal_noise(&mut rng, &[n, 4]));
    let c = g.leaf(normal_noise(&mut rng, &[k, 4]));
    let w = sinkhorn_assign(&mut g, u, c, 0.05, 3).map_err(|e| e.to_string())?;
    let sq = g.square(w);
    let loss = g.sum_all(sq);
    g.backward(loss).map_err(|e| e.to_string())?;
    if g.grad(u).is_some() || g.grad(c).is_some() {
        return Err("gradient reached projections or prototypes through the targets".into());
    }
    Ok(format!("col {worst_col:.1e}, row {worst_row:.1e}, gradient-free"))
}

/// `V_λ` from the weighted sum of truncated n-step returns.
pub fn lambda_explicit(rewards: &[Real], values: &[Real], gamma: Real, lambda: Real) -> Vec<Real> {
    let h = values.len() - 1;
    let n_step = |tau: usize, n: usize| {
        let end = (tau + n).min(h);
        let mut acc = 0.0;
        let mut disc = 1.0;
        for r in &rewards[tau..end] {
            acc += disc * r;
            disc *= gamma;
        }
        acc + disc * values[end]
    };
    (0..=h)
        .map(|tau| {
            let mut v = 0.0;
            let mut w = 1.0 - lambda;
            for n in 1..h {
                v += w * n_step(tau, n);
                w *= lambda;
            }
            v + lambda.powi(h as i32 - 1) * n_step(tau, h)
        })
        .collect()
}

pub fn lambda_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Real = 0.0;
    for _ in 0..1000 {
        let h = rng.random_range(1..=5);
        let r: Vec<Real> = (0..h).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<Real> = (0..=h).map(|_| rng.random_range(-5.0..5.0)).collect();
        let gamma = rng.random_range(0.01..0.999);
        let lambda = match rng.random_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..1.0),
        };
        let rec = lambda_returns(&r, &v, gamma, lambda).map_err(|e| e.to_string())?;
        for (a, b) in rec.iter().zip(lambda_explicit(&r, &v, gamma, lambda)) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-10 {
        return Err(format!("recursion vs expansion differ by {worst:.3e}, expected <= 1e-10"));
    }
    Ok(format!("1000 draws, max error {worst:.1e}"))
}

/// Hand-expanded crossover loss for one sequence of probabilities `[M][K]`.
pub fn crossover_expanded(w: &[Vec<Real>], w_bar: &[Vec<Real>], crossed: bool) -> Real {
    let m = w.len();
    let half = m / 2;
    let mut total = 0.0;
    for t in 0..m {
        let paired = if !crossed {
            t
        } else if t < half {
            t + half
        } else {
            t - half
        };
        for k in 0..w[t].len() {
            total += w_bar[t][k] * w[paired][k].ln();
        }
    }
    -total / m as Real
}

fn crossover_graph(w: &[Vec<Real>], w_bar: &[Vec<Real>], crossed: bool) -> Real {
    let mut g = Graph::new();
    let lw: Vec<Vec<Real>> = w.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let lw = g.constant(Tensor::from_rows(&lw).expect("rows"));
    let wb = g.constant(Tensor::from_rows(w_bar).expect("rows"));
    let l = temporal_crossover_loss(&mut g, lw, wb, w.len(), crossed).expect("even length");
    g.value(l).item()
}

pub fn crossover_suite() -> SuiteResult {
    let onehot = vec![vec![1.0, 0.0]; 4];
    let uniform = vec![vec![0.5, 0.5]; 4];
    let v = crossover_graph(&uniform, &onehot, true);
    let ln2 = std::f64::consts::LN_2 as Real;
    if (v - ln2).abs() > 1e-12 {
        return Err(format!("one-hot vs uniform: got {v}, expected {ln2}"));
    }
    let w = vec![
        vec![0.9, 0.1],
        vec![0.3, 0.7],
        vec![0.6, 0.4],
        vec![0.2, 0.8],
    ];
    let wb = vec![
        vec![0.25, 0.75],
        vec![1.0, 0.0],
        vec![0.5, 0.5],
        vec![0.1, 0.9],
    ];
    for crossed in [true, false] {
        let got = crossover_graph(&w, &wb, crossed);
        let want = crossover_expanded(&w, &wb, crossed);
        if (got - want).abs() > 1e-12 {
            return Err(format!("crossed={crossed}: got {got}, expanded {want}"));
        }
    }
    let steady = vec![vec![0.7, 0.3]; 4];
    let steady_bar = vec![vec![0.4, 0.6]; 4];
    let a = crossover_graph(&steady, &steady_bar, true);
    let b = crossover_graph(&steady, &steady_bar, false);
    if a != b {
        return Err(format!("time-constant case: crossed {a} vs plain {b}"));
    }
    Ok("log 2 case, expansions and time-constant degeneracy hold".into())
}

/// Which input the reward head reads in the isolation suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardWiring {
    /// Production wiring: latent state only.
    State,
    /// Negative control: the full latent feature, context included.
    Feature,
}

fn zero_or_absent(g: &Graph, v: Var) -> bool {
    g.grad(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0))
}

pub fn isolation_suite(seed: u64, wiring: RewardWiring) -> SuiteResult {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut models = Models::new(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let batch = random_batch(&mut rng, &cfg);

    let mut g = Graph::new();
    let (rew_loss, projector, protos) = match wiring {
        RewardWiring::State => {
            let mg = build_model_graph(&mut g, &models, &batch, &batch.obs, &batch.obs, cfg.ablation, None, &mut rng)
                .map_err(|e| e.to_string())?;
            (mg.rew, mg.projector, mg.prototypes)
        }
        RewardWiring::Feature => {
            let mut head = ParamSet::new();
            init_mlp(&mut head, "rew", cfg.feature_dim(), 5, 2, 1, &mut rng).map_err(|e| e.to_string())?;
            let hb = head.bind(&mut g, true);
            let projector = models.proto.projector.bind(&mut g, true);
            let protos = models.proto.prototypes.bind(&mut g, true);
            let s = g.constant(normal_noise(&mut rng, &[4, cfg.world.state_dim()]));
            let fp = feature_path(&mut g, &projector, protos.get(PROTOTYPES), s, 0.1, cfg.ablation, false)
                .map_err(|e| e.to_string())?;
            let mean = mlp(&mut g, &hb, "rew", 2, fp.x).map_err(|e| e.to_string())?;
            let std = g.constant(Tensor::full(&[4, 1], 1.0));
            let dist = protocad_tensor::DiagGaussian::new(&mut g, mean, std).map_err(|e| e.to_string())?;
            let target = g.constant(normal_noise(&mut rng, &[4, 1]));
            let l = unit_nll(&mut g, &dist, target).map_err(|e| e.to_string())?;
            (l, projector, protos)
        }
    };
    g.backward(rew_loss).map_err(|e| e.to_string())?;
    for (name, v) in projector.iter().chain(protos.iter()) {
        if !zero_or_absent(&g, v) {
            let norm = g.grad(v).map_or(0.0, |t| t.norm());
            return Err(format!(
                "reward loss reaches `{name}`: gradient norm {norm:.3e}, expected exactly 0"
            ));
        }
    }

    let before = models.clone();
    let n = cfg.batch_size * cfg.seq_len;
    let h = normal_noise(&mut rng, &[n, cfg.world.h_dim]);
    let z = normal_noise(&mut rng, &[n, cfg.world.z_dim]);
    behavior_update(&models.world, &models.proto, &mut models.agent, &h, &z, cfg.ablation, &mut rng)
        .map_err(|e| e.to_string())?;
    if models.world != before.world || models.proto != before.proto {
        return Err("behavior update modified world model, projector or prototypes".into());
    }
    if models.agent.actor == before.agent.actor || models.agent.critic == before.agent.critic {
        return Err("behavior update left actor or critic unchanged".into());
    }

    let mut g = Graph::new();
    let bg = build_behavior_graph(&mut g, &models.world, &models.proto, &models.agent, &h, &z, cfg.ablation, None, &mut rng)
        .map_err(|e| e.to_string())?;
    g.backward(bg.critic_loss).map_err(|e| e.to_string())?;
    for (name, v) in bg.actor_params.iter() {
        if !zero_or_absent(&g, v) {
            return Err(format!("critic loss reaches actor parameter `{name}`"));
        }
    }

    for ablation in [Ablation::Full, Ablation::NoProjection] {
        let want = feature_dim(cfg.world.state_dim(), cfg.proto.d, ablation);
        let mut c = cfg.clone();
        c.ablation = ablation;
        let m = Models::new(&c, &mut rng).map_err(|e| e.to_string())?;
        if m.world.feature_dim != want || m.agent.feature_dim != want {
            return Err(format!("{ablation}: feature width {} expected {want}", m.world.feature_dim));
        }
    }
    Ok("reward head isolated, behavior update partitioned".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run_all(0);
        assert!(report.passed(), "{}", report.table());
    }

    #[test]
    fn broken_reward_wiring_is_caught() {
        let r = isolation_suite(0, RewardWiring::Feature);
        assert!(r.is_err());
        assert!(r.unwrap_err().contains("reward loss reaches"));
    }
}
