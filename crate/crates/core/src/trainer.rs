//! Training loop, interaction, evaluation, metrics and checkpoints.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/resolved-config.json
//! <out>/metrics.jsonl
//! <out>/episodes/episode_NNNNNN.pcad
//! <out>/checkpoint/latest.ckpt
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use protocad_tensor::{Checkpoint, Graph, ParamSet, Real, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::behavior::{behavior_update, ActMode, BehaviorLosses};
use crate::config::RunConfig;
use crate::env::{context_grid, sample_context, Env, EnvContext, Split};
use crate::proto::{feature_path, FeatureParts, PROTOTYPES};
use crate::replay::{EpisodeRecord, ReplayBuffer};
use crate::update::{world_model_update, ModelLosses, Models};
use crate::world_model::RssmState;
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint/latest.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const EPISODES_DIR: &str = "episodes";
pub const GRID_HEADER: &str = "mass_mult,damping_mult,split,return_mean,return_std,episodes";

/// Parameter groups stored in a checkpoint, in order.
pub const GROUPS: [&str; 6] = [
    "world",
    "projector",
    "target_projector",
    "prototypes",
    "actor",
    "critic",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    EvalTrain,
    EvalTest,
}

/// One line of `metrics.jsonl`. Loss fields are averages over the updates
/// of the most recent cycle and `null` before the first update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub env_step: usize,
    pub phase: Phase,
    pub return_mean: f64,
    pub return_std: f64,
    pub loss_kl: Option<f64>,
    pub loss_obs: Option<f64>,
    pub loss_rew: Option<f64>,
    pub loss_tcswav: Option<f64>,
    pub loss_actor: Option<f64>,
    pub loss_critic: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleLosses {
    pub kl: f64,
    pub obs: f64,
    pub rew: f64,
    pub tcswav: f64,
    pub actor: f64,
    pub critic: f64,
}

impl CycleLosses {
    fn add(&mut self, m: &ModelLosses, b: &BehaviorLosses) {
        self.kl += m.kl as f64;
        self.obs += m.obs as f64;
        self.rew += m.rew as f64;
        self.tcswav += m.tcswav as f64;
        self.actor += b.actor as f64;
        self.critic += b.critic as f64;
    }

    fn scaled(mut self, n: usize) -> Self {
        let k = 1.0 / n.max(1) as f64;
        for v in [
            &mut self.kl,
            &mut self.obs,
            &mut self.rew,
            &mut self.tcswav,
            &mut self.actor,
            &mut self.critic,
        ] {
            *v *= k;
        }
        self
    }
}

/// How actions are chosen during an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Random,
    Agent(ActMode),
}

/// Per-step record of the context features seen while acting.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub context: EnvContext,
    pub step: usize,
    pub u: Vec<Real>,
    pub e: Vec<Real>,
    pub argmax: usize,
    pub max: Real,
}

/// Run one episode; `observer` sees the feature parts at every decision step.
pub fn run_episode<R: Rng + ?Sized>(
    models: &Models,
    cfg: &RunConfig,
    context: EnvContext,
    env_seed: u64,
    policy: Policy,
    rng: &mut R,
    mut observer: Option<&mut dyn FnMut(usize, &Graph, &FeatureParts)>,
) -> Result<EpisodeRecord> {
    let task = cfg.task;
    let mut env = Env::with_timing(task, context, cfg.action_repeat, cfg.episode_len);
    let obs0 = env.reset(env_seed);
    let mut ep = EpisodeRecord::new(task, context, env_seed, &obs0);
    let act_dim = task.act_dim();
    let mut obs = obs0;
    let mut prev_action = vec![0.0 as Real; act_dim];
    let mut h = Tensor::zeros(&[1, cfg.world.h_dim]);
    let mut z = Tensor::zeros(&[1, cfg.world.z_dim]);
    for step in 0..cfg.episode_len {
        let action = match policy {
            Policy::Random => (0..act_dim)
                .map(|_| rng.random_range(-1.0..=1.0) as Real)
                .collect::<Vec<_>>(),
            Policy::Agent(mode) => {
                let mut g = Graph::new();
                let world = models.world.params.bind(&mut g, false);
                let proj = models.proto.projector.bind(&mut g, false);
                let c = models.proto.prototypes.bind(&mut g, false).get(PROTOTYPES);
                let actor = models.agent.actor.bind(&mut g, false);
                let prev = RssmState {
                    h: g.constant(h.clone()),
                    z: g.constant(z.clone()),
                    dist: None,
                };
                let a = g.constant(Tensor::new(&[1, act_dim], prev_action.clone())?);
                let o = g.constant(Tensor::new(&[1, obs.len()], obs.clone())?);
                let state = models.world.observe_step(&mut g, &world, &prev, a, o, rng)?;
                let s = state.features(&mut g)?;
                let fp = feature_path(
                    &mut g,
                    &proj,
                    c,
                    s,
                    models.proto.config.temperature,
                    cfg.ablation,
                    false,
                )?;
                if let Some(f) = observer.as_mut() {
                    f(step, &g, &fp);
                }
                let act = models.agent.act(&mut g, &actor, fp.x, mode, rng)?;
                h = g.value(state.h).clone();
                z = g.value(state.z).clone();
                act.into_data()
            }
        };
        let tr = env.step(&action);
        ep.push(&tr.action, tr.reward, &tr.observation);
        prev_action = tr.action;
        obs = tr.observation;
        if tr.done {
            break;
        }
    }
    Ok(ep)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub task: String,
    pub split: Split,
    pub episodes: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub returns: Vec<f64>,
}

/// Independent generator for episode `index` of an evaluation seeded by `seed`.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Worker count for evaluation, from `PROTOCAD_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("PROTOCAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Run `n` independent jobs on up to `threads` workers; results in index order.
fn parallel_map<T: Send>(
    n: usize,
    threads: usize,
    job: &(dyn Fn(usize) -> Result<T> + Sync),
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(job).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots
            .chunks_mut(n.div_ceil(threads))
            .enumerate()
            .map(|(c, chunk)| {
                let base = c * n.div_ceil(threads);
                scope.spawn(move || {
                    for (i, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(job(base + i));
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("evaluation worker panicked");
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Returns of `n` episodes with contexts drawn from `split`.
pub fn evaluate(
    models: &Models,
    cfg: &RunConfig,
    split: Split,
    n: usize,
    seed: u64,
    policy: Policy,
    threads: usize,
) -> Result<EvalSummary> {
    let returns = parallel_map(n, threads, &|i| {
        let mut rng = episode_rng(seed, i as u64);
        let ctx = sample_context(cfg.task, split, &cfg.contexts, &mut rng);
        let env_seed = rng.next_u64();
        let ep = run_episode(models, cfg, ctx, env_seed, policy, &mut rng, None)?;
        Ok(ep.total_reward())
    })?;
    let (return_mean, return_std) = mean_std(&returns);
    Ok(EvalSummary {
        task: cfg.task.name().to_string(),
        split,
        episodes: n,
        return_mean,
        return_std,
        returns,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub mass_mult: f64,
    pub damping_mult: f64,
    pub split: Split,
    pub return_mean: f64,
    pub return_std: f64,
    pub episodes: usize,
}

/// `n` episodes per cell of the split's context grid.
pub fn evaluate_grid(
    models: &Models,
    cfg: &RunConfig,
    split: Split,
    n: usize,
    seed: u64,
    policy: Policy,
    threads: usize,
) -> Result<Vec<GridRow>> {
    let grid = context_grid(cfg.task, split, &cfg.contexts);
    let jobs = grid.len() * n;
    let returns = parallel_map(jobs, threads, &|j| {
        let mut rng = episode_rng(seed, j as u64);
        let env_seed = rng.next_u64();
        let ep = run_episode(models, cfg, grid[j / n], env_seed, policy, &mut rng, None)?;
        Ok(ep.total_reward())
    })?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(c, ctx)| {
            let (return_mean, return_std) = mean_std(&returns[c * n..(c + 1) * n]);
            GridRow {
                mass_mult: ctx.mass_mult,
                damping_mult: ctx.damping_mult,
                split,
                return_mean,
                return_std,
                episodes: n,
            }
        })
        .collect())
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mass_mult, r.damping_mult, r.split, r.return_mean, r.return_std, r.episodes
        ));
    }
    out
}

/// Context features of eval-mode episodes, one row per decision step.
pub fn export_features(
    models: &Models,
    cfg: &RunConfig,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    for i in 0..n {
        let mut rng = episode_rng(seed, i as u64);
        let ctx = sample_context(cfg.task, split, &cfg.contexts, &mut rng);
        let env_seed = rng.next_u64();
        let mut record = |step: usize, g: &Graph, fp: &FeatureParts| {
            let w = g.value(fp.w).data();
            let (argmax, max) = w
                .iter()
                .enumerate()
                .fold((0, Real::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
            rows.push(FeatureRow {
                context: ctx,
                step,
                u: g.value(fp.u).data().to_vec(),
                e: g.value(fp.e).data().to_vec(),
                argmax,
                max,
            });
        };
        run_episode(
            models,
            cfg,
            ctx,
            env_seed,
            Policy::Agent(ActMode::Eval),
            &mut rng,
            Some(&mut record),
        )?;
    }
    Ok(rows)
}

pub fn features_csv(task: &str, d: usize, rows: &[FeatureRow]) -> String {
    let mut out = String::from("task,mass_mult,damping_mult,step");
    for prefix in ["u", "e"] {
        for i in 0..d {
            out.push_str(&format!(",{prefix}{i}"));
        }
    }
    out.push_str(",argmax_w,max_w\n");
    for r in rows {
        out.push_str(&format!(
            "{task},{},{},{}",
            r.context.mass_mult, r.context.damping_mult, r.step
        ));
        for v in r.u.iter().chain(&r.e) {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{}\n", r.argmax, r.max));
    }
    out
}

fn push_group(ck: &mut Checkpoint, group: &str, set: &ParamSet) {
    for (name, p) in set.iter() {
        ck.push(format!("{group}/{name}"), p.value.clone());
        ck.push(format!("{group}/{name}#m"), p.m.clone());
        ck.push(format!("{group}/{name}#v"), p.v.clone());
    }
}

fn group_steps(set: &ParamSet) -> serde_json::Map<String, serde_json::Value> {
    set.iter().map(|(n, p)| (n.to_string(), json!(p.step))).collect()
}

fn load_group(ck: &Checkpoint, group: &str, set: &mut ParamSet, with_slots: bool) -> Result<()> {
    let steps = ck.meta.get("param_steps").and_then(|s| s.get(group)).cloned();
    for (name, p) in set.iter_mut() {
        let key = format!("{group}/{name}");
        let load = |k: &str, like: &Tensor| -> Result<Tensor> {
            let t = ck.require(k)?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{k}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        p.value = load(&key, &p.value)?;
        if with_slots {
            p.m = load(&format!("{key}#m"), &p.m)?;
            p.v = load(&format!("{key}#v"), &p.v)?;
            p.step = steps
                .as_ref()
                .and_then(|s| s.get(name))
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("missing step counter for `{key}`")))?;
        }
        p.grad = None;
    }
    Ok(())
}

impl Models {
    fn groups(&self) -> [&ParamSet; 6] {
        [
            &self.world.params,
            &self.proto.projector,
            &self.proto.target_projector,
            &self.proto.prototypes,
            &self.agent.actor,
            &self.agent.critic,
        ]
    }

    fn groups_mut(&mut self) -> [&mut ParamSet; 6] {
        [
            &mut self.world.params,
            &mut self.proto.projector,
            &mut self.proto.target_projector,
            &mut self.proto.prototypes,
            &mut self.agent.actor,
            &mut self.agent.critic,
        ]
    }

    /// Parameters and optimizer slots of all six groups.
    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        let mut steps = serde_json::Map::new();
        for (group, set) in GROUPS.iter().zip(self.groups()) {
            push_group(&mut ck, group, set);
            steps.insert(group.to_string(), json!(group_steps(set)));
        }
        ck.meta = json!({
            "groups": GROUPS,
            "param_steps": steps,
            "config": serde_json::to_value(cfg)?,
        });
        Ok(ck)
    }

    /// Rebuild models from a checkpoint and the config stored in it.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, RunConfig)> {
        let cfg_value = ck
            .meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("manifest has no `config` entry".into()))?;
        let cfg: RunConfig = serde_json::from_value(cfg_value.clone())
            .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let mut models = Models::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (group, set) in GROUPS.iter().zip(models.groups_mut()) {
            load_group(ck, group, set, true)?;
        }
        Ok((models, cfg))
    }
}

/// Load models from a checkpoint file.
pub fn load_models(path: &Path) -> Result<(Models, RunConfig)> {
    let ck = Checkpoint::load(path).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Models::from_checkpoint(&ck)
}

/// State of a training run.
pub struct Trainer {
    pub config: RunConfig,
    pub models: Models,
    pub replay: ReplayBuffer,
    rng: ChaCha8Rng,
    pub env_steps: usize,
    pub updates: u64,
    next_eval: usize,
    last_losses: Option<CycleLosses>,
    metrics: Vec<MetricRecord>,
    out: Option<PathBuf>,
}

impl Trainer {
    /// Fresh run; with `out`, the directory is (re)initialized.
    pub fn new(config: RunConfig, out: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let models = Models::new(&config, &mut rng)?;
        let replay = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let eps = dir.join(EPISODES_DIR);
                if eps.exists() {
                    fs::remove_dir_all(&eps)?;
                }
                let ckpt = dir.join(CHECKPOINT_FILE);
                if ckpt.exists() {
                    fs::remove_file(&ckpt)?;
                }
                fs::write(dir.join(RESOLVED_CONFIG_FILE), config.to_json_pretty()? + "\n")?;
                File::create(dir.join(METRICS_FILE))?;
                ReplayBuffer::open(&eps)?
            }
            None => ReplayBuffer::in_memory(),
        };
        Ok(Self {
            next_eval: config.eval_every,
            config,
            models,
            replay,
            rng,
            env_steps: 0,
            updates: 0,
            last_losses: None,
            metrics: Vec::new(),
            out: out.map(Path::to_path_buf),
        })
    }

    /// Resume from `<out>/checkpoint/latest.ckpt` when present, otherwise start fresh.
    pub fn open(config: RunConfig, out: &Path) -> Result<Self> {
        let ckpt = out.join(CHECKPOINT_FILE);
        if !ckpt.exists() {
            return Self::new(config, Some(out));
        }
        let t = Self::resume(out)?;
        if t.config != config {
            return Err(Error::Config(format!(
                "{} holds a run with a different config; use a fresh --out",
                out.display()
            )));
        }
        Ok(t)
    }

    /// Restore a run from its output directory.
    pub fn resume(out: &Path) -> Result<Self> {
        let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut replay = ReplayBuffer::open(&out.join(EPISODES_DIR))?;
        let metrics_path = out.join(METRICS_FILE);
        let mut t = Self::from_checkpoint(&ck, &mut replay, Some(&metrics_path))?;
        t.replay = replay;
        t.out = Some(out.to_path_buf());
        Ok(t)
    }

    fn from_checkpoint(
        ck: &Checkpoint,
        replay: &mut ReplayBuffer,
        metrics_path: Option<&Path>,
    ) -> Result<Self> {
        let (models, config) = Models::from_checkpoint(ck)?;
        let meta = &ck.meta;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("manifest has no `{k}` entry")))
        };
        let rng: ChaCha8Rng = serde_json::from_value(get("rng")?)
            .map_err(|e| Error::Checkpoint(format!("rng state: {e}")))?;
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .as_u64()
                .ok_or_else(|| Error::Checkpoint(format!("`{k}` is not an integer")))
        };
        let n_eps = num("episodes")? as usize;
        if replay.len() < n_eps {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {n_eps} stored episodes, found {}",
                replay.len()
            )));
        }
        replay.truncate(n_eps)?;
        let metrics: Vec<MetricRecord> = serde_json::from_value(get("metrics")?)
            .map_err(|e| Error::Checkpoint(format!("metrics: {e}")))?;
        if let Some(path) = metrics_path {
            let text: String = metrics
                .iter()
                .map(|m| serde_json::to_string(m).map(|s| s + "\n"))
                .collect::<std::result::Result<_, _>>()?;
            fs::write(path, text)?;
        }
        Ok(Self {
            config,
            models,
            replay: ReplayBuffer::in_memory(),
            rng,
            env_steps: num("env_steps")? as usize,
            updates: num("updates")?,
            next_eval: num("next_eval")? as usize,
            last_losses: serde_json::from_value(get("last_losses")?)
                .map_err(|e| Error::Checkpoint(format!("losses: {e}")))?,
            metrics,
            out: None,
        })
    }

    /// Full training state; episodes are referenced by count, not stored.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.models.to_checkpoint(&self.config)?;
        let meta = ck.meta.as_object_mut().expect("object meta");
        meta.insert("rng".into(), serde_json::to_value(&self.rng)?);
        meta.insert("env_steps".into(), json!(self.env_steps));
        meta.insert("updates".into(), json!(self.updates));
        meta.insert("next_eval".into(), json!(self.next_eval));
        meta.insert("episodes".into(), json!(self.replay.len()));
        meta.insert("last_losses".into(), serde_json::to_value(self.last_losses)?);
        meta.insert("metrics".into(), serde_json::to_value(&self.metrics)?);
        Ok(ck)
    }

    /// Clone of this trainer through a checkpoint round trip, sharing the replay contents.
    pub fn round_trip(&self) -> Result<Self> {
        let mut bytes = Vec::new();
        self.to_checkpoint()?.write_to(&mut bytes)?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        let mut replay = ReplayBuffer::in_memory();
        for ep in self.replay.episodes() {
            replay.add(ep.clone())?;
        }
        let mut t = Self::from_checkpoint(&ck, &mut replay, None)?;
        t.replay = replay;
        Ok(t)
    }

    pub fn save_checkpoint(&self) -> Result<()> {
        if let Some(out) = &self.out {
            let path = out.join(CHECKPOINT_FILE);
            fs::create_dir_all(path.parent().expect("has parent"))?;
            self.to_checkpoint()?.save(&path)?;
        }
        Ok(())
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    pub fn done(&self) -> bool {
        self.env_steps >= self.config.total_steps
    }

    fn record(&mut self, phase: Phase, returns: &[f64]) -> Result<()> {
        let (return_mean, return_std) = mean_std(returns);
        let l = self.last_losses;
        let rec = MetricRecord {
            env_step: self.env_steps,
            phase,
            return_mean,
            return_std,
            loss_kl: l.map(|l| l.kl),
            loss_obs: l.map(|l| l.obs),
            loss_rew: l.map(|l| l.rew),
            loss_tcswav: l.map(|l| l.tcswav),
            loss_actor: l.map(|l| l.actor),
            loss_critic: l.map(|l| l.critic),
        };
        if let Some(out) = &self.out {
            let mut f = OpenOptions::new().append(true).create(true).open(out.join(METRICS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        self.metrics.push(rec);
        Ok(())
    }

    fn collect(&mut self, policy: Policy) -> Result<f64> {
        let ctx = sample_context(self.config.task, Split::Train, &self.config.contexts, &mut self.rng);
        let env_seed = self.rng.next_u64();
        let ep = run_episode(&self.models, &self.config, ctx, env_seed, policy, &mut self.rng, None)?;
        let ret = ep.total_reward();
        self.replay.add(ep)?;
        self.env_steps += self.config.steps_per_episode();
        Ok(ret)
    }

    /// One model update followed by one behavior update.
    pub fn update(&mut self) -> Result<(ModelLosses, BehaviorLosses)> {
        let batch = self
            .replay
            .sample(&mut self.rng, self.config.batch_size, self.config.seq_len)?;
        let up = world_model_update(&mut self.models, &batch, &self.config, &mut self.rng)?;
        let m = &mut self.models;
        let b = behavior_update(
            &m.world,
            &m.proto,
            &mut m.agent,
            &up.h,
            &up.z,
            self.config.ablation,
            &mut self.rng,
        )?;
        self.updates += 1;
        Ok((up.losses, b))
    }

    fn eval_seed(&self, split: Split) -> u64 {
        let tag = match split {
            Split::Train => 0x7472_6169_6e00_0000,
            Split::Test => 0x7465_7374_0000_0000,
        };
        self.config.seed ^ tag ^ (self.env_steps as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    fn run_due_evals(&mut self) -> Result<()> {
        while self.env_steps >= self.next_eval {
            for (split, phase) in [(Split::Train, Phase::EvalTrain), (Split::Test, Phase::EvalTest)] {
                let s = evaluate(
                    &self.models,
                    &self.config,
                    split,
                    self.config.eval_episodes,
                    self.eval_seed(split),
                    Policy::Agent(ActMode::Eval),
                    eval_threads(),
                )?;
                self.record(phase, &s.returns)?;
            }
            self.next_eval += self.config.eval_every;
        }
        Ok(())
    }

    /// Seed episodes when the buffer is empty, otherwise `C` updates then one
    /// collected episode, followed by any due evaluations and a checkpoint.
    pub fn run_cycle(&mut self) -> Result<()> {
        if self.replay.is_empty() {
            for _ in 0..self.config.seed_episodes.max(1) {
                let ret = self.collect(Policy::Random)?;
                self.record(Phase::Train, &[ret])?;
            }
        } else {
            let mut acc = CycleLosses::default();
            for _ in 0..self.config.collect_interval {
                let (m, b) = self.update()?;
                acc.add(&m, &b);
            }
            self.last_losses = Some(acc.scaled(self.config.collect_interval));
            let ret = self.collect(Policy::Agent(ActMode::Explore))?;
            self.record(Phase::Train, &[ret])?;
        }
        self.run_due_evals()?;
        self.save_checkpoint()
    }

    /// Train until the step budget is spent; `progress` is called after each cycle.
    pub fn run(&mut self, mut progress: impl FnMut(&Trainer)) -> Result<()> {
        while !self.done() {
            self.run_cycle()?;
            progress(self);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Task;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::profile(crate::config::Profile::Desk, Task::PendulumSwingup);
        cfg.episode_len = 12;
        cfg.seq_len = 4;
        cfg.batch_size = 2;
        cfg.collect_interval = 2;
        cfg.total_steps = 96;
        cfg.eval_every = 48;
        cfg.eval_episodes = 2;
        cfg.world.h_dim = 6;
        cfg.world.z_dim = 3;
        cfg.world.hidden = 8;
        cfg.proto.k = 4;
        cfg.proto.d = 4;
        cfg.agent.hidden = 8;
        cfg.agent.horizon = 3;
        cfg
    }

    #[test]
    fn loop_emits_expected_records() {
        let mut t = Trainer::new(tiny(), None).unwrap();
        t.run(|_| {}).unwrap();
        assert_eq!(t.env_steps, 96);
        let m = t.metrics();
        let train = m.iter().filter(|r| r.phase == Phase::Train).count();
        assert_eq!(train, 4);
        let evals: Vec<_> = m.iter().filter(|r| r.phase != Phase::Train).map(|r| r.env_step).collect();
        assert_eq!(evals, vec![48, 48, 96, 96]);
        assert!(m[0].loss_kl.is_none());
        assert!(m.last().unwrap().loss_kl.unwrap().is_finite());
        assert_eq!(t.updates, 4);
    }

    #[test]
    fn records_have_lengths_and_constant_context() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let models = Models::new(&cfg, &mut rng).unwrap();
        let ctx = sample_context(cfg.task, Split::Test, &cfg.contexts, &mut rng);
        let ep = run_episode(&models, &cfg, ctx, 3, Policy::Agent(ActMode::Explore), &mut rng, None).unwrap();
        assert_eq!(ep.len(), 12);
        assert_eq!(ep.obs.len(), 13 * 3);
        assert_eq!(ep.act.len(), 12);
        assert_eq!(ep.context, ctx);
        assert!(ep.act.iter().all(|a| (-1.0..=1.0).contains(a)));
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let cfg = tiny();
        let models = Models::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pol = Policy::Agent(ActMode::Eval);
        let a = evaluate(&models, &cfg, Split::Test, 5, 11, pol, 1).unwrap();
        let b = evaluate(&models, &cfg, Split::Test, 5, 11, pol, 3).unwrap();
        assert_eq!(a, b);
        let grid = evaluate_grid(&models, &cfg, Split::Train, 1, 2, Policy::Random, 2).unwrap();
        assert_eq!(grid.len(), 11);
        assert_eq!(grid_csv(&grid).lines().count(), 12);
    }

    #[test]
    fn mean_std_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
