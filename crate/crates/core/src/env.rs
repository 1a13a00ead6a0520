//! Parameterised continuous-control tasks with episode-constant contexts.
//!
//! Two tasks are registered:
//!
//! * `pendulum_swingup`: torque-limited pendulum, angle measured from upright,
//!   observation `(cos θ, sin θ, θ̇)`, mass multiplier as the context.
//! * `msd_reach`: mass-spring-damper driven towards `x = 1`, observation
//!   `(x, ẋ)`, mass and damping multipliers as the context.
//!
//! Each decision step repeats the action for `action_repeat` integrator
//! sub-steps; sub-step rewards are scaled by `1 / action_repeat` so a decision
//! step earns at most 1.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

pub const DT: f64 = 0.05;
pub const DEFAULT_ACTION_REPEAT: usize = 2;
pub const DEFAULT_EPISODE_LEN: usize = 200;

const GRAVITY: f64 = 10.0;
const LENGTH: f64 = 1.0;
const MAX_TORQUE: f64 = 2.0;
const MAX_SPEED: f64 = 8.0;
const SPRING: f64 = 1.0;
const BASE_DAMPING: f64 = 0.5;
const MSD_TARGET: f64 = 1.0;

pub const PENDULUM_TRAIN_MASS: [f64; 11] =
    [0.75, 0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2, 1.25];
pub const PENDULUM_TEST_MASS: [f64; 8] = [0.2, 0.4, 0.5, 0.7, 1.3, 1.5, 1.6, 1.8];
pub const MSD_TRAIN_MULT: [f64; 5] = [0.75, 0.85, 1.00, 1.15, 1.25];
pub const MSD_TEST_MULT: [f64; 8] = [0.2, 0.3, 0.4, 0.5, 1.5, 1.6, 1.7, 1.8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "pendulum_swingup")]
    PendulumSwingup,
    #[serde(rename = "msd_reach")]
    MsdReach,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::PendulumSwingup => "pendulum_swingup",
            Task::MsdReach => "msd_reach",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Task::PendulumSwingup => 3,
            Task::MsdReach => 2,
        }
    }

    pub fn act_dim(self) -> usize {
        1
    }

    /// Whether the damping multiplier is part of the context.
    pub fn uses_damping(self) -> bool {
        matches!(self, Task::MsdReach)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum_swingup" => Ok(Task::PendulumSwingup),
            "msd_reach" => Ok(Task::MsdReach),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Hidden dynamics parameters, fixed for a whole episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvContext {
    pub mass_mult: f64,
    pub damping_mult: f64,
    pub split: Split,
}

/// Parameter values per split; `damping` is ignored by single-parameter tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitLists {
    pub mass: Vec<f64>,
    #[serde(default = "one")]
    pub damping: Vec<f64>,
}

fn one() -> Vec<f64> {
    vec![1.0]
}

/// Train and test parameter lists for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextLists {
    pub train: SplitLists,
    pub test: SplitLists,
}

impl ContextLists {
    pub fn defaults(task: Task) -> Self {
        match task {
            Task::PendulumSwingup => Self {
                train: SplitLists {
                    mass: PENDULUM_TRAIN_MASS.to_vec(),
                    damping: one(),
                },
                test: SplitLists {
                    mass: PENDULUM_TEST_MASS.to_vec(),
                    damping: one(),
                },
            },
            Task::MsdReach => Self {
                train: SplitLists {
                    mass: MSD_TRAIN_MULT.to_vec(),
                    damping: MSD_TRAIN_MULT.to_vec(),
                },
                test: SplitLists {
                    mass: MSD_TEST_MULT.to_vec(),
                    damping: MSD_TEST_MULT.to_vec(),
                },
            },
        }
    }

    pub fn split(&self, split: Split) -> &SplitLists {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    fn dampings(&self, task: Task, split: Split) -> Vec<f64> {
        if task.uses_damping() {
            self.split(split).damping.clone()
        } else {
            vec![1.0]
        }
    }

    /// Reject empty or non-positive lists and any overlap between the splits.
    pub fn validate(&self, task: Task) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            let l = self.split(split);
            let damping = self.dampings(task, split);
            if l.mass.is_empty() || damping.is_empty() {
                return Err(Error::Config(format!("{task}/{split}: empty context list")));
            }
            if l.mass.iter().chain(&damping).any(|&v| v <= 0.0 || !v.is_finite()) {
                return Err(Error::Config(format!(
                    "{task}/{split}: context values must be positive"
                )));
            }
        }
        let train = context_grid(task, Split::Train, self);
        let test = context_grid(task, Split::Test, self);
        for a in &train {
            if test
                .iter()
                .any(|b| a.mass_mult == b.mass_mult && a.damping_mult == b.damping_mult)
            {
                return Err(Error::Config(format!(
                    "{task}: context (mass {}, damping {}) is in both splits",
                    a.mass_mult, a.damping_mult
                )));
            }
        }
        Ok(())
    }
}

/// Uniform draw from the split's lists, independently per parameter.
pub fn sample_context<R: Rng + ?Sized>(
    task: Task,
    split: Split,
    lists: &ContextLists,
    rng: &mut R,
) -> EnvContext {
    let l = lists.split(split);
    let mass_mult = l.mass[rng.random_range(0..l.mass.len())];
    let damping_mult = if task.uses_damping() {
        l.damping[rng.random_range(0..l.damping.len())]
    } else {
        1.0
    };
    EnvContext {
        mass_mult,
        damping_mult,
        split,
    }
}

/// Full cartesian grid of declared values, mass-major.
pub fn context_grid(task: Task, split: Split, lists: &ContextLists) -> Vec<EnvContext> {
    let dampings = lists.dampings(task, split);
    lists
        .split(split)
        .mass
        .iter()
        .flat_map(|&m| {
            dampings.iter().map(move |&d| EnvContext {
                mass_mult: m,
                damping_mult: d,
                split,
            })
        })
        .collect()
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    theta - 2.0 * PI * ((theta - PI) / (2.0 * PI)).ceil()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvState {
    Pendulum { theta: f64, theta_dot: f64 },
    Msd { x: f64, x_dot: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<Real>,
    pub action: Vec<Real>,
    pub reward: Real,
    pub done: bool,
}

/// One environment instance.
#[derive(Clone, Debug)]
pub struct Env {
    task: Task,
    context: EnvContext,
    state: EnvState,
    steps: usize,
    action_repeat: usize,
    episode_len: usize,
    clamp_warnings: u64,
}

impl Env {
    pub fn new(task: Task, context: EnvContext) -> Self {
        Self::with_timing(task, context, DEFAULT_ACTION_REPEAT, DEFAULT_EPISODE_LEN)
    }

    pub fn with_timing(
        task: Task,
        context: EnvContext,
        action_repeat: usize,
        episode_len: usize,
    ) -> Self {
        let state = match task {
            Task::PendulumSwingup => EnvState::Pendulum {
                theta: PI,
                theta_dot: 0.0,
            },
            Task::MsdReach => EnvState::Msd { x: 0.0, x_dot: 0.0 },
        };
        Self {
            task,
            context,
            state,
            steps: 0,
            action_repeat: action_repeat.max(1),
            episode_len,
            clamp_warnings: 0,
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn context(&self) -> EnvContext {
        self.context
    }

    pub fn state(&self) -> EnvState {
        self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of actions that had to be clamped into `[-1, 1]`.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings
    }

    /// Overwrite the physical state, keeping the step counter.
    pub fn set_state(&mut self, state: EnvState) {
        self.state = state;
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = match self.task {
            Task::PendulumSwingup => EnvState::Pendulum {
                theta: wrap_angle(PI + rng.random_range(-0.05..0.05)),
                theta_dot: rng.random_range(-0.05..0.05),
            },
            Task::MsdReach => EnvState::Msd {
                x: rng.random_range(-0.05..0.05),
                x_dot: 0.0,
            },
        };
        self.steps = 0;
        self.observation()
    }

    pub fn observation(&self) -> Vec<Real> {
        match self.state {
            EnvState::Pendulum { theta, theta_dot } => {
                vec![theta.cos() as Real, theta.sin() as Real, theta_dot as Real]
            }
            EnvState::Msd { x, x_dot } => vec![x as Real, x_dot as Real],
        }
    }

    /// Advance one integrator sub-step and return its unscaled reward.
    pub fn substep(&mut self, u: f64) -> f64 {
        match &mut self.state {
            EnvState::Pendulum { theta, theta_dot } => {
                let m = self.context.mass_mult;
                let torque = MAX_TORQUE * u;
                let acc = 3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin()
                    + 3.0 * torque / (m * LENGTH * LENGTH);
                *theta_dot = (*theta_dot + DT * acc).clamp(-MAX_SPEED, MAX_SPEED);
                *theta = wrap_angle(*theta + DT * *theta_dot);
                (theta.cos() + 1.0) / 2.0
            }
            EnvState::Msd { x, x_dot } => {
                let m = self.context.mass_mult;
                let d = BASE_DAMPING * self.context.damping_mult;
                let acc = (u - SPRING * *x - d * *x_dot) / m;
                *x_dot += DT * acc;
                *x += DT * *x_dot;
                (-8.0 * (*x - MSD_TARGET).powi(2)).exp()
            }
        }
    }

    pub fn step(&mut self, action: &[Real]) -> Transition {
        let clamped: Vec<Real> = action
            .iter()
            .map(|&a| {
                if a.is_nan() {
                    self.clamp_warnings += 1;
                    0.0
                } else if !(-1.0..=1.0).contains(&a) {
                    self.clamp_warnings += 1;
                    a.clamp(-1.0, 1.0)
                } else {
                    a
                }
            })
            .collect();
        let u = clamped.first().copied().unwrap_or(0.0) as f64;
        let dt_norm = 1.0 / self.action_repeat as f64;
        let mut reward = 0.0;
        for _ in 0..self.action_repeat {
            reward += self.substep(u) * dt_norm;
        }
        self.steps += 1;
        Transition {
            observation: self.observation(),
            action: clamped,
            reward: reward as Real,
            done: self.steps >= self.episode_len,
        }
    }
}

/// Two amplitude-scaled copies of a batch of observation sequences.
///
/// `obs[t]` is `[batch, obs_dim]`; each view draws one factor per sequence from
/// `U(lo, hi)` and applies it at every time step.
pub fn augment_views<R: Rng + ?Sized>(
    obs: &[protocad_tensor::Tensor],
    rng: &mut R,
    lo: Real,
    hi: Real,
) -> Result<(Vec<protocad_tensor::Tensor>, Vec<protocad_tensor::Tensor>)> {
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Config(format!(
            "augmentation range needs 0 < lo <= hi, got ({lo}, {hi})"
        )));
    }
    let batch = obs.first().map_or(0, |t| t.shape()[0]);
    let mut draw = || -> Vec<Real> {
        (0..batch)
            .map(|_| if lo == hi { lo } else { rng.random_range(lo..hi) })
            .collect()
    };
    let f1 = draw();
    let f2 = draw();
    let scale = |factors: &[Real]| -> Vec<protocad_tensor::Tensor> {
        obs.iter()
            .map(|t| {
                let mut out = t.clone();
                let width = t.shape()[1];
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    *x *= factors[i / width];
                }
                out
            })
            .collect()
    };
    Ok((scale(&f1), scale(&f2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use protocad_tensor::Tensor;

    fn ctx(mass: f64) -> EnvContext {
        EnvContext {
            mass_mult: mass,
            damping_mult: 1.0,
            split: Split::Train,
        }
    }

    #[test]
    fn pendulum_hanging_observation() {
        let mut env = Env::new(Task::PendulumSwingup, ctx(1.0));
        env.set_state(EnvState::Pendulum {
            theta: PI,
            theta_dot: 0.0,
        });
        let o = env.observation();
        assert_eq!(o[0], -1.0);
        assert!(o[1].abs() < 1e-15);
        assert_eq!(o[2], 0.0);
    }

    #[test]
    fn msd_rest_observation() {
        let mut env = Env::new(Task::MsdReach, ctx(1.0));
        env.set_state(EnvState::Msd { x: 0.0, x_dot: 0.0 });
        assert_eq!(env.observation(), vec![0.0, 0.0]);
    }

    #[test]
    fn reset_is_seeded() {
        let mut a = Env::new(Task::PendulumSwingup, ctx(0.9));
        let mut b = Env::new(Task::PendulumSwingup, ctx(0.9));
        assert_eq!(a.reset(17), b.reset(17));
        assert_ne!(a.reset(17), a.reset(18));
        let EnvState::Pendulum { theta, theta_dot } = a.state() else {
            unreachable!()
        };
        assert!((theta.abs() - PI).abs() <= 0.05 + 1e-12);
        assert!(theta_dot.abs() <= 0.05);
    }

    #[test]
    fn upright_equilibrium_substep() {
        let mut env = Env::new(Task::PendulumSwingup, ctx(1.0));
        env.set_state(EnvState::Pendulum {
            theta: 0.0,
            theta_dot: 0.0,
        });
        let r = env.substep(0.0);
        assert_eq!(r, 1.0);
        assert_eq!(
            env.state(),
            EnvState::Pendulum {
                theta: 0.0,
                theta_dot: 0.0
            }
        );
    }

    #[test]
    fn horizontal_pendulum_substep() {
        let mut env = Env::new(Task::PendulumSwingup, ctx(1.0));
        env.set_state(EnvState::Pendulum {
            theta: PI / 2.0,
            theta_dot: 0.0,
        });
        env.substep(0.0);
        let EnvState::Pendulum { theta, theta_dot } = env.state() else {
            unreachable!()
        };
        assert!((theta_dot - 0.75).abs() < 1e-15);
        assert!((theta - (PI / 2.0 + 0.05 * 0.75)).abs() < 1e-15);
    }

    #[test]
    fn msd_equilibrium_earns_full_reward() {
        let mut env = Env::new(Task::MsdReach, ctx(1.0));
        env.set_state(EnvState::Msd { x: 1.0, x_dot: 0.0 });
        let t = env.step(&[1.0]);
        assert_eq!(t.reward, 1.0);
        assert_eq!(env.clamp_warnings(), 0);
    }

    #[test]
    fn out_of_range_actions_are_clamped() {
        let mut env = Env::new(Task::MsdReach, ctx(1.0));
        env.reset(0);
        let t = env.step(&[3.0]);
        assert_eq!(t.action, vec![1.0]);
        env.step(&[Real::NAN]);
        assert_eq!(env.clamp_warnings(), 2);
    }

    #[test]
    fn episode_ends_after_len_steps() {
        let mut env = Env::with_timing(Task::PendulumSwingup, ctx(1.0), 2, 5);
        env.reset(1);
        let dones: Vec<bool> = (0..5).map(|_| env.step(&[0.3]).done).collect();
        assert_eq!(dones, vec![false, false, false, false, true]);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrap_angle(0.3), 0.3);
    }

    #[test]
    fn grids_and_splits() {
        let p = ContextLists::defaults(Task::PendulumSwingup);
        assert_eq!(context_grid(Task::PendulumSwingup, Split::Train, &p).len(), 11);
        assert_eq!(context_grid(Task::PendulumSwingup, Split::Test, &p).len(), 8);
        let m = ContextLists::defaults(Task::MsdReach);
        assert_eq!(context_grid(Task::MsdReach, Split::Train, &m).len(), 25);
        assert_eq!(context_grid(Task::MsdReach, Split::Test, &m).len(), 64);
        p.validate(Task::PendulumSwingup).unwrap();
        m.validate(Task::MsdReach).unwrap();
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut p = ContextLists::defaults(Task::PendulumSwingup);
        p.test.mass.push(1.0);
        assert!(p.validate(Task::PendulumSwingup).is_err());
    }

    #[test]
    fn sampled_contexts_come_from_lists() {
        let lists = ContextLists::defaults(Task::MsdReach);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = sample_context(Task::MsdReach, Split::Train, &lists, &mut rng);
            assert!(MSD_TRAIN_MULT.contains(&c.mass_mult));
            assert!(MSD_TRAIN_MULT.contains(&c.damping_mult));
        }
        let p = ContextLists::defaults(Task::PendulumSwingup);
        let c = sample_context(Task::PendulumSwingup, Split::Test, &p, &mut rng);
        assert!(PENDULUM_TEST_MASS.contains(&c.mass_mult));
        assert_eq!(c.damping_mult, 1.0);
    }

    #[test]
    fn unknown_task_name() {
        assert!("cartpole".parse::<Task>().is_err());
        assert_eq!("msd_reach".parse::<Task>().unwrap(), Task::MsdReach);
    }

    #[test]
    fn identity_augmentation_and_time_constant_factors() {
        let obs: Vec<Tensor> = (0..4)
            .map(|t| Tensor::new(&[2, 3], (0..6).map(|i| (i + t) as Real + 1.0).collect()).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = augment_views(&obs, &mut rng, 1.0, 1.0).unwrap();
        assert_eq!(a, obs);
        assert_eq!(b, obs);

        let (a, _) = augment_views(&obs, &mut rng, 0.8, 1.2).unwrap();
        for row in 0..2 {
            let f0 = a[0].row(row)[0] / obs[0].row(row)[0];
            for t in 1..4 {
                for c in 0..3 {
                    let f = a[t].row(row)[c] / obs[t].row(row)[c];
                    assert!((f - f0).abs() < 1e-12);
                }
            }
            assert!((0.8..1.2).contains(&f0));
        }
        assert!(augment_views(&obs, &mut rng, 1.2, 0.8).is_err());
    }
}
