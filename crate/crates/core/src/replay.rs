//! Episode records, their on-disk format, and the sequence replay buffer.
//!
//! Episode file: magic `PCAD`, u32 version, u32 metadata length, UTF-8 JSON
//! metadata, then little-endian `f32` arrays `obs`, `act`, `rew`.

use std::fs;
use std::path::{Path, PathBuf};

use protocad_tensor::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvContext, Task};
use crate::{Error, Result};

pub const EPISODE_MAGIC: &[u8; 4] = b"PCAD";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EpisodeMeta {
    task: Task,
    context: EnvContext,
    seed: u64,
    #[serde(rename = "L")]
    len: usize,
    obs_dim: usize,
    act_dim: usize,
}

/// One episode: `len + 1` observations, `len` actions and rewards, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub task: Task,
    pub context: EnvContext,
    pub seed: u64,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f32>,
    pub act: Vec<f32>,
    pub rew: Vec<f32>,
}

impl EpisodeRecord {
    pub fn new(task: Task, context: EnvContext, seed: u64, initial_obs: &[Real]) -> Self {
        Self {
            task,
            context,
            seed,
            obs_dim: task.obs_dim(),
            act_dim: task.act_dim(),
            obs: initial_obs.iter().map(|&v| v as f32).collect(),
            act: Vec::new(),
            rew: Vec::new(),
        }
    }

    pub fn push(&mut self, action: &[Real], reward: Real, next_obs: &[Real]) {
        self.act.extend(action.iter().map(|&v| v as f32));
        self.rew.push(reward as f32);
        self.obs.extend(next_obs.iter().map(|&v| v as f32));
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.rew.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rew.is_empty()
    }

    pub fn obs_at(&self, t: usize) -> &[f32] {
        &self.obs[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn act_at(&self, t: usize) -> &[f32] {
        &self.act[t * self.act_dim..(t + 1) * self.act_dim]
    }

    pub fn total_reward(&self) -> f64 {
        self.rew.iter().map(|&r| r as f64).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.len();
        if self.obs.len() != (l + 1) * self.obs_dim || self.act.len() != l * self.act_dim {
            return Err(Error::Episode(format!(
                "inconsistent lengths: obs {} act {} rew {} for dims ({}, {})",
                self.obs.len(),
                self.act.len(),
                l,
                self.obs_dim,
                self.act_dim
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::to_vec(&EpisodeMeta {
            task: self.task,
            context: self.context,
            seed: self.seed,
            len: self.len(),
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
        })?;
        let mut out = Vec::with_capacity(12 + meta.len() + 4 * (self.obs.len() + self.act.len() + self.rew.len()));
        out.extend_from_slice(EPISODE_MAGIC);
        out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        for v in self.obs.iter().chain(&self.act).chain(&self.rew) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != EPISODE_MAGIC {
            return Err(Error::Episode("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != EPISODE_VERSION {
            return Err(Error::Episode(format!(
                "format version {version}, expected {EPISODE_VERSION}"
            )));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + mlen)
            .ok_or_else(|| Error::Episode("truncated metadata".into()))?;
        let meta: EpisodeMeta = serde_json::from_slice(body)?;
        let counts = [
            (meta.len + 1) * meta.obs_dim,
            meta.len * meta.act_dim,
            meta.len,
        ];
        let payload = &bytes[12 + mlen..];
        let want = 4 * counts.iter().sum::<usize>();
        if payload.len() != want {
            return Err(Error::Episode(format!(
                "payload has {} bytes, metadata implies {want}",
                payload.len()
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
        let obs = take(counts[0]);
        let act = take(counts[1]);
        let rew = take(counts[2]);
        Ok(Self {
            task: meta.task,
            context: meta.context,
            seed: meta.seed,
            obs_dim: meta.obs_dim,
            act_dim: meta.act_dim,
            obs,
            act,
            rew,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// A batch of `B` windows of length `M`, one `[B, dim]` tensor per step.
///
/// Step `τ` of the window starting at `j` holds observation `j + τ + 1`, the
/// action that produced it, and the reward earned on that transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Vec<Tensor>,
    pub prev_act: Vec<Tensor>,
    pub rew: Vec<Tensor>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.obs.first().map_or(0, |t| t.shape()[0])
    }

    pub fn seq_len(&self) -> usize {
        self.obs.len()
    }

    /// Gather windows given as `(episode, start)` pairs.
    pub fn gather(episodes: &[EpisodeRecord], picks: &[(usize, usize)], m: usize) -> Result<Self> {
        let first = episodes
            .get(picks.first().map_or(0, |p| p.0))
            .ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let (od, ad, b) = (first.obs_dim, first.act_dim, picks.len());
        let mut obs = vec![Vec::with_capacity(b * od); m];
        let mut act = vec![Vec::with_capacity(b * ad); m];
        let mut rew = vec![Vec::with_capacity(b); m];
        for &(e, j) in picks {
            let ep = &episodes[e];
            if j + m > ep.len() {
                return Err(Error::Invalid(format!(
                    "window {j}..{} exceeds episode length {}",
                    j + m,
                    ep.len()
                )));
            }
            for t in 0..m {
                obs[t].extend(ep.obs_at(j + t + 1).iter().map(|&v| v as Real));
                act[t].extend(ep.act_at(j + t).iter().map(|&v| v as Real));
                rew[t].push(ep.rew[j + t] as Real);
            }
        }
        let tensors = |rows: Vec<Vec<Real>>, d: usize| -> Result<Vec<Tensor>> {
            rows.into_iter()
                .map(|v| Ok(Tensor::new(&[b, d], v)?))
                .collect()
        };
        Ok(Self {
            obs: tensors(obs, od)?,
            prev_act: tensors(act, ad)?,
            rew: tensors(rew, 1)?,
        })
    }
}

/// Episodes held in memory and mirrored to a directory when one is set.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    dir: Option<PathBuf>,
    episodes: Vec<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Buffer backed by `dir`; episodes already stored there are loaded in file-name order.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pcad"))
            .collect();
        files.sort();
        let episodes = files
            .iter()
            .map(|p| EpisodeRecord::load(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            episodes,
        })
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn add(&mut self, ep: EpisodeRecord) -> Result<()> {
        ep.validate()?;
        if let Some(dir) = &self.dir {
            ep.save(&dir.join(format!("episode_{:06}.pcad", self.episodes.len())))?;
        }
        self.episodes.push(ep);
        Ok(())
    }

    /// Keep only the first `n` episodes, deleting mirrored files beyond them.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if let Some(dir) = &self.dir {
            for i in n..self.episodes.len() {
                let p = dir.join(format!("episode_{i:06}.pcad"));
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
        self.episodes.truncate(n);
        Ok(())
    }

    /// Uniform episode, then uniform start in `[0, L - M]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize, m: usize) -> Result<Batch> {
        if self.episodes.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty buffer".into()));
        }
        let picks = (0..batch)
            .map(|_| {
                let e = rng.random_range(0..self.episodes.len());
                let l = self.episodes[e].len();
                if l < m {
                    return Err(Error::Invalid(format!(
                        "episode {e} has {l} steps, shorter than window {m}"
                    )));
                }
                Ok((e, rng.random_range(0..=l - m)))
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::gather(&self.episodes, &picks, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(len: usize) -> EpisodeRecord {
        let ctx = EnvContext {
            mass_mult: 0.8,
            damping_mult: 1.0,
            split: Split::Train,
        };
        let mut ep = EpisodeRecord::new(Task::PendulumSwingup, ctx, 9, &[0.0, 0.5, -0.25]);
        for t in 0..len {
            let v = t as Real;
            ep.push(&[v / 100.0], v, &[v + 1.0, 1.0 / (v + 3.0), -v]);
        }
        ep
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ep = record(7);
        let back = EpisodeRecord::from_bytes(&ep.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ep);
        let mut bytes = ep.to_bytes().unwrap();
        bytes.pop();
        assert!(EpisodeRecord::from_bytes(&bytes).is_err());
    }

    #[test]
    fn windows_align_and_stay_inside() {
        let ep = record(10);
        let b = Batch::gather(&[ep.clone()], &[(0, 0), (0, 6)], 4).unwrap();
        assert_eq!(b.seq_len(), 4);
        assert_eq!(b.batch_size(), 2);
        assert_eq!(b.obs[0].row(1)[0], 7.0);
        assert_eq!(b.prev_act[0].row(1)[0], (0.06f32) as Real);
        assert_eq!(b.rew[3].row(1)[0], 9.0);
        assert!(Batch::gather(&[ep], &[(0, 7)], 4).is_err());
    }

    #[test]
    fn every_start_is_reachable() {
        let mut buf = ReplayBuffer::in_memory();
        buf.add(record(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 3];
        for _ in 0..200 {
            let b = buf.sample(&mut rng, 1, 4).unwrap();
            let start = b.rew[0].item() as usize;
            seen[start] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn directory_buffer_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut buf = ReplayBuffer::open(dir.path()).unwrap();
        buf.add(record(3)).unwrap();
        buf.add(record(4)).unwrap();
        let again = ReplayBuffer::open(dir.path()).unwrap();
        assert_eq!(again.episodes(), buf.episodes());
        buf.truncate(1).unwrap();
        assert_eq!(ReplayBuffer::open(dir.path()).unwrap().len(), 1);
    }
}
