//! Bounded FIFO transition store with contiguous-sequence sampling.
//!
//! Entry `k` of an episode holds observation `o_k` with the action that led
//! to it and the rewards and done flag received on arrival. The first entry
//! of every episode carries a zero action and zero rewards.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::params::{read_container, write_container};
use crate::sim::{MAX_ANGULAR, MAX_LINEAR, MAX_RANGE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Raw ranges in meters.
    pub observation: Vec<f32>,
    /// Physical `[v, omega]` as applied.
    pub action: [f32; 2],
    pub reward_ext: f32,
    pub reward_int: f32,
    pub done: bool,
    pub episode: u64,
}

/// `B` sequences of `T` steps, time-major: index `t * B + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub len: usize,
    /// Observations divided by the maximum range, `T*B*obs_len` values.
    pub obs: Vec<f32>,
    /// Actions normalized to `[-1, 1]`, `T*B*2` values.
    pub actions: Vec<f32>,
    pub rewards_ext: Vec<f32>,
    pub rewards_int: Vec<f32>,
    pub dones: Vec<bool>,
}

impl SequenceBatch {
    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct EpisodeSpan {
    id: u64,
    /// Global index of the first stored step.
    start: u64,
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    /// Global index of `items[0]`.
    head: u64,
    episodes: VecDeque<EpisodeSpan>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::new(),
            head: 0,
            episodes: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `(episode id, stored steps)` for every episode still present.
    pub fn episode_lengths(&self) -> Vec<(u64, usize)> {
        self.episodes.iter().map(|e| (e.id, e.len)).collect()
    }

    pub fn append(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.evict_front();
        }
        let global = self.head + self.items.len() as u64;
        match self.episodes.back_mut() {
            Some(e) if e.id == t.episode => e.len += 1,
            Some(e) => {
                debug_assert!(t.episode > e.id, "episode ids must increase");
                self.episodes.push_back(EpisodeSpan {
                    id: t.episode,
                    start: global,
                    len: 1,
                });
            }
            None => self.episodes.push_back(EpisodeSpan {
                id: t.episode,
                start: global,
                len: 1,
            }),
        }
        self.items.push_back(t);
    }

    fn evict_front(&mut self) {
        self.items.pop_front();
        self.head += 1;
        if let Some(e) = self.episodes.front_mut() {
            e.start += 1;
            e.len -= 1;
            if e.len == 0 {
                self.episodes.pop_front();
            }
        }
    }

    /// Number of distinct length-`t` windows that stay inside one episode.
    pub fn valid_starts(&self, t: usize) -> usize {
        self.episodes
            .iter()
            .filter(|e| e.len >= t)
            .map(|e| e.len - t + 1)
            .sum()
    }

    /// Draws `b` windows of `t` steps uniformly over all valid windows.
    pub fn sample_sequences<R: Rng + ?Sized>(&self, b: usize, t: usize, rng: &mut R) -> Result<SequenceBatch> {
        if b == 0 || t == 0 {
            return Err(Error::InvalidArgument {
                op: "sample_sequences",
                msg: "batch size and length must be positive".into(),
            });
        }
        let total = self.valid_starts(t);
        if total == 0 {
            return Err(Error::NotReady(format!("no stored episode has {t} steps yet")));
        }
        let starts: Vec<usize> = (0..b)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                for e in &self.episodes {
                    if e.len < t {
                        continue;
                    }
                    let n = e.len - t + 1;
                    if k < n {
                        return (e.start - self.head) as usize + k;
                    }
                    k -= n;
                }
                unreachable!("window index within total")
            })
            .collect();
        Ok(self.gather(&starts, t))
    }

    /// Builds a batch from explicit window starts (positions in the buffer).
    pub fn gather(&self, starts: &[usize], t: usize) -> SequenceBatch {
        let b = starts.len();
        let obs_len = self.items.front().map(|x| x.observation.len()).unwrap_or(0);
        let mut out = SequenceBatch {
            batch: b,
            len: t,
            obs: Vec::with_capacity(b * t * obs_len),
            actions: Vec::with_capacity(b * t * 2),
            rewards_ext: Vec::with_capacity(b * t),
            rewards_int: Vec::with_capacity(b * t),
            dones: Vec::with_capacity(b * t),
        };
        let scale = 1.0 / MAX_RANGE as f32;
        for step in 0..t {
            for &s in starts {
                let tr = &self.items[s + step];
                out.obs.extend(tr.observation.iter().map(|&r| r * scale));
                out.actions.push(tr.action[0] / MAX_LINEAR as f32);
                out.actions.push(tr.action[1] / MAX_ANGULAR as f32);
                out.rewards_ext.push(tr.reward_ext);
                out.rewards_int.push(tr.reward_int);
                out.dones.push(tr.done);
            }
        }
        out
    }

    /// Writes the buffer as a parameter container followed by the episode index.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.items.len();
        let mut entries = Vec::new();
        if n > 0 {
            let obs_len = self.items[0].observation.len();
            let obs: Vec<f32> = self.items.iter().flat_map(|t| t.observation.iter().copied()).collect();
            let act: Vec<f32> = self.items.iter().flat_map(|t| t.action).collect();
            entries.push(("obs".to_string(), Array::new(&[n, obs_len], obs)?));
            entries.push(("action".to_string(), Array::new(&[n, 2], act)?));
            let col = |f: &dyn Fn(&Transition) -> f32| self.items.iter().map(f).collect::<Vec<f32>>();
            entries.push(("reward_ext".to_string(), Array::new(&[n], col(&|t| t.reward_ext))?));
            entries.push(("reward_int".to_string(), Array::new(&[n], col(&|t| t.reward_int))?));
            entries.push(("done".to_string(), Array::new(&[n], col(&|t| t.done as u8 as f32))?));
        }
        write_container(w, &entries)?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&self.head.to_le_bytes())?;
        w.write_all(&(self.episodes.len() as u64).to_le_bytes())?;
        for e in &self.episodes {
            w.write_all(&e.id.to_le_bytes())?;
            w.write_all(&(e.len as u64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let entries = read_container(r)?;
        let u64s = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("replay snapshot truncated".into()))?;
            Ok(u64::from_le_bytes(b))
        };
        let capacity = u64s(r)? as usize;
        let head = u64s(r)?;
        let n_eps = u64s(r)? as usize;
        let mut spans = Vec::with_capacity(n_eps.min(1 << 20));
        for _ in 0..n_eps {
            let id = u64s(r)?;
            let len = u64s(r)? as usize;
            spans.push((id, len));
        }
        let find = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, a)| a);
        let mut buf = ReplayBuffer::new(capacity.max(1));
        buf.capacity = capacity;
        buf.head = head;
        if let Some(obs) = find("obs") {
            let missing = || Error::Format("replay snapshot missing a column".into());
            let act = find("action").ok_or_else(missing)?;
            let re = find("reward_ext").ok_or_else(missing)?;
            let ri = find("reward_int").ok_or_else(missing)?;
            let dn = find("done").ok_or_else(missing)?;
            let n = obs.rows();
            let mut ep_iter = spans.iter().flat_map(|&(id, len)| std::iter::repeat_n(id, len));
            for i in 0..n {
                let episode = ep_iter
                    .next()
                    .ok_or_else(|| Error::Format("replay episode index shorter than data".into()))?;
                buf.items.push_back(Transition {
                    observation: obs.row(i).to_vec(),
                    action: [act.row(i)[0], act.row(i)[1]],
                    reward_ext: re.data()[i],
                    reward_int: ri.data()[i],
                    done: dn.data()[i] != 0.0,
                    episode,
                });
            }
            if ep_iter.next().is_some() {
                return Err(Error::Format("replay episode index longer than data".into()));
            }
        } else if spans.iter().any(|&(_, l)| l > 0) {
            return Err(Error::Format("replay episode index without data".into()));
        }
        let mut start = head;
        for (id, len) in spans {
            buf.episodes.push_back(EpisodeSpan { id, start, len });
            start += len as u64;
        }
        Ok(buf)
    }
}
