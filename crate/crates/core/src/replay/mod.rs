//! Episode storage, prioritized subsequence sampling and the offline/online
//! balanced sampler.
//!
//! Priorities live on subsequence *starts*: every transition of an episode
//! is a start. Windows that run past the episode end repeat the final
//! transition with zero reward, a terminal flag and mask 0, so terminal
//! transitions are seen at every window position, not only the last.

pub mod dataset;
mod sumtree;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Episode;
use crate::error::{Error, Result};
use crate::netcore::Batch;

pub use dataset::Dataset;
pub use sumtree::SumTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Offline,
    Online,
}

/// Stable handle to a subsequence start; survives unrelated evictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub episode: u64,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerConfig {
    /// Priority exponent.
    #[serde(rename = "per_alpha")]
    pub alpha: f64,
    /// Importance-sampling exponent (held constant).
    #[serde(rename = "per_beta")]
    pub beta: f64,
    /// Added to absolute TD errors when refreshing priorities.
    pub priority_floor: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 0.4, priority_floor: 1e-4 }
    }
}

#[derive(Debug, Clone)]
struct Stored {
    id: u64,
    episode: Episode,
    priorities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    source: Source,
    horizon: usize,
    capacity: Option<usize>,
    per: PerConfig,
    episodes: VecDeque<Stored>,
    next_id: u64,
    transitions: usize,
    // flattened start offsets of each stored episode; rebuilt with the tree
    offsets: Vec<usize>,
    tree: SumTree,
    dirty: bool,
}

impl EpisodeBuffer {
    /// `capacity` bounds stored transitions; `None` never evicts.
    pub fn new(source: Source, horizon: usize, capacity: Option<usize>, per: PerConfig) -> Self {
        assert!(horizon >= 1, "horizon must be at least 1");
        Self {
            source,
            horizon,
            capacity,
            per,
            episodes: VecDeque::new(),
            next_id: 0,
            transitions: 0,
            offsets: Vec::new(),
            tree: SumTree::new(0),
            dirty: false,
        }
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.transitions
    }

    pub fn num_starts(&self) -> usize {
        self.episodes.iter().map(|e| e.priorities.len()).sum()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter().map(|s| &s.episode)
    }

    /// Ids of the stored episodes, oldest first.
    pub fn episode_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.episodes.iter().map(|s| s.id)
    }

    pub fn priority(&self, index: SampleIndex) -> Option<f64> {
        self.position(index.episode)
            .and_then(|p| self.episodes[p].priorities.get(index.start).copied())
    }

    pub fn max_priority(&self) -> Option<f64> {
        self.episodes
            .iter()
            .flat_map(|e| e.priorities.iter().copied())
            .reduce(f64::max)
    }

    /// All priorities, oldest episode first.
    pub fn priorities(&self) -> Vec<f64> {
        self.episodes.iter().flat_map(|e| e.priorities.iter().copied()).collect()
    }

    /// Replaces every priority; `flat` is laid out as [`Self::priorities`].
    pub fn set_priorities(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_starts() {
            return Err(Error::shape(format!("{} priorities for {} starts", flat.len(), self.num_starts())));
        }
        if let Some(bad) = flat.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::Numeric(format!("priority {bad}")));
        }
        let mut rest = flat;
        for e in &mut self.episodes {
            let (head, tail) = rest.split_at(e.priorities.len());
            e.priorities.copy_from_slice(head);
            rest = tail;
        }
        self.dirty = true;
        Ok(())
    }

    /// Stores an episode; its starts get the current max priority (1.0 when
    /// empty). Oldest episodes are evicted while over capacity, but the newest
    /// one is always kept.
    pub fn add_episode(&mut self, episode: Episode) -> Result<u64> {
        let state_dim = episode.states.first().map(Vec::len).unwrap_or(0);
        let action_dim = episode.actions.first().map(Vec::len).unwrap_or(0);
        if let Some(first) = self.episodes.front() {
            let d = (first.episode.states[0].len(), first.episode.actions[0].len());
            if d != (state_dim, action_dim) {
                return Err(Error::Format {
                    record: self.next_id as usize,
                    reason: format!("episode dims {:?} differ from buffer dims {d:?}", (state_dim, action_dim)),
                });
            }
        }
        episode
            .validate(state_dim, action_dim)
            .map_err(|reason| Error::Format { record: self.next_id as usize, reason })?;

        let init = self.max_priority().unwrap_or(1.0);
        let id = self.next_id;
        self.next_id += 1;
        self.transitions += episode.len();
        let priorities = vec![init; episode.len()];
        self.episodes.push_back(Stored { id, episode, priorities });
        if let Some(cap) = self.capacity {
            while self.transitions > cap && self.episodes.len() > 1 {
                let old = self.episodes.pop_front().unwrap();
                self.transitions -= old.episode.len();
            }
        }
        self.dirty = true;
        Ok(id)
    }

    fn position(&self, id: u64) -> Option<usize> {
        let first = self.episodes.front()?.id;
        let pos = id.checked_sub(first)? as usize;
        (pos < self.episodes.len()).then_some(pos)
    }

    fn rebuild(&mut self) {
        let mut values = Vec::with_capacity(self.num_starts());
        self.offsets.clear();
        for e in &self.episodes {
            self.offsets.push(values.len());
            values.extend(e.priorities.iter().map(|p| p.powf(self.per.alpha)));
        }
        self.tree = SumTree::from_values(&values);
        self.dirty = false;
    }

    /// Sets `priority = td_error + floor` for each still-stored index; evicted
    /// indices are skipped.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::shape("indices and td errors differ in length"));
        }
        for (idx, td) in indices.iter().zip(td_errors) {
            if !(td.is_finite() && *td >= 0.0) {
                return Err(Error::Numeric(format!("td error {td}")));
            }
            let Some(pos) = self.position(idx.episode) else { continue };
            let Some(slot) = self.episodes[pos].priorities.get_mut(idx.start) else { continue };
            let p = td + self.per.priority_floor;
            *slot = p;
            if !self.dirty {
                self.tree.set(self.offsets[pos] + idx.start, p.powf(self.per.alpha));
            }
        }
        Ok(())
    }

    /// Draws `n` starts with probability proportional to `priority^alpha`.
    /// Returns indices with max-normalized importance weights.
    pub fn sample_indices<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<Vec<(SampleIndex, f64)>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if self.dirty {
            self.rebuild();
        }
        let total = self.tree.total();
        let count = self.tree.len() as f64;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let leaf = self.tree.find(rng.random::<f64>() * total);
            let pos = self.offsets.partition_point(|&o| o <= leaf) - 1;
            let prob = self.tree.get(leaf) / total;
            let w = (prob * count).powf(-self.per.beta);
            out.push((SampleIndex { episode: self.episodes[pos].id, start: leaf - self.offsets[pos] }, w));
        }
        let max_w = out.iter().map(|(_, w)| *w).fold(0.0, f64::max);
        if max_w > 0.0 {
            for (_, w) in &mut out {
                *w /= max_w;
            }
        }
        Ok(out)
    }

    fn push_window(&self, index: SampleIndex, builder: &mut BatchBuilder) -> Result<()> {
        let pos = self
            .position(index.episode)
            .ok_or_else(|| Error::shape(format!("stale sample index {index:?}")))?;
        let ep = &self.episodes[pos].episode;
        let t_len = ep.len();
        for t in 0..self.horizon {
            let k = index.start + t;
            if k < t_len {
                builder.states[t].extend_from_slice(&ep.states[k]);
                builder.actions[t].extend_from_slice(&ep.actions[k]);
                builder.rewards[t].push(ep.rewards[k]);
                builder.terminals[t].push(ep.dones[k]);
                builder.mask[t].push(1.0);
            } else {
                // pad past the true end with the final transition, masked out
                builder.states[t].extend_from_slice(&ep.states[t_len]);
                builder.actions[t].extend_from_slice(&ep.actions[t_len - 1]);
                builder.rewards[t].push(0.0);
                builder.terminals[t].push(true);
                builder.mask[t].push(0.0);
            }
        }
        let last = (index.start + self.horizon).min(t_len);
        builder.states[self.horizon].extend_from_slice(&ep.states[last]);
        Ok(())
    }
}

/// Length-`h` windows of `(s, a, r, s')`, time-major: `states[t]` is a
/// `size x state_dim` batch for `t = 0..=h` so that `s'_t = states[t + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsequenceBatch {
    pub horizon: usize,
    pub states: Vec<Batch>,
    pub actions: Vec<Batch>,
    pub rewards: Vec<Vec<f64>>,
    /// True termination after action `t` (no bootstrapping).
    pub terminals: Vec<Vec<bool>>,
    /// 1 for real steps, 0 for padding beyond an episode's end.
    pub mask: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub sources: Vec<Source>,
    pub indices: Vec<SampleIndex>,
}

impl SubsequenceBatch {
    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].cols()
    }

    pub fn count(&self, source: Source) -> usize {
        self.sources.iter().filter(|s| **s == source).count()
    }

    /// Checks that every per-step array agrees with the batch size and horizon.
    pub fn validate(&self) -> Result<()> {
        let n = self.size();
        let h = self.horizon;
        let ok = h >= 1
            && n > 0
            && self.states.len() == h + 1
            && self.actions.len() == h
            && self.rewards.len() == h
            && self.terminals.len() == h
            && self.mask.len() == h
            && self.states.iter().all(|b| b.rows() == n && b.cols() == self.state_dim())
            && self.actions.iter().all(|b| b.rows() == n && b.cols() == self.action_dim())
            && self.rewards.iter().all(|r| r.len() == n)
            && self.terminals.iter().all(|r| r.len() == n)
            && self.mask.iter().all(|r| r.len() == n)
            && self.sources.len() == n
            && self.indices.len() == n;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("malformed subsequence batch"))
        }
    }

    /// Builds a batch from explicit windows of transitions; each window is a
    /// list of `(s, a, r, s', terminal)` of length `h`. Used by tests and tools.
    pub fn from_windows(windows: &[Vec<(Vec<f64>, Vec<f64>, f64, Vec<f64>, bool)>]) -> Result<Self> {
        let h = windows.first().map(Vec::len).unwrap_or(0);
        if h == 0 || windows.iter().any(|w| w.len() != h) {
            return Err(Error::shape("windows must share a positive length"));
        }
        let mut b = BatchBuilder::new(h);
        for (i, w) in windows.iter().enumerate() {
            for (t, (s, a, r, _, term)) in w.iter().enumerate() {
                b.states[t].extend_from_slice(s);
                b.actions[t].extend_from_slice(a);
                b.rewards[t].push(*r);
                b.terminals[t].push(*term);
                b.mask[t].push(1.0);
            }
            b.states[h].extend_from_slice(&w[h - 1].3);
            b.weights.push(1.0);
            b.sources.push(Source::Offline);
            b.indices.push(SampleIndex { episode: i as u64, start: 0 });
        }
        let sd = windows[0][0].0.len();
        let ad = windows[0][0].1.len();
        b.finish(sd, ad)
    }
}

struct BatchBuilder {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<Vec<f64>>,
    terminals: Vec<Vec<bool>>,
    mask: Vec<Vec<f64>>,
    weights: Vec<f64>,
    sources: Vec<Source>,
    indices: Vec<SampleIndex>,
    horizon: usize,
}

impl BatchBuilder {
    fn new(horizon: usize) -> Self {
        Self {
            states: vec![Vec::new(); horizon + 1],
            actions: vec![Vec::new(); horizon],
            rewards: vec![Vec::new(); horizon],
            terminals: vec![Vec::new(); horizon],
            mask: vec![Vec::new(); horizon],
            weights: Vec::new(),
            sources: Vec::new(),
            indices: Vec::new(),
            horizon,
        }
    }

    fn finish(self, state_dim: usize, action_dim: usize) -> Result<SubsequenceBatch> {
        let n = self.weights.len();
        let states = self
            .states
            .into_iter()
            .map(|d| Batch::new(n, state_dim, d))
            .collect::<Result<Vec<_>>>()?;
        let actions = self
            .actions
            .into_iter()
            .map(|d| Batch::new(n, action_dim, d))
            .collect::<Result<Vec<_>>>()?;
        let batch = SubsequenceBatch {
            horizon: self.horizon,
            states,
            actions,
            rewards: self.rewards,
            terminals: self.terminals,
            mask: self.mask,
            weights: self.weights,
            sources: self.sources,
            indices: self.indices,
        };
        batch.validate()?;
        Ok(batch)
    }
}

/// Draws `batch_size` windows: half from each buffer when both hold data,
/// everything from whichever one is non-empty otherwise. PER applies within
/// each buffer separately.
pub fn sample_balanced<R: Rng + ?Sized>(
    offline: &mut EpisodeBuffer,
    online: &mut EpisodeBuffer,
    batch_size: usize,
    rng: &mut R,
) -> Result<SubsequenceBatch> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if offline.horizon != online.horizon {
        return Err(Error::config("offline and online buffers use different horizons"));
    }
    let (n_off, n_on) = match (offline.is_empty(), online.is_empty()) {
        (true, true) => return Err(Error::EmptyBuffer),
        (false, true) => (batch_size, 0),
        (true, false) => (0, batch_size),
        (false, false) => {
            if batch_size % 2 != 0 {
                return Err(Error::config(format!("balanced batch size {batch_size} must be even")));
            }
            (batch_size / 2, batch_size / 2)
        }
    };
    let mut builder = BatchBuilder::new(offline.horizon);
    let mut dims = None;
    for (buffer, n) in [(&mut *offline, n_off), (&mut *online, n_on)] {
        if n == 0 {
            continue;
        }
        let first = buffer.episodes.front().unwrap();
        dims.get_or_insert((first.episode.states[0].len(), first.episode.actions[0].len()));
        for (idx, w) in buffer.sample_indices(n, rng)? {
            buffer.push_window(idx, &mut builder)?;
            builder.weights.push(w);
            builder.sources.push(buffer.source);
            builder.indices.push(idx);
        }
    }
    let (sd, ad) = dims.unwrap();
    builder.finish(sd, ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_episode(len: usize, tag: f64) -> Episode {
        Episode {
            states: (0..=len).map(|t| vec![tag, t as f64]).collect(),
            actions: (0..len).map(|t| vec![t as f64 * 0.01]).collect(),
            rewards: (0..len).map(|t| t as f64).collect(),
            dones: (0..len).map(|t| t + 1 == len).collect(),
            success: true,
            provenance: "test".into(),
        }
    }

    fn buffer(source: Source, h: usize) -> EpisodeBuffer {
        EpisodeBuffer::new(source, h, None, PerConfig::default())
    }

    #[test]
    fn empty_buffer_starts_at_priority_one() {
        let mut b = buffer(Source::Offline, 3);
        let id = b.add_episode(toy_episode(10, 0.0)).unwrap();
        assert_eq!(b.num_starts(), 10);
        for s in 0..10 {
            assert_eq!(b.priority(SampleIndex { episode: id, start: s }), Some(1.0));
        }
    }

    #[test]
    fn new_episode_inherits_max_priority() {
        let mut b = buffer(Source::Online, 2);
        let a = b.add_episode(toy_episode(4, 0.0)).unwrap();
        b.update_priorities(
            &[SampleIndex { episode: a, start: 0 }, SampleIndex { episode: a, start: 1 }],
            &[2.5, 0.5],
        )
        .unwrap();
        let c = b.add_episode(toy_episode(3, 1.0)).unwrap();
        let expect = 2.5 + PerConfig::default().priority_floor;
        assert_eq!(b.priority(SampleIndex { episode: c, start: 0 }), Some(expect));
        assert_eq!(b.priority(SampleIndex { episode: c, start: 1 }), Some(expect));
    }

    #[test]
    fn priorities_export_and_restore() {
        let mut b = buffer(Source::Offline, 2);
        let a = b.add_episode(toy_episode(4, 0.0)).unwrap();
        b.add_episode(toy_episode(3, 1.0)).unwrap();
        b.update_priorities(&[SampleIndex { episode: a, start: 1 }], &[3.0]).unwrap();
        let saved = b.priorities();
        assert_eq!(saved.len(), b.num_starts());
        let mut fresh = buffer(Source::Offline, 2);
        fresh.add_episode(toy_episode(4, 0.0)).unwrap();
        fresh.add_episode(toy_episode(3, 1.0)).unwrap();
        fresh.set_priorities(&saved).unwrap();
        assert_eq!(fresh.priorities(), saved);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(b.sample_indices(20, &mut r1).unwrap(), fresh.sample_indices(20, &mut r2).unwrap());
        assert!(fresh.set_priorities(&saved[1..]).is_err());
        assert!(fresh.set_priorities(&vec![0.0; saved.len()]).is_err());
    }

    #[test]
    fn fifo_eviction_keeps_count_invariant() {
        let mut b = EpisodeBuffer::new(Source::Online, 2, Some(25), PerConfig::default());
        let mut total_added = 0;
        for i in 0..6 {
            b.add_episode(toy_episode(10, i as f64)).unwrap();
            total_added += 10;
            assert!(b.num_transitions() <= 25);
            let stored: usize = b.episodes().map(Episode::len).sum();
            assert_eq!(stored, b.num_transitions());
        }
        assert_eq!(total_added - b.num_transitions(), 40);
        assert_eq!(b.episode_ids().collect::<Vec<_>>(), vec![4, 5]);
        // stale index is silently skipped
        b.update_priorities(&[SampleIndex { episode: 0, start: 0 }], &[3.0]).unwrap();
    }

    #[test]
    fn inconsistent_episode_rejected() {
        let mut b = buffer(Source::Offline, 2);
        let mut ep = toy_episode(5, 0.0);
        ep.rewards.pop();
        assert!(matches!(b.add_episode(ep), Err(Error::Format { .. })));
    }

    #[test]
    fn windows_stay_inside_one_episode() {
        let mut off = buffer(Source::Offline, 4);
        let mut on = buffer(Source::Online, 4);
        for i in 0..5 {
            off.add_episode(toy_episode(6 + i, i as f64)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_balanced(&mut off, &mut on, 64, &mut rng).unwrap();
        for i in 0..batch.size() {
            let tag = batch.states[0].row(i)[0];
            let len = 6.0 + tag;
            let start = batch.indices[i].start as f64;
            assert_eq!(batch.states[0].row(i)[1], start);
            for t in 0..=4 {
                let row = batch.states[t].row(i);
                assert_eq!(row[0], tag);
                assert_eq!(row[1], (start + t as f64).min(len));
                if t < 4 {
                    let real = start + (t as f64) < len;
                    assert_eq!(batch.mask[t][i], if real { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn short_episode_is_padded_and_masked() {
        let mut off = buffer(Source::Offline, 4);
        let mut on = buffer(Source::Online, 4);
        off.add_episode(toy_episode(2, 7.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_balanced(&mut off, &mut on, 16, &mut rng).unwrap();
        let mut seen = [false; 2];
        for i in 0..b.size() {
            let start = b.indices[i].start;
            seen[start] = true;
            let mask: Vec<f64> = b.mask.iter().map(|m| m[i]).collect();
            let expect: Vec<f64> = (0..4).map(|t| if start + t < 2 { 1.0 } else { 0.0 }).collect();
            assert_eq!(mask, expect);
            assert_eq!(b.rewards[2][i], 0.0);
            assert!(b.terminals[3][i]);
            assert_eq!(b.states[4].row(i), &[7.0, 2.0]);
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn balanced_counts_and_fallback() {
        let mut off = buffer(Source::Offline, 2);
        let mut on = buffer(Source::Online, 2);
        off.add_episode(toy_episode(8, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_balanced(&mut off, &mut on, 256, &mut rng).unwrap();
        assert_eq!(b.count(Source::Offline), 256);
        on.add_episode(toy_episode(8, 1.0)).unwrap();
        let b = sample_balanced(&mut off, &mut on, 256, &mut rng).unwrap();
        assert_eq!((b.count(Source::Offline), b.count(Source::Online)), (128, 128));
        let b = sample_balanced(&mut off, &mut on, 2, &mut rng).unwrap();
        assert_eq!((b.count(Source::Offline), b.count(Source::Online)), (1, 1));
        assert!(sample_balanced(&mut off, &mut on, 3, &mut rng).is_err());
    }

    #[test]
    fn both_empty_is_error() {
        let mut off = buffer(Source::Offline, 2);
        let mut on = buffer(Source::Online, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(sample_balanced(&mut off, &mut on, 4, &mut rng), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn alpha_zero_is_uniform_by_enumeration() {
        let per = PerConfig { alpha: 0.0, ..PerConfig::default() };
        let mut b = EpisodeBuffer::new(Source::Offline, 2, None, per);
        let id = b.add_episode(toy_episode(5, 0.0)).unwrap();
        b.update_priorities(&[SampleIndex { episode: id, start: 1 }], &[50.0]).unwrap();
        b.rebuild();
        // every leaf carries exactly the same mass
        let n = b.tree.len();
        for i in 0..n {
            assert_eq!(b.tree.get(i) / b.tree.total(), 1.0 / n as f64);
        }
    }

    #[test]
    fn importance_weights_are_max_normalized() {
        let per = PerConfig { alpha: 1.0, beta: 0.4, priority_floor: 0.0 };
        let mut b = EpisodeBuffer::new(Source::Offline, 1, None, per);
        let id = b.add_episode(toy_episode(4, 0.0)).unwrap();
        b.update_priorities(&[SampleIndex { episode: id, start: 0 }], &[5.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let drawn = b.sample_indices(200, &mut rng).unwrap();
        let max = drawn.iter().map(|d| d.1).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        for (idx, w) in drawn {
            // P = 5/8 for start 0, 1/8 for the others; w ∝ P^-beta
            let expected = if idx.start == 0 { (5.0f64 / 8.0 * 4.0).powf(-0.4) / (0.5f64).powf(-0.4) } else { 1.0 };
            assert!((w - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn priority_ratio_is_reflected_in_frequencies() {
        let per = PerConfig { alpha: 1.0, beta: 0.4, priority_floor: 1e-4 };
        let mut b = EpisodeBuffer::new(Source::Offline, 1, None, per);
        let id = b.add_episode(toy_episode(10, 0.0)).unwrap();
        let idx: Vec<_> = (0..10).map(|s| SampleIndex { episode: id, start: s }).collect();
        let mut td = vec![1.0; 10];
        td[3] = 9.0;
        b.update_priorities(&idx, &td).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut counts = [0usize; 10];
        for (i, _) in b.sample_indices(draws, &mut rng).unwrap() {
            counts[i.start] += 1;
        }
        let f = per.priority_floor;
        let total = 9.0 + f + 9.0 * (1.0 + f);
        for (s, &c) in counts.iter().enumerate() {
            let p = if s == 3 { (9.0 + f) / total } else { (1.0 + f) / total };
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma, "start {s}: {c}");
        }
    }

    #[test]
    fn equal_td_errors_restore_uniform_sampling() {
        let mut b = buffer(Source::Offline, 2);
        let id = b.add_episode(toy_episode(6, 0.0)).unwrap();
        let idx: Vec<_> = (0..6).map(|s| SampleIndex { episode: id, start: s }).collect();
        b.update_priorities(&idx, &[4.0, 0.1, 2.0, 0.0, 1.0, 3.0]).unwrap();
        b.update_priorities(&idx, &[0.7; 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let draws = 100_000;
        let mut counts = [0usize; 6];
        for (i, w) in b.sample_indices(draws, &mut rng).unwrap() {
            counts[i.start] += 1;
            assert_eq!(w, 1.0);
        }
        let p = 1.0 / 6.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn accounting_and_contiguity(
                lens in proptest::collection::vec(1usize..12, 1..12),
                cap in 5usize..60,
                h in 1usize..5,
                seed in 0u64..1000,
            ) {
                let mut on = EpisodeBuffer::new(Source::Online, h, Some(cap), PerConfig::default());
                let mut off = EpisodeBuffer::new(Source::Offline, h, None, PerConfig::default());
                let mut added = 0;
                let mut evicted_floor = 0;
                for (i, len) in lens.iter().enumerate() {
                    on.add_episode(toy_episode(*len, i as f64)).unwrap();
                    added += len;
                    let stored: usize = on.episodes().map(Episode::len).sum();
                    prop_assert_eq!(stored, on.num_transitions());
                    prop_assert!(on.num_transitions() <= cap.max(*len));
                    prop_assert!(added - on.num_transitions() >= evicted_floor);
                    evicted_floor = added - on.num_transitions();
                    prop_assert!(on.max_priority().unwrap() > 0.0);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let batch = sample_balanced(&mut off, &mut on, 8, &mut rng).unwrap();
                for i in 0..batch.size() {
                    let tag = batch.states[0].row(i)[0];
                    let t0 = batch.states[0].row(i)[1];
                    for t in 0..h {
                        let row = batch.states[t + 1].row(i);
                        prop_assert_eq!(row[0], tag);
                        let expect = if batch.mask[t][i] > 0.0 { t0 + t as f64 + 1.0 } else { batch.states[t].row(i)[1] };
                        prop_assert_eq!(row[1], expect);
                    }
                }
            }
        }
    }
}
