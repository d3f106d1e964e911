//! Prioritized replay for DQN-family objectives and a recency window of
//! trajectories for the pessimistic backward policy.

use std::collections::VecDeque;

use rand::Rng;
use thiserror::Error;

use crate::env::{StateId, Trajectory};

/// Added to `|td_error|` so that no entry starves.
pub const PRIORITY_FLOOR: f64 = 1e-8;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ReplayError {
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("replay index {index} out of range for buffer of size {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// One forward edge taken during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub state: StateId,
    /// Child slot within `children(state)`.
    pub slot: usize,
    pub next: StateId,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct PrioritizedSample<T> {
    pub items: Vec<T>,
    /// Importance weights `(N p_i)^-beta`, normalised so the largest in the batch is 1.
    pub weights: Vec<f64>,
    pub indices: Vec<usize>,
}

/// Ring buffer with proportional prioritisation. Sampling is a linear scan over
/// cumulative priorities, which is adequate up to ~1e5 entries.
#[derive(Debug, Clone)]
pub struct PrioritizedBuffer<T> {
    capacity: usize,
    entries: Vec<T>,
    priorities: Vec<f64>,
    next: usize,
    alpha: f64,
    beta: f64,
}

impl<T: Clone> PrioritizedBuffer<T> {
    pub fn new(capacity: usize, alpha: f64, beta: f64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            entries: Vec::new(),
            priorities: Vec::new(),
            next: 0,
            alpha,
            beta,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn priorities(&self) -> &[f64] {
        &self.priorities
    }

    pub fn get(&self, index: usize) -> Option<&T> {
        self.entries.get(index)
    }

    fn max_priority(&self) -> f64 {
        if self.priorities.is_empty() {
            1.0
        } else {
            self.priorities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
    }

    /// Inserts items with the current maximum priority (1 for an empty buffer),
    /// overwriting the oldest entries once full.
    pub fn push(&mut self, items: impl IntoIterator<Item = T>) {
        for item in items {
            let p = self.max_priority();
            if self.entries.len() < self.capacity {
                self.entries.push(item);
                self.priorities.push(p);
            } else {
                self.entries[self.next] = item;
                self.priorities[self.next] = p;
            }
            self.next = (self.next + 1) % self.capacity;
        }
    }

    /// Sampling probabilities `p_i ∝ priority_i^alpha`.
    pub fn probabilities(&self) -> Vec<f64> {
        let scaled: Vec<f64> = self.priorities.iter().map(|p| p.powf(self.alpha)).collect();
        let total: f64 = scaled.iter().sum();
        scaled.into_iter().map(|s| s / total).collect()
    }

    /// Draws `batch_size` entries with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<PrioritizedSample<T>, ReplayError> {
        if self.entries.is_empty() {
            return Err(ReplayError::Empty);
        }
        let probs = self.probabilities();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        let n = self.entries.len() as f64;
        let mut indices = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u = rng.gen::<f64>() * acc;
            let i = cumulative.partition_point(|&c| c <= u).min(probs.len() - 1);
            indices.push(i);
        }
        let raw: Vec<f64> = indices.iter().map(|&i| (n * probs[i]).powf(-self.beta)).collect();
        let w_max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights = raw.into_iter().map(|w| w / w_max).collect();
        let items = indices.iter().map(|&i| self.entries[i].clone()).collect();
        Ok(PrioritizedSample { items, weights, indices })
    }

    /// `priority_i <- |td_error_i| + PRIORITY_FLOOR`.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<(), ReplayError> {
        let len = self.entries.len();
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(ReplayError::IndexOutOfRange { index, len });
        }
        for (&i, e) in indices.iter().zip(td_errors) {
            self.priorities[i] = e.abs() + PRIORITY_FLOOR;
        }
        Ok(())
    }
}

/// FIFO of per-iteration trajectory batches.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    window: usize,
    batches: VecDeque<Vec<Trajectory>>,
}

impl TrajectoryBuffer {
    pub fn new(window: usize) -> Self {
        assert!(window > 0, "trajectory window must be positive");
        Self { window, batches: VecDeque::with_capacity(window + 1) }
    }

    /// Appends one iteration's batch, evicting the oldest batch beyond the window.
    pub fn push_batch(&mut self, batch: Vec<Trajectory>) {
        self.batches.push_back(batch);
        while self.batches.len() > self.window {
            self.batches.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.batches.iter().flatten()
    }

    /// `batch_size` distinct trajectories chosen uniformly; the whole buffer, in
    /// insertion order, when it holds no more than `batch_size`.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<Trajectory>, ReplayError> {
        let len = self.len();
        if len == 0 {
            return Err(ReplayError::Empty);
        }
        let all: Vec<&Trajectory> = self.iter().collect();
        if len <= batch_size {
            return Ok(all.into_iter().cloned().collect());
        }
        let picked = rand::seq::index::sample(rng, len, batch_size);
        Ok(picked.iter().map(|i| all[i].clone()).collect())
    }
}
