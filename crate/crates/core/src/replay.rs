//! Proportional prioritized experience replay.
//!
//! Priorities live in a flat binary sum tree (plus a max tree for the
//! "insert at current max" rule). Internal nodes are recomputed from their
//! children on every write, so sums never drift.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Frame, NUM_AGENTS};
use crate::{Error, Result};

/// One environment step as stored in replay.
#[derive(Debug, Clone)]
pub struct Transition {
    /// The `H` most recent frames before acting, oldest first.
    pub obs: Vec<Frame>,
    pub actions: [Action; NUM_AGENTS],
    pub rewards: [f64; NUM_AGENTS],
    /// Frame observed after acting; the next input is `obs[1..] + next_frame`.
    pub next_frame: Frame,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    sums: Vec<f64>,
    maxes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            sums: vec![0.0; 2 * leaves],
            maxes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.sums[1]
    }

    pub fn max(&self) -> f64 {
        self.maxes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.sums[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, p: f64) {
        let mut node = self.leaves + i;
        self.sums[node] = p;
        self.maxes[node] = p;
        while node > 1 {
            node /= 2;
            let (l, r) = (2 * node, 2 * node + 1);
            self.sums[node] = self.sums[l] + self.sums[r];
            self.maxes[node] = self.maxes[l].max(self.maxes[r]);
        }
    }

    /// Leaf whose cumulative interval `[prefix, prefix + p)` contains `mass`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = 2 * node;
            if mass < self.sums[left] || self.sums[left + 1] <= 0.0 {
                node = left;
            } else {
                mass -= self.sums[left];
                node = left + 1;
            }
        }
        node - self.leaves
    }

    /// Checks every internal node against its children.
    pub fn is_consistent(&self, rel_tol: f64) -> bool {
        (1..self.leaves).all(|n| {
            let s = self.sums[2 * n] + self.sums[2 * n + 1];
            (self.sums[n] - s).abs() <= rel_tol * s.abs().max(f64::MIN_POSITIVE)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerConfig {
    pub capacity: usize,
    pub alpha: f64,
    pub priority_eps: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            capacity: 25_000,
            alpha: 0.6,
            priority_eps: 1e-6,
        }
    }
}

#[derive(Debug)]
pub struct SampleBatch<'a, T> {
    pub items: Vec<&'a T>,
    pub indices: Vec<usize>,
    /// `(N P(i))^-beta`, normalized by the batch maximum.
    pub weights: Vec<f64>,
}

/// Ring buffer with FIFO eviction and proportional sampling.
#[derive(Debug, Clone)]
pub struct PerBuffer<T> {
    cfg: PerConfig,
    tree: SumTree,
    items: Vec<T>,
    next: usize,
}

impl<T> PerBuffer<T> {
    pub fn new(cfg: PerConfig) -> Result<Self> {
        if cfg.capacity == 0 {
            return Err(Error::param("capacity", "must be positive"));
        }
        if !(cfg.alpha >= 0.0) || !(cfg.priority_eps > 0.0) {
            return Err(Error::param("alpha", "alpha must be >= 0 and priority_eps > 0"));
        }
        Ok(Self {
            tree: SumTree::new(cfg.capacity),
            items: Vec::with_capacity(cfg.capacity.min(1 << 16)),
            next: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &PerConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.tree.get(i)
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// Slot the next push will write to.
    pub fn next_slot(&self) -> usize {
        self.next
    }

    pub fn push(&mut self, item: T) {
        let p = if self.is_empty() { 1.0 } else { self.tree.max() };
        let slot = self.next;
        if self.items.len() < self.cfg.capacity {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
        self.tree.set(slot, p);
        self.next = (slot + 1) % self.cfg.capacity;
    }

    /// Stratified proportional sample of `n` items.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, beta: f64, rng: &mut R) -> Result<SampleBatch<'_, T>> {
        if self.is_empty() {
            return Err(Error::State("cannot sample from an empty buffer".into()));
        }
        if n == 0 {
            return Err(Error::param("n", "batch size must be positive"));
        }
        let total = self.tree.total();
        let segment = total / n as f64;
        let len = self.len();
        let indices: Vec<usize> = (0..n)
            .map(|k| {
                let mass = ((k as f64 + rng.gen::<f64>()) * segment).min(total);
                self.tree.find(mass).min(len - 1)
            })
            .collect();
        let raw: Vec<f64> = indices
            .iter()
            .map(|&i| (len as f64 * self.tree.get(i) / total).powf(-beta))
            .collect();
        let max = raw.iter().copied().fold(f64::MIN, f64::max);
        Ok(SampleBatch {
            items: indices.iter().map(|&i| &self.items[i]).collect(),
            weights: raw.iter().map(|w| w / max).collect(),
            indices,
        })
    }

    /// Sets `leaf_i = (|td_i| + eps)^alpha` for every given slot.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::Shape(format!(
                "{} indices but {} TD errors",
                indices.len(),
                td_errors.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Bounds {
                index: bad,
                len: self.len(),
            });
        }
        for (&i, &td) in indices.iter().zip(td_errors) {
            let p = (td.abs() + self.cfg.priority_eps).powf(self.cfg.alpha);
            if !p.is_finite() {
                return Err(Error::Numeric(format!("non-finite priority from TD error {td}")));
            }
            self.tree.set(i, p);
        }
        Ok(())
    }
}
