use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ActionBounds;
use crate::error::{domain, Result};

/// One transition `(s, Φ, r, s', d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    /// Normalized state features.
    pub state: Vec<f64>,
    /// Action in policy coordinates (menu units).
    pub action: Vec<f64>,
    /// The action mapped onto `[-1, 1]` within its box, as fed to the critic.
    pub action_features: Vec<f64>,
    /// Action box of the state.
    pub bounds: ActionBounds,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Action box of the next state.
    pub next_bounds: ActionBounds,
    pub done: bool,
}

/// Fixed-capacity ring buffer.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    records: Vec<ReplayRecord>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(domain("replay capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            records: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: ReplayRecord) {
        if self.records.len() < self.capacity {
            self.records.push(record);
        } else {
            self.records[self.next] = record;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&ReplayRecord>> {
        if self.records.is_empty() {
            return Err(domain("cannot sample from an empty buffer"));
        }
        Ok((0..n)
            .map(|_| &self.records[rng.random_range(0..self.records.len())])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(r: f64) -> ReplayRecord {
        ReplayRecord {
            state: vec![0.0],
            action: vec![0.0],
            action_features: vec![-1.0],
            bounds: ActionBounds::new(vec![0.0], vec![1.0]).unwrap(),
            reward: r,
            next_state: vec![0.0],
            next_bounds: ActionBounds::new(vec![0.0], vec![1.0]).unwrap(),
            done: true,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(record(i as f64));
        }
        assert_eq!(b.len(), 3);
        let mut rewards: Vec<f64> = b.records.iter().map(|r| r.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_rules() {
        let mut b = ReplayBuffer::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.sample(1, &mut rng).is_err());
        b.push(record(1.0));
        let s = b.sample(5, &mut rng).unwrap();
        assert_eq!(s.len(), 5);
        assert!(ReplayBuffer::new(0).is_err());
    }
}
