//! FIFO ring buffer of relabeled transitions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, EndKind};
use crate::error::{contract, ensure, Result};

/// One supervised example: state, action and its relabeled target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: Action,
    /// Raw relabeled target value Z.
    pub z: f64,
    /// Z under the current normalizer; refreshed when sampled.
    pub z_norm: f64,
    /// Regression weight; refreshed when sampled.
    pub weight: f64,
    /// Reward observed on this step (needed to refit value targets).
    pub reward: f64,
    /// Set on the last step of a rollout.
    pub end: Option<EndKind>,
    /// Observation after the last step of a rollout, for bootstrapping.
    pub final_observation: Option<Vec<f64>>,
}

impl Transition {
    pub fn new(observation: Vec<f64>, action: Action, z: f64) -> Self {
        Self {
            observation,
            action,
            z,
            z_norm: z,
            weight: 1.0,
            reward: 0.0,
            end: None,
            final_observation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(
            self.observation.iter().all(|v| v.is_finite())
                && self.z.is_finite()
                && self.z_norm.is_finite()
                && self.reward.is_finite(),
            || "transition has non-finite fields".into(),
        )?;
        ensure(self.weight >= 0.0 && self.weight.is_finite(), || {
            format!("transition weight {} is not a finite non-negative number", self.weight)
        })
    }
}

/// Fixed-capacity store that evicts the oldest entry first.
#[derive(Debug, Clone)]
pub struct RingBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    /// Slot the next push writes to once the buffer is full.
    cursor: usize,
    total_inserted: u64,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        ensure(capacity >= 1, || "ring buffer capacity must be at least 1".into())?;
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
            total_inserted: 0,
        })
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

    pub fn total_inserted(&self) -> u64 {
        self.total_inserted
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.total_inserted += 1;
    }

    pub fn extend<I: IntoIterator<Item = T>>(&mut self, items: I) {
        for item in items {
            self.push(item);
        }
    }

    /// The `i`-th oldest stored item.
    pub fn get(&self, i: usize) -> Option<&T> {
        if i >= self.items.len() {
            return None;
        }
        let start = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items.get((start + i) % self.items.len())
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> + '_ {
        (0..self.items.len()).map(move |i| self.get(i).expect("index in range"))
    }

    /// Mutable access to every stored item, in storage order.
    pub fn iter_mut_unordered(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.items.iter_mut()
    }

    /// `batch_size` positions drawn uniformly with replacement (0 = oldest).
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(contract("cannot sample from an empty buffer"));
        }
        Ok((0..batch_size).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<T>>
    where
        T: Clone,
    {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| self.get(i).expect("sampled index in range").clone())
            .collect())
    }
}

impl RingBuffer<Transition> {
    /// Raw targets of every stored transition, oldest first.
    pub fn target_values(&self) -> Vec<f64> {
        self.iter().map(|t| t.z).collect()
    }
}

pub fn buffer_push<T>(buffer: &mut RingBuffer<T>, transitions: impl IntoIterator<Item = T>) {
    buffer.extend(transitions);
}

pub fn buffer_sample<T: Clone, R: Rng + ?Sized>(
    buffer: &RingBuffer<T>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<T>> {
    buffer.sample(batch_size, rng)
}

pub fn buffer_all_values(buffer: &RingBuffer<Transition>) -> Vec<f64> {
    buffer.target_values()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn contents<T: Clone>(b: &RingBuffer<T>) -> Vec<T> {
        b.iter().cloned().collect()
    }

    #[test]
    fn capacity_three_keeps_last_three() {
        let mut b = RingBuffer::new(3).unwrap();
        buffer_push(&mut b, ['a', 'b', 'c', 'd']);
        assert_eq!(contents(&b), vec!['b', 'c', 'd']);
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let mut b = RingBuffer::new(10).unwrap();
        b.extend([1, 2, 3]);
        assert_eq!(contents(&b), vec![1, 2, 3]);
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(RingBuffer::<u8>::new(0).is_err());
    }

    #[test]
    fn large_batches_match_list_oracle() {
        let cap = 100_000;
        let mut b = RingBuffer::new(cap).unwrap();
        let mut oracle: Vec<u64> = Vec::new();
        let mut next = 0u64;
        for _ in 0..120 {
            let batch: Vec<u64> = (next..next + 2000).collect();
            next += 2000;
            oracle.extend(&batch);
            b.extend(batch);
        }
        let start = oracle.len().saturating_sub(cap);
        assert_eq!(contents(&b), oracle[start..].to_vec());
    }

    #[test]
    fn singleton_sampling() {
        let mut b = RingBuffer::new(4).unwrap();
        b.push(7);
        assert_eq!(buffer_sample(&b, 5, &mut seeded(0)).unwrap(), vec![7; 5]);
    }

    #[test]
    fn empty_sampling_is_error() {
        let b = RingBuffer::<i32>::new(4).unwrap();
        assert!(b.sample(1, &mut seeded(0)).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut b = RingBuffer::new(50).unwrap();
        b.extend(0..50);
        let x = b.sample(32, &mut seeded(3)).unwrap();
        let y = b.sample(32, &mut seeded(3)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = RingBuffer::new(10).unwrap();
        b.extend(0..10usize);
        let draws = b.sample(100_000, &mut seeded(12)).unwrap();
        let mut counts = [0usize; 10];
        for d in draws {
            counts[d] += 1;
        }
        let sigma = (100_000.0 * 0.1 * 0.9f64).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() <= 4.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn all_values_tracks_contents() {
        let mut b = RingBuffer::new(2).unwrap();
        assert!(buffer_all_values(&b).is_empty());
        for z in [1.0, 2.0, 3.0] {
            b.push(Transition::new(vec![0.0], Action::Discrete(0), z));
        }
        assert_eq!(buffer_all_values(&b), vec![2.0, 3.0]);
    }

    #[test]
    fn transition_validation() {
        let mut t = Transition::new(vec![0.0], Action::Discrete(0), 1.0);
        t.validate().unwrap();
        t.weight = -1.0;
        assert!(t.validate().is_err());
    }

    proptest! {
        #[test]
        fn fifo_suffix_invariant(
            cap in 1usize..20,
            pushes in prop::collection::vec(0usize..7, 0..30),
            seed in 0u64..1000,
        ) {
            let mut b = RingBuffer::new(cap).unwrap();
            let mut oracle = Vec::new();
            let mut next = 0u32;
            let mut rng = seeded(seed);
            for n in pushes {
                let batch: Vec<u32> = (next..next + n as u32).collect();
                next += n as u32;
                oracle.extend(&batch);
                b.extend(batch);
                prop_assert_eq!(b.len(), oracle.len().min(cap));
                let suffix = &oracle[oracle.len() - b.len()..];
                prop_assert_eq!(contents(&b), suffix.to_vec());
                if !b.is_empty() {
                    for s in b.sample(8, &mut rng).unwrap() {
                        prop_assert!(suffix.contains(&s));
                    }
                }
            }
        }
    }
}
