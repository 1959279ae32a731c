use std::collections::VecDeque;

use super::episode::Episode;
use crate::rng::Rng;

/// Ring buffer of complete episodes with uniform sampling.
///
/// Episodes are inserted whole, so a sample never sees a partially written
/// episode.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), episodes: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    /// Indices of `k` distinct stored episodes, uniformly at random.
    /// `k` is capped at the number stored.
    pub fn sample_indices(&self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.episodes.len()).collect();
        let k = k.min(idx.len());
        // Partial Fisher-Yates.
        for i in 0..k {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<&Episode> {
        self.sample_indices(k, rng).into_iter().map(|i| &self.episodes[i]).collect()
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }
}
