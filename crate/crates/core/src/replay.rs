use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fixed-capacity FIFO transition store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<X> {
    capacity: usize,
    items: Vec<X>,
    /// Slot overwritten by the next push once full.
    cursor: usize,
}

impl<X: Clone> ReplayBuffer<X> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, items: Vec::with_capacity(capacity.min(4096)), cursor: 0 }
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

    pub fn push(&mut self, x: X) {
        if self.items.len() < self.capacity {
            self.items.push(x);
        } else {
            self.items[self.cursor] = x;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    /// Contents from oldest to newest.
    pub fn ordered(&self) -> Vec<&X> {
        if self.items.len() < self.capacity {
            self.items.iter().collect()
        } else {
            self.items[self.cursor..].iter().chain(&self.items[..self.cursor]).collect()
        }
    }

    /// Uniform mini-batch without replacement; `None` while underfull.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&X>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        let idx = rand::seq::index::sample(rng, self.items.len(), batch);
        Some(idx.into_iter().map(|i| &self.items[i]).collect())
    }
}
