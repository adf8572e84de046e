use ndarray::{Array1, Array2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Fixed-capacity ring store; the oldest entry is overwritten first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer<T = Transition> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

/// A sampled minibatch laid out row-wise.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
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

    pub fn push(&mut self, t: T) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// Uniform draw without replacement; returns fewer rows when the buffer is small.
    pub fn sample_indices<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<usize> {
        let n = size.min(self.items.len());
        index::sample(rng, self.items.len(), n).into_vec()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }
}

impl ReplayBuffer<Transition> {
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Batch {
        let idx = self.sample_indices(size, rng);
        let rows: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        stack(&rows)
    }
}

pub fn stack(rows: &[&Transition]) -> Batch {
    let n = rows.len();
    let (sd, ad) = rows.first().map_or((0, 0), |t| (t.state.len(), t.action.len()));
    Batch {
        states: Array2::from_shape_fn((n, sd), |(i, j)| rows[i].state[j]),
        actions: Array2::from_shape_fn((n, ad), |(i, j)| rows[i].action[j]),
        rewards: rows.iter().map(|t| t.reward).collect(),
        next_states: Array2::from_shape_fn((n, sd), |(i, j)| rows[i].next_state[j]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(r: f64) -> Transition {
        Transition {
            state: vec![r],
            action: vec![0.0],
            reward: r,
            next_state: vec![r],
        }
    }

    #[test]
    fn oldest_entries_are_evicted() {
        let mut b = ReplayBuffer::new(5);
        for i in 0..8 {
            b.push(tr(i as f64));
        }
        assert_eq!(b.len(), 5);
        let mut rewards: Vec<f64> = b.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn batch_has_no_repeats() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..50 {
            b.push(tr(i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut idx = b.sample_indices(50, &mut rng);
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 50);
        let batch = b.sample(8, &mut rng);
        assert_eq!(batch.states.dim(), (8, 1));
        assert_eq!(b.sample_indices(80, &mut rng).len(), 50);
    }
}
