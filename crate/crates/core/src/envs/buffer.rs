use std::collections::VecDeque;

use rand::Rng;

use super::dataset::{Dataset, Transition};
use crate::numkit::{rng_from_seed, Matrix};
use crate::{Error, Result};

/// FIFO transition store. `capacity: None` never evicts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    capacity: Option<usize>,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: Option<usize>) -> Result<ReplayBuffer> {
        if capacity == Some(0) {
            return Err(Error::invalid("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::new(),
        })
    }

    pub fn unbounded() -> ReplayBuffer {
        ReplayBuffer::default()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, transition: Transition) {
        if let Some(cap) = self.capacity {
            if self.items.len() == cap {
                self.items.pop_front();
            }
        }
        self.items.push_back(transition);
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

/// Column-stacked minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_states: Matrix,
    /// 1.0 for terminal transitions.
    pub dones: Vec<f64>,
    /// Present only when every sample came from the dataset.
    pub mc_returns: Option<Vec<f64>>,
    /// Outcome labels; buffer samples carry 1.
    pub w: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_parts(
        samples: &[(&Transition, f64, Option<f64>)],
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Batch> {
        let n = samples.len();
        let mut s = Vec::with_capacity(n * state_dim);
        let mut a = Vec::with_capacity(n * action_dim);
        let mut s2 = Vec::with_capacity(n * state_dim);
        let mut mc = Vec::with_capacity(n);
        let mut all_mc = true;
        for (tr, _, m) in samples {
            s.extend_from_slice(&tr.s);
            a.extend_from_slice(&tr.a);
            s2.extend_from_slice(&tr.s2);
            match m {
                Some(v) => mc.push(*v),
                None => all_mc = false,
            }
        }
        Ok(Batch {
            states: Matrix::from_vec(n, state_dim, s)?,
            actions: Matrix::from_vec(n, action_dim, a)?,
            next_states: Matrix::from_vec(n, state_dim, s2)?,
            rewards: samples.iter().map(|(t, _, _)| t.r).collect(),
            dones: samples.iter().map(|(t, _, _)| f64::from(u8::from(t.done))).collect(),
            mc_returns: all_mc.then_some(mc),
            w: samples.iter().map(|(_, w, _)| *w).collect(),
        })
    }
}

/// Indices drawn by [`mixed_batch`]: (dataset flat indices, buffer indices).
pub fn mixed_batch_indices(
    dataset_len: usize,
    buffer_len: usize,
    batch_size: usize,
    mix: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size must be at least 2"));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::invalid(format!("mix {mix} outside [0, 1]")));
    }
    let n_data = (mix * batch_size as f64).floor() as usize;
    let n_buf = batch_size - n_data;
    if n_data > 0 && dataset_len == 0 {
        return Err(Error::invalid("dataset is empty but the mix asks for dataset samples"));
    }
    if n_buf > 0 && buffer_len == 0 {
        return Err(Error::invalid("replay buffer is empty but the mix asks for buffer samples"));
    }
    let mut rng = rng_from_seed(seed);
    let data = (0..n_data).map(|_| rng.random_range(0..dataset_len)).collect();
    let buf = (0..n_buf).map(|_| rng.random_range(0..buffer_len)).collect();
    Ok((data, buf))
}

/// Uniform samples: ⌊mix·batch_size⌋ from the dataset, the rest from the buffer.
pub fn mixed_batch(
    dataset: &Dataset,
    buffer: &ReplayBuffer,
    batch_size: usize,
    mix: f64,
    seed: u64,
) -> Result<Batch> {
    let (di, bi) = mixed_batch_indices(dataset.len(), buffer.len(), batch_size, mix, seed)?;
    let mut samples = Vec::with_capacity(batch_size);
    for i in di {
        let (tr, w, mc) = dataset.get(i).expect("index in range");
        samples.push((tr, w, Some(mc)));
    }
    for i in bi {
        samples.push((buffer.get(i).expect("index in range"), 1.0, None));
    }
    Batch::from_parts(&samples, dataset.env.state_dim, dataset.env.action_dim)
}
