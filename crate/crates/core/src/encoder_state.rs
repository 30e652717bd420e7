//! Phase-1 encoder state: the query/key parameter pair kept in sync by an
//! exponential moving average, and the FIFO queue of past keys that serves
//! as the negative set.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::UNIT_NORM_TOLERANCE;
use crate::matrix::{norm, Matrix};

/// Flattened query-encoder parameters and the key-encoder parameters that
/// track them.
///
/// The key parameters have no mutable accessor: the only way they change is
/// [`MomentumEncoderPair::momentum_update`].
#[derive(Debug, Clone)]
pub struct MomentumEncoderPair {
    query: Vec<f32>,
    key: Vec<f32>,
    momentum: f32,
}

impl MomentumEncoderPair {
    /// Starts a pair whose key parameters are an exact copy of `query`.
    pub fn new(query: Vec<f32>, momentum: f32) -> Result<Self> {
        let key = query.clone();
        Self::from_parts(query, key, momentum)
    }

    pub fn from_parts(query: Vec<f32>, key: Vec<f32>, momentum: f32) -> Result<Self> {
        if query.len() != key.len() {
            return Err(Error::Shape(format!(
                "query encoder has {} parameters, key encoder has {}",
                query.len(),
                key.len()
            )));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Validation(format!(
                "momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(Self {
            query,
            key,
            momentum,
        })
    }

    pub fn query(&self) -> &[f32] {
        &self.query
    }

    /// Mutable query parameters, for the optimizer.
    pub fn query_mut(&mut self) -> &mut [f32] {
        &mut self.query
    }

    pub fn key(&self) -> &[f32] {
        &self.key
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    /// `key ← η·key + (1 − η)·query`, elementwise.
    pub fn momentum_update(&mut self) {
        let eta = self.momentum;
        let keep = 1.0 - eta;
        for (k, &q) in self.key.iter_mut().zip(&self.query) {
            *k = eta * *k + keep * q;
        }
    }

    pub fn into_parts(self) -> (Vec<f32>, Vec<f32>) {
        (self.query, self.key)
    }
}

/// Fixed-capacity circular buffer of unit-norm key embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    cursor: usize,
    len: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "queue needs positive capacity and dimension, got {capacity}x{dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            cursor: 0,
            len: 0,
        })
    }

    /// Rebuilds a queue from its serialized slot contents.
    pub fn from_state(
        capacity: usize,
        dim: usize,
        storage: Vec<f64>,
        cursor: usize,
        len: usize,
    ) -> Result<Self> {
        if storage.len() != capacity * dim || cursor >= capacity.max(1) || len > capacity {
            return Err(Error::Shape(format!(
                "inconsistent queue state: {} values, capacity {capacity}, dim {dim}, cursor {cursor}, len {len}",
                storage.len()
            )));
        }
        Ok(Self {
            capacity,
            dim,
            storage,
            cursor,
            len,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Next slot to be overwritten.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_ready(&self) -> bool {
        self.len == self.capacity
    }

    /// Raw slot storage, in slot order.
    pub fn storage(&self) -> &[f64] {
        &self.storage
    }

    /// Overwrites the `keys.rows()` oldest entries. Keys are re-normalized
    /// on the way in.
    pub fn enqueue(&mut self, keys: &Matrix) -> Result<()> {
        if keys.cols() != self.dim {
            return Err(Error::Shape(format!(
                "keys have dimension {}, queue holds {}",
                keys.cols(),
                self.dim
            )));
        }
        if keys.rows() > self.capacity {
            return Err(Error::Capacity {
                batch: keys.rows(),
                capacity: self.capacity,
            });
        }
        let err = keys.max_unit_norm_error();
        if !(err <= UNIT_NORM_TOLERANCE) {
            return Err(Error::Validation(format!(
                "keys are not unit-norm (max deviation {err:e})"
            )));
        }
        for row in keys.iter_rows() {
            let n = norm(row);
            let slot = &mut self.storage[self.cursor * self.dim..(self.cursor + 1) * self.dim];
            for (s, &v) in slot.iter_mut().zip(row) {
                *s = v / n;
            }
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Copy of all stored keys in slot order. Consecutive snapshots with an
    /// enqueue of `B` keys in between differ in exactly `B` rows.
    pub fn snapshot(&self) -> Result<Matrix> {
        if !self.is_ready() {
            return Err(Error::NotReady(format!(
                "queue holds {} of {} keys",
                self.len, self.capacity
            )));
        }
        Matrix::from_vec(self.capacity, self.dim, self.storage.clone())
    }

    /// Stored keys ordered from oldest to newest.
    pub fn oldest_first(&self) -> Matrix {
        let start = if self.is_ready() { self.cursor } else { 0 };
        let mut data = Vec::with_capacity(self.len * self.dim);
        for i in 0..self.len {
            let slot = (start + i) % self.capacity;
            data.extend_from_slice(&self.storage[slot * self.dim..(slot + 1) * self.dim]);
        }
        Matrix::from_vec(self.len, self.dim, data).expect("consistent queue shape")
    }

    /// Fills the queue from a stream of key batches. Every key in the
    /// stream is enqueued, so a longer stream leaves the most recent
    /// `capacity` keys. Fails if the stream runs dry before the queue is full.
    pub fn warm_start<I>(&mut self, source: I) -> Result<()>
    where
        I: IntoIterator<Item = Matrix>,
    {
        for batch in source {
            let mut start = 0;
            while start < batch.rows() {
                let take = (batch.rows() - start).min(self.capacity);
                let chunk = Matrix::from_vec(
                    take,
                    batch.cols(),
                    batch.as_slice()[start * batch.cols()..(start + take) * batch.cols()].to_vec(),
                )?;
                self.enqueue(&chunk)?;
                start += take;
            }
        }
        if !self.is_ready() {
            return Err(Error::NotReady(format!(
                "warm-up stream supplied only {} of {} keys",
                self.len, self.capacity
            )));
        }
        Ok(())
    }

    /// Fills every slot with an independent random unit vector.
    pub fn warm_start_random<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for slot in self.storage.chunks_exact_mut(self.dim) {
            loop {
                for v in slot.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let n = norm(slot);
                if n > 1e-12 {
                    slot.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        self.cursor = 0;
        self.len = self.capacity;
    }
}
