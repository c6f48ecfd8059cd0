//! Seeded RNG streams, data partitioning and mini-batch drawing.
//!
//! Every solver derives its randomness from one master seed. The master
//! stream partitions the data, stream `1 + i` belongs to worker `i`, and the
//! initial state uses a dedicated stream so it does not depend on how much
//! randomness partitioning consumed.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelState, WorkerId};
use crate::objective::Dataset;

const INIT_STREAM: u64 = u64::MAX;

pub fn master_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn worker_rng(seed: u64, worker: WorkerId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + worker as u64);
    rng
}

/// Randomly partitions `0..m` into `workers` slices of `floor(m / workers)`
/// indices; the remainder goes to the last worker.
pub fn partition(m: usize, workers: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if workers == 0 {
        return Err(Error::invalid("workers", "must be >= 1"));
    }
    if workers > m {
        return Err(Error::TooManyWorkers { workers, points: m });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut master_rng(seed));
    let h = m / workers;
    let mut parts: Vec<Vec<usize>> = order.chunks(h).take(workers).map(<[usize]>::to_vec).collect();
    let tail = &order[h * workers..];
    parts[workers - 1].extend_from_slice(tail);
    Ok(parts)
}

/// How the shared starting state is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitStrategy {
    /// `k` distinct data points chosen with the master seed.
    #[default]
    Sample,
    /// All-zero state.
    Zeros,
}

impl InitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Sample => "sample",
            InitStrategy::Zeros => "zeros",
        }
    }
}

pub fn initial_state(data: &Dataset, k: usize, seed: u64, strategy: InitStrategy) -> Result<ModelState> {
    match strategy {
        InitStrategy::Zeros => ModelState::new(k, data.n(), vec![0.0; k * data.n()]),
        InitStrategy::Sample => {
            if k > data.m() {
                return Err(Error::invalid(
                    "k",
                    format!("cannot pick {k} distinct points from {}", data.m()),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(INIT_STREAM);
            let picked = index::sample(&mut rng, data.m(), k);
            let mut flat = Vec::with_capacity(k * data.n());
            for i in picked.iter() {
                flat.extend_from_slice(data.point(i));
            }
            ModelState::new(k, data.n(), flat)
        }
    }
}

/// Uniform mini-batch draws from one worker's (shuffled) partition.
#[derive(Debug, Clone)]
pub struct LocalSampler {
    indices: Vec<usize>,
    rng: ChaCha8Rng,
}

impl LocalSampler {
    pub fn new(mut indices: Vec<usize>, mut rng: ChaCha8Rng) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        indices.shuffle(&mut rng);
        Ok(Self { indices, rng })
    }

    /// Replaces `out` with `b` indices drawn uniformly with replacement.
    pub fn draw(&mut self, b: usize, out: &mut Vec<usize>) {
        out.clear();
        let len = self.indices.len();
        out.extend((0..b).map(|_| self.indices[self.rng.random_range(0..len)]));
    }

    /// A uniformly chosen worker in `0..workers`, excluding `me`.
    pub fn peer(&mut self, me: WorkerId, workers: usize) -> WorkerId {
        debug_assert!(workers > 1);
        let r = self.rng.random_range(0..workers - 1);
        if r >= me {
            r + 1
        } else {
            r
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}
