//! Deterministic vector algebra and reproducible randomness streams.
//!
//! Everything downstream (objectives, the round engine, the baselines) relies
//! on two guarantees from this module:
//!
//! * vector reductions run in a fixed order (ascending index), so repeated
//!   runs are bit-identical regardless of thread scheduling;
//! * random draws come from streams keyed by `(seed, round, client, purpose)`,
//!   so every task derives its own generator instead of sharing one.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Flat model parameter vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Builds a vector, rejecting NaN/Inf entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite entry in ParamVector".into()));
        }
        Ok(ParamVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    fn check_dim(&self, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    /// `self += alpha * x`, ascending index order.
    pub fn add_scaled(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        self.check_dim(x)?;
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += alpha * v;
        }
        Ok(())
    }

    /// `self[i] += plus[i] - minus[i]`, the fused update used by the
    /// variance-reduced recursion. A single expression per coordinate keeps
    /// the rounding pattern fixed.
    pub fn add_diff(&mut self, plus: &ParamVector, minus: &ParamVector) -> Result<()> {
        self.check_dim(plus)?;
        self.check_dim(minus)?;
        for i in 0..self.values.len() {
            self.values[i] += plus.values[i] - minus.values[i];
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// Returns `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_dim(other)?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Vec<f64> {
        v.values
    }
}

/// Returns `alpha * x + y`; inputs are untouched.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: y.dim(),
        });
    }
    Ok(ParamVector {
        values: x
            .values
            .iter()
            .zip(&y.values)
            .map(|(xi, yi)| alpha * xi + yi)
            .collect(),
    })
}

/// Squared Euclidean norm, summed in ascending index order.
pub fn l2_norm_sq(x: &ParamVector) -> f64 {
    x.values.iter().map(|v| v * v).sum()
}

/// What a random stream is consumed for. Streams with different purposes are
/// statistically independent even at equal `(seed, round, client)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    ClientSelection,
    GroupClassification,
    BatchSampling,
    DataGeneration,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::ClientSelection => 1,
            StreamPurpose::GroupClassification => 2,
            StreamPurpose::BatchSampling => 3,
            StreamPurpose::DataGeneration => 4,
        }
    }
}

/// Stream owner: the server or a specific client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamOwner {
    Server,
    Client(u64),
}

impl StreamOwner {
    fn tag(self) -> u64 {
        match self {
            StreamOwner::Server => u64::MAX,
            StreamOwner::Client(id) => id,
        }
    }
}

/// SplitMix64 finalizer; a 64-bit avalanche bijection.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// A reproducible random stream derived from `(seed, round, client, purpose)`.
///
/// The key tuple is absorbed field by field through the SplitMix64 avalanche
/// into a 256-bit ChaCha8 key, so the stream depends only on the tuple and
/// never on scheduling or call order elsewhere in the program.
pub struct RngStream {
    rng: ChaCha8Rng,
}

/// Derives the stream for a key tuple. Equal tuples yield equal draw
/// sequences; tuples differing in any field yield independent sequences.
pub fn stream(seed: u64, round: u64, owner: StreamOwner, purpose: StreamPurpose) -> RngStream {
    let mut h = mix(seed ^ GOLDEN);
    h = mix(h ^ mix(round.wrapping_add(GOLDEN)));
    h = mix(h ^ mix(owner.tag().wrapping_add(GOLDEN.wrapping_mul(2))));
    h = mix(h ^ mix(purpose.tag().wrapping_add(GOLDEN.wrapping_mul(3))));

    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        let word = mix(h.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN)));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    RngStream {
        rng: <ChaCha8Rng as rand::SeedableRng>::from_seed(key),
    }
}

impl rand::RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        rand::RngCore::next_u32(&mut self.rng)
    }

    fn next_u64(&mut self) -> u64 {
        rand::RngCore::next_u64(&mut self.rng)
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        rand::RngCore::fill_bytes(&mut self.rng, dest)
    }
}
