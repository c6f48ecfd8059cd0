//! Model states, hyperparameters and the binary state encoding.
//!
//! A [`ModelState`] holds `k` prototype vectors of dimension `n`, stored
//! flattened in row-major order. The same shape doubles as an update vector
//! (see [`UpdateVector`]), so merging and applying steps is plain slice
//! arithmetic.
//!
//! Wire layout of an encoded state (all little-endian):
//!
//! ```text
//! u64 k | u64 n | f64 * (k*n)
//! ```

use crate::error::{Error, Result};

/// Index of a worker (0-based).
pub type WorkerId = usize;

/// Header length of the encoded state: two `u64` values.
pub const STATE_HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    k: usize,
    n: usize,
    data: Vec<f64>,
}

/// Update vectors share the shape and storage of a model state.
pub type UpdateVector = ModelState;

impl ModelState {
    pub fn new(k: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k", "must be >= 1"));
        }
        if n == 0 {
            return Err(Error::invalid("n", "must be >= 1"));
        }
        if data.len() != k * n {
            return Err(Error::dim(k * n, data.len()));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { k, n, data })
    }

    /// All-zero state.
    ///
    /// # Panics
    /// If `k` or `n` is zero.
    pub fn zeros(k: usize, n: usize) -> Self {
        assert!(k > 0 && n > 0, "state shape must be non-empty");
        Self {
            k,
            n,
            data: vec![0.0; k * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(k * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::dim(n, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(k, n, data)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.k, self.n)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flattened components.
    ///
    /// Callers are responsible for keeping every component finite;
    /// [`ModelState::check_finite`] re-validates after bulk updates.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.n)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn ensure_same_shape(&self, other: &ModelState) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Squared Euclidean distance over all `k*n` components.
    pub fn distance_sq(&self, other: &ModelState) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(sq_dist(&self.data, &other.data))
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ModelState) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Byte length of the encoding of a `k x n` state.
    pub fn encoded_len_for(k: usize, n: usize) -> usize {
        STATE_HEADER_BYTES + 8 * k * n
    }

    pub fn encoded_len(&self) -> usize {
        Self::encoded_len_for(self.k, self.n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "state encoding",
            reason,
        };
        if bytes.len() < STATE_HEADER_BYTES {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let k = read_u64(&bytes[0..8]) as usize;
        let n = read_u64(&bytes[8..16]) as usize;
        let expected = k
            .checked_mul(n)
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(STATE_HEADER_BYTES))
            .ok_or_else(|| bad(format!("shape {k}x{n} overflows")))?;
        if bytes.len() != expected {
            return Err(bad(format!(
                "shape {k}x{n} needs {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let data = bytes[STATE_HEADER_BYTES..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(k, n, data)
    }
}

fn read_u64(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
}

/// Squared Euclidean distance of two equally long slices.
#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Free-function form of [`ModelState::distance_sq`].
pub fn distance_sq(a: &ModelState, b: &ModelState) -> Result<f64> {
    a.distance_sq(b)
}

pub fn serialize_state(s: &ModelState) -> Vec<u8> {
    s.to_bytes()
}

pub fn deserialize_state(bytes: &[u8]) -> Result<ModelState> {
    ModelState::from_bytes(bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Gradient step size.
    pub epsilon: f64,
    /// Mini-batch size.
    pub b: usize,
    /// Mini-batch steps per worker.
    pub iterations: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            b: 500,
            iterations: 100,
            workers: 1,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", format!("{} is not > 0", self.epsilon)));
        }
        if self.b == 0 {
            return Err(Error::invalid("b", "must be >= 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers", "must be >= 1"));
        }
        Ok(())
    }
}

/// A state written into a peer's receive slot.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub state: ModelState,
    pub sender: WorkerId,
    /// The sender's local iteration when the state was produced.
    pub sender_iteration: u64,
}

impl UpdateMessage {
    pub fn size_bytes(&self) -> usize {
        self.state.encoded_len()
    }
}

/// Virtual-time cost of arithmetic, used to convert work into simulated seconds.
///
/// One "flop" here is one multiply-add on a model component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub seconds_per_flop: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            seconds_per_flop: 1e-9,
        }
    }
}

impl CostModel {
    /// Nearest-center search plus accumulation for `samples` points.
    pub fn gradient(&self, samples: usize, k: usize, n: usize) -> f64 {
        self.seconds_per_flop * (samples * (k * n + n)) as f64
    }

    /// Cost of `passes` sweeps over a `k x n` state.
    pub fn state_passes(&self, passes: usize, k: usize, n: usize) -> f64 {
        self.seconds_per_flop * (passes * k * n) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(k: usize, n: usize, v: &[f64]) -> ModelState {
        ModelState::new(k, n, v.to_vec()).unwrap()
    }

    #[test]
    fn distance_of_identical_states_is_zero() {
        let a = st(2, 3, &[1.0, -2.0, 3.5, 0.0, 7.0, -1.0]);
        assert_eq!(a.distance_sq(&a).unwrap(), 0.0);
    }

    #[test]
    fn distance_three_four_five() {
        let a = st(1, 2, &[0.0, 0.0]);
        let b = st(1, 2, &[3.0, 4.0]);
        assert_eq!(distance_sq(&a, &b).unwrap(), 25.0);
    }

    #[test]
    fn distance_matches_scalar_loop() {
        let a = st(3, 2, &[0.3, -1.2, 4.4, 0.25, -3.0, 2.0]);
        let b = st(3, 2, &[1.1, 0.7, -0.4, 0.5, 2.5, -6.0]);
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..2 {
                let d = a.row(i)[j] - b.row(i)[j];
                oracle += d * d;
            }
        }
        assert!((a.distance_sq(&b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn distance_rejects_shape_mismatch() {
        let a = ModelState::zeros(2, 3);
        let b = ModelState::zeros(3, 2);
        assert!(matches!(a.distance_sq(&b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rejects_non_finite_components() {
        assert!(matches!(
            ModelState::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(ModelState::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn single_zero_encodes_to_24_bytes() {
        let bytes = serialize_state(&ModelState::zeros(1, 1));
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[0..8], &1u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..], &[0u8; 8]);
    }

    #[test]
    fn large_state_encoded_size() {
        assert_eq!(ModelState::zeros(100, 100).encoded_len(), 80_016);
        assert_eq!(serialize_state(&ModelState::zeros(100, 100)).len(), 80_016);
    }

    #[test]
    fn decode_rejects_truncated_input() {
        let mut bytes = serialize_state(&ModelState::zeros(2, 2));
        bytes.pop();
        assert!(matches!(deserialize_state(&bytes), Err(Error::Format { .. })));
        assert!(deserialize_state(&[0u8; 5]).is_err());
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            b: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn arb_state() -> impl Strategy<Value = ModelState> {
        (1usize..5, 1usize..5).prop_flat_map(|(k, n)| {
            prop::collection::vec(-1e6f64..1e6, k * n)
                .prop_map(move |v| ModelState::new(k, n, v).unwrap())
        })
    }

    fn arb_pair() -> impl Strategy<Value = (ModelState, ModelState)> {
        (1usize..5, 1usize..5).prop_flat_map(|(k, n)| {
            (
                prop::collection::vec(-1e3f64..1e3, k * n),
                prop::collection::vec(-1e3f64..1e3, k * n),
            )
                .prop_map(move |(a, b)| {
                    (ModelState::new(k, n, a).unwrap(), ModelState::new(k, n, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn encoding_round_trips(s in arb_state()) {
            let bytes = serialize_state(&s);
            prop_assert_eq!(bytes.len(), 16 + 8 * s.k() * s.n());
            prop_assert_eq!(deserialize_state(&bytes).unwrap(), s);
        }

        #[test]
        fn distance_is_symmetric_and_positive((a, b) in arb_pair()) {
            let ab = a.distance_sq(&b).unwrap();
            prop_assert_eq!(ab, b.distance_sq(&a).unwrap());
            if a != b {
                prop_assert!(ab > 0.0);
            } else {
                prop_assert_eq!(ab, 0.0);
            }
        }
    }
}
