//! Unscrambled and digitally shifted Sobol sequences.
//!
//! Direction numbers are the first rows of the Joe-Kuo `new-joe-kuo-6.21201` table;
//! dimension 1 is the van der Corput sequence in base 2. Points are produced in Gray-code
//! order with 32-bit integers. The all-zero point at index 0 is skipped, so the first
//! point of the unscrambled sequence is 0.5 in every dimension.

use crate::rng::Prng;

const BITS: usize = 32;

/// Largest number of points a generator will emit.
pub const MAX_POINTS: u64 = 1 << 31;

/// (s, a, m_1..m_s) for dimensions 2, 3, ...
const JOE_KUO: [(u32, u32, &[u32]); 9] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
];

/// Highest dimension with tabulated direction numbers.
pub const MAX_DIMS: usize = JOE_KUO.len() + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobolError {
    UnsupportedDimension(usize),
    DimensionOverflow,
}

impl std::fmt::Display for SobolError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SobolError::UnsupportedDimension(d) => {
                write!(f, "Sobol dimension {d} outside 1..={MAX_DIMS}")
            }
            SobolError::DimensionOverflow => {
                write!(f, "Sobol sequence exhausted ({MAX_POINTS} points)")
            }
        }
    }
}

impl std::error::Error for SobolError {}

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1u32 << (BITS - 1 - i);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    let s = s as usize;
    for i in 0..s {
        v[i] = m[i] << (BITS - 1 - i);
    }
    for i in s..BITS {
        let mut x = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                x ^= v[i - k];
            }
        }
        v[i] = x;
    }
    v
}

#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
    shift: Vec<u32>,
    index: u64,
}

impl Sobol {
    pub fn new(dims: usize) -> Result<Self, SobolError> {
        if dims == 0 || dims > MAX_DIMS {
            return Err(SobolError::UnsupportedDimension(dims));
        }
        Ok(Self {
            directions: (0..dims).map(direction_numbers).collect(),
            state: vec![0; dims],
            shift: vec![0; dims],
            index: 0,
        })
    }

    /// Random digital shift: every coordinate is XORed with a seeded 32-bit mask.
    pub fn scrambled(dims: usize, seed: u64) -> Result<Self, SobolError> {
        let mut s = Self::new(dims)?;
        let mut rng = Prng::derived(seed, 0x50B0);
        for m in &mut s.shift {
            *m = rng.next_u32();
        }
        Ok(s)
    }

    pub fn dims(&self) -> usize {
        self.state.len()
    }

    pub fn next_point(&mut self) -> Result<Vec<f64>, SobolError> {
        if self.index + 1 >= MAX_POINTS {
            return Err(SobolError::DimensionOverflow);
        }
        // Gray-code step: flip the direction number at the lowest zero bit of the index.
        let c = (!self.index).trailing_zeros() as usize;
        self.index += 1;
        for (x, v) in self.state.iter_mut().zip(&self.directions) {
            *x ^= v[c];
        }
        Ok(self
            .state
            .iter()
            .zip(&self.shift)
            .map(|(&x, &m)| (x ^ m) as f64 / 4_294_967_296.0)
            .collect())
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<Vec<f64>>, SobolError> {
        if self.index.saturating_add(n as u64) >= MAX_POINTS {
            return Err(SobolError::DimensionOverflow);
        }
        (0..n).map(|_| self.next_point()).collect()
    }
}
