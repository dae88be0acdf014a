//! Fixed-width vector clocks.
//!
//! Clock width equals the number of threads in the trace; slot order is the
//! dense thread index (first-appearance order, see [`crate::trace::Trace`]).
//! A thread's clock starts as all zeros with its own slot set to 1.

use serde::Serialize;

/// Dense thread index, assigned in first-appearance order.
pub type ThreadIdx = u32;

/// A vector timestamp over a fixed set of threads.
#[derive(Clone, PartialEq, Eq, Hash, Serialize)]
pub struct VClock(Vec<u32>);

impl VClock {
    /// The all-zero clock (identity of `join`).
    pub fn bottom(width: usize) -> Self {
        VClock(vec![0; width])
    }

    /// Initial clock of thread `t`: zeros with slot `t` set to 1.
    pub fn initial(width: usize, t: ThreadIdx) -> Self {
        let mut v = vec![0; width];
        v[t as usize] = 1;
        VClock(v)
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, t: ThreadIdx) -> u32 {
        self.0[t as usize]
    }

    /// Pointwise maximum. Returns true if `self` changed.
    pub fn join(&mut self, other: &VClock) -> bool {
        debug_assert_eq!(self.0.len(), other.0.len());
        let mut changed = false;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if *b > *a {
                *a = *b;
                changed = true;
            }
        }
        changed
    }

    /// Advance slot `t` by one.
    pub fn inc(&mut self, t: ThreadIdx) {
        self.0[t as usize] += 1;
    }

    /// Pointwise less-or-equal.
    pub fn le(&self, other: &VClock) -> bool {
        debug_assert_eq!(self.0.len(), other.0.len());
        self.0.iter().zip(&other.0).all(|(a, b)| a <= b)
    }

    /// Strict product order: `self <= other` pointwise and not equal.
    pub fn less(&self, other: &VClock) -> bool {
        self.le(other) && self.0 != other.0
    }

    /// Neither clock is strictly below the other.
    pub fn concurrent(&self, other: &VClock) -> bool {
        !self.less(other) && !other.less(self)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

impl std::fmt::Debug for VClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, "]")
    }
}

impl std::fmt::Display for VClock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

impl From<Vec<u32>> for VClock {
    fn from(v: Vec<u32>) -> Self {
        VClock(v)
    }
}
