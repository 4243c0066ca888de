//! Checkpoint schedule and storage for the reverse pass.
//!
//! In `Sqrt` mode solver states are kept at iterations `ceil(j * sqrt(K))`,
//! `j = 0..=floor(sqrt(K))` (indices `>= K` dropped). The reverse pass
//! replays one segment at a time from its checkpoint, so peak memory is
//! `O(sqrt(K))` states plus one segment's replay buffer. `Full` mode keeps
//! every state and replays nothing; both modes execute the same arithmetic
//! and therefore yield bit-identical gradients.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CheckpointMode {
    #[default]
    Sqrt,
    Full,
}

impl FromStr for CheckpointMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sqrt" => Ok(Self::Sqrt),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown checkpoint mode '{other}' (expected sqrt|full)")),
        }
    }
}

fn isqrt(n: u128) -> u128 {
    if n < 2 {
        return n;
    }
    let mut x = (n as f64).sqrt() as u128;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// Smallest integer `m` with `m >= sqrt(n)`.
fn ceil_sqrt(n: u128) -> u128 {
    let r = isqrt(n);
    if r * r == n {
        r
    } else {
        r + 1
    }
}

/// Iterations at which states are stored for `iters` total iterations.
/// Computed in exact integer arithmetic: `ceil(j sqrt(K)) = ceil(sqrt(j^2 K))`.
pub fn checkpoint_indices(mode: CheckpointMode, iters: usize) -> Vec<usize> {
    match mode {
        CheckpointMode::Full => (0..iters).collect(),
        CheckpointMode::Sqrt => {
            let k = iters as u128;
            let mut out: Vec<usize> = Vec::new();
            for j in 0..=isqrt(k) {
                let idx = ceil_sqrt(j * j * k) as usize;
                if idx < iters && out.last() != Some(&idx) {
                    out.push(idx);
                }
            }
            out
        }
    }
}

/// Replay segment length `ceil(sqrt(K))`.
pub fn segment_len(iters: usize) -> usize {
    ceil_sqrt(iters as u128) as usize
}

/// Solver states saved by a forward pass.
#[derive(Clone, Debug)]
pub struct CheckpointStore<S> {
    pub(crate) mode: CheckpointMode,
    pub(crate) iters: usize,
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) delta: f64,
    pub(crate) states: Vec<(usize, S)>,
}

impl<S> CheckpointStore<S> {
    pub(crate) fn new(mode: CheckpointMode, iters: usize, width: usize, height: usize, delta: f64) -> Self {
        Self {
            mode,
            iters,
            width,
            height,
            delta,
            states: Vec::new(),
        }
    }

    pub fn mode(&self) -> CheckpointMode {
        self.mode
    }

    pub fn iters(&self) -> usize {
        self.iters
    }

    pub fn segment_len(&self) -> usize {
        segment_len(self.iters)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.states.iter().map(|(k, _)| *k).collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> impl Iterator<Item = &(usize, S)> {
        self.states.iter()
    }

    /// Segments as `(start, end, state_at_start)`, latest first.
    pub(crate) fn segments_rev(&self) -> impl Iterator<Item = (usize, usize, &S)> {
        let iters = self.iters;
        let n = self.states.len();
        (0..n).rev().map(move |i| {
            let end = if i + 1 < n { self.states[i + 1].0 } else { iters };
            (self.states[i].0, end, &self.states[i].1)
        })
    }

    /// Structural consistency against the inputs of a reverse pass.
    pub(crate) fn validate(&self, iters: usize, width: usize, height: usize, delta: f64) -> Result<()> {
        if self.iters != iters {
            return Err(Error::StoreMismatch(format!(
                "store holds {} iterations, config asks for {iters}",
                self.iters
            )));
        }
        if self.width != width || self.height != height {
            return Err(Error::StoreMismatch(format!(
                "store grid {}x{} differs from inputs {width}x{height}",
                self.width, self.height
            )));
        }
        if self.delta.to_bits() != delta.to_bits() {
            return Err(Error::StoreMismatch(format!(
                "store delta {} differs from config delta {delta}",
                self.delta
            )));
        }
        let idx = self.indices();
        if idx != checkpoint_indices(self.mode, iters) {
            return Err(Error::StoreMismatch(format!("unexpected checkpoint indices {idx:?}")));
        }
        Ok(())
    }
}
