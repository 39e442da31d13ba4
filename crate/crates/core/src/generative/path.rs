use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::numerics::Tensor;

/// Observed series `x_{1:T}` stored as a `[T, m]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    x: Tensor,
    pub truth: Option<LatentPath>,
}

impl Sequence {
    pub fn new(id: impl Into<String>, steps: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if steps == 0 || dim == 0 {
            return Err(SsnnError::contract(format!(
                "sequence needs T >= 1 and m >= 1, got T = {steps}, m = {dim}"
            )));
        }
        let x = Tensor::new(vec![steps, dim], data)?;
        Ok(Sequence {
            id: id.into(),
            x,
            truth: None,
        })
    }

    pub fn from_rows(id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(SsnnError::Schema("rows of unequal width".into()));
        }
        Sequence::new(id, rows.len(), dim, rows.concat())
    }

    pub fn with_truth(mut self, truth: LatentPath) -> Result<Self> {
        if truth.len() != self.len() {
            return Err(SsnnError::contract(format!(
                "truth path has length {}, sequence has {}",
                truth.len(),
                self.len()
            )));
        }
        self.truth = Some(truth);
        Ok(self)
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Observation dimension `m`.
    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.x.slice(t)
    }

    pub fn values(&self) -> &[f64] {
        self.x.data()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.x.data_mut()
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.x.data().chunks_exact(self.dim())
    }

    /// Steps `start..start + len` as a new sequence (truth sliced along).
    pub fn window(&self, id: impl Into<String>, start: usize, len: usize) -> Sequence {
        let m = self.dim();
        let data = self.x.data()[start * m..(start + len) * m].to_vec();
        let x = Tensor::new(vec![len, m], data).expect("window of a valid sequence");
        let truth = self.truth.as_ref().map(|p| LatentPath {
            z: p.z[start..start + len].to_vec(),
            d: p.d[start..start + len].to_vec(),
        });
        Sequence {
            id: id.into(),
            x,
            truth,
        }
    }

    /// Reversed in time; truth is dropped since countdowns do not reverse.
    pub fn reversed(&self) -> Sequence {
        let rows: Vec<Vec<f64>> = self.rows().rev().map(<[f64]>::to_vec).collect();
        let mut s = Sequence::from_rows(self.id.clone(), &rows).expect("valid sequence");
        s.truth = None;
        s
    }
}

/// Hard latent path with countdown semantics.
///
/// States are zero-based (`0..K`); durations are counts in `1..=M`. At a
/// segment start `d` is the drawn duration; it then decrements each step.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentPath {
    pub z: Vec<usize>,
    pub d: Vec<usize>,
}

/// One maximal run of a [`LatentPath`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub start: usize,
    /// Emitted steps; shorter than `dur` only for a segment cut by `T`.
    pub len: usize,
    pub state: usize,
    pub dur: usize,
}

impl SegmentSpan {
    pub fn pair_index(&self, max_dur: usize) -> usize {
        self.state * max_dur + self.dur - 1
    }
}

impl LatentPath {
    /// Lays out `(state, duration)` segments and cuts the result at `steps`.
    pub fn from_segments(segments: &[(usize, usize)], steps: usize) -> LatentPath {
        let mut z = Vec::with_capacity(steps);
        let mut d = Vec::with_capacity(steps);
        'outer: for &(state, dur) in segments {
            for r in 0..dur {
                if z.len() == steps {
                    break 'outer;
                }
                z.push(state);
                d.push(dur - r);
            }
        }
        LatentPath { z, d }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// True when ranges hold and every non-boundary step copies and decrements.
    pub fn is_valid(&self, states: usize, max_dur: usize) -> bool {
        if self.z.len() != self.d.len() || self.z.is_empty() {
            return false;
        }
        if self
            .z
            .iter()
            .zip(&self.d)
            .any(|(&z, &d)| z >= states || d == 0 || d > max_dur)
        {
            return false;
        }
        (1..self.z.len()).all(|t| {
            self.d[t - 1] == 1 || (self.z[t] == self.z[t - 1] && self.d[t] == self.d[t - 1] - 1)
        })
    }

    /// Whether step `t` starts a new segment.
    pub fn is_boundary(&self, t: usize) -> bool {
        t == 0 || self.d[t - 1] == 1
    }

    /// Segments of a valid path.
    pub fn segments(&self) -> Vec<SegmentSpan> {
        let n = self.len();
        let mut out = Vec::new();
        let mut t = 0;
        while t < n {
            let dur = self.d[t];
            let len = dur.min(n - t);
            out.push(SegmentSpan {
                start: t,
                len,
                state: self.z[t],
                dur,
            });
            t += len;
        }
        out
    }
}
