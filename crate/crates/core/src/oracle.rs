//! Exact inference for the semi-Markov backbone on small problems.
//!
//! Because each segment's emissions depend only on `(start, length, state)`,
//! all segment scores fit in a `T × M × K` table and the evidence is a
//! forward recursion over segment boundaries. The brute-force enumerator
//! scores every countdown-valid path with the generative model directly and
//! exists to validate the recursion.

use crate::error::{Result, SsnnError};
use crate::generative::{one_hot, GenerativeParams, LatentPath, Sequence};
use crate::numerics::{log_sum_exp, Tape};

/// Largest `K·M·T` the dynamic programmes accept.
pub const DP_GUARD: usize = 10_000_000;
/// Largest number of paths the enumerator accepts.
pub const ENUMERATION_GUARD: u128 = 1_000_000;

fn check_guard(params: &GenerativeParams, x: &Sequence) -> Result<()> {
    let d = params.dims();
    if x.dim() != d.obs_dim {
        return Err(SsnnError::Dimension(format!(
            "sequence {} has m = {}, model expects {}",
            x.id,
            x.dim(),
            d.obs_dim
        )));
    }
    let size = d.states.saturating_mul(d.max_dur).saturating_mul(x.len());
    if size > DP_GUARD {
        return Err(SsnnError::Resource(format!(
            "K·M·T = {size} exceeds the exact-inference guard {DP_GUARD}"
        )));
    }
    Ok(())
}

/// Computes the segment scores that start at one position, reusing a bound tape.
struct RowScorer<'a> {
    params: &'a GenerativeParams,
    x: &'a Sequence,
    tape: Tape,
    mixed: Vec<crate::generative::SegmentWeights>,
    mark: usize,
}

impl<'a> RowScorer<'a> {
    fn new(params: &'a GenerativeParams, x: &'a Sequence) -> Self {
        let k = params.dims().states;
        let mut tape = Tape::new();
        let gv = params.bind(&mut tape);
        let mixed = (0..k)
            .map(|state| {
                let w = tape.constant(one_hot(k, state));
                gv.mix(&mut tape, w)
            })
            .collect();
        let mark = tape.len();
        RowScorer {
            params,
            x,
            tape,
            mixed,
            mark,
        }
    }

    /// `row[(d − 1)·K + k]`: emissions of the segment at `start` with
    /// duration `d` in state `k`, cut at `T`.
    fn row(&mut self, start: usize) -> Vec<f64> {
        let dims = self.params.dims();
        let (k, m_dur) = (dims.states, dims.max_dur);
        let avail = (self.x.len() - start).min(m_dur);
        let mut out = vec![0.0; m_dur * k];
        for state in 0..k {
            let terms = crate::generative::segment_emissions(
                &mut self.tape,
                &self.mixed[state],
                self.x,
                start,
                avail,
            );
            // left-to-right prefix sums, the same order `add_n` uses
            let mut acc = 0.0;
            for d in 1..=m_dur {
                if d <= avail {
                    let e = self.tape.scalar(terms[d - 1]);
                    acc = if d == 1 { e } else { acc + e };
                }
                out[(d - 1) * k + state] = acc;
            }
            self.tape.truncate(self.mark);
        }
        out
    }
}

/// Emission scores of every candidate segment.
#[derive(Clone, Debug)]
pub struct SegmentScoreTable {
    steps: usize,
    max_dur: usize,
    states: usize,
    scores: Vec<f64>,
}

impl SegmentScoreTable {
    pub fn build(params: &GenerativeParams, x: &Sequence) -> Result<Self> {
        check_guard(params, x)?;
        let dims = params.dims();
        let mut scorer = RowScorer::new(params, x);
        let mut scores = Vec::with_capacity(x.len() * dims.max_dur * dims.states);
        for t in 0..x.len() {
            scores.extend(scorer.row(t));
        }
        Ok(SegmentScoreTable {
            steps: x.len(),
            max_dur: dims.max_dur,
            states: dims.states,
            scores,
        })
    }

    /// Score of the segment starting at `start` (0-based) with duration
    /// `dur` (1-based) in `state`; durations past `T` share the cut score.
    pub fn get(&self, start: usize, dur: usize, state: usize) -> f64 {
        self.scores[(start * self.max_dur + dur - 1) * self.states + state]
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Source of segment-score rows: precomputed or recomputed on demand.
enum Rows<'a> {
    Table(&'a SegmentScoreTable),
    Streaming(RowScorer<'a>),
}

impl Rows<'_> {
    fn row(&mut self, start: usize) -> Vec<f64> {
        match self {
            Rows::Table(t) => {
                let n = t.max_dur * t.states;
                t.scores[start * n..(start + 1) * n].to_vec()
            }
            Rows::Streaming(s) => s.row(start),
        }
    }
}

/// `log p_θ(x)` summed over all segmentations.
pub fn exact_log_likelihood(x: &Sequence, params: &GenerativeParams) -> Result<f64> {
    let table = SegmentScoreTable::build(params, x)?;
    Ok(forward(params, x.len(), Rows::Table(&table)))
}

/// Same value as [`exact_log_likelihood`] with `O(M·K)` score memory.
pub fn exact_log_likelihood_streaming(x: &Sequence, params: &GenerativeParams) -> Result<f64> {
    check_guard(params, x)?;
    Ok(forward(params, x.len(), Rows::Streaming(RowScorer::new(params, x))))
}

/// Evidence from a precomputed table.
pub fn log_likelihood_from_table(params: &GenerativeParams, table: &SegmentScoreTable) -> f64 {
    forward(params, table.steps, Rows::Table(table))
}

fn forward(params: &GenerativeParams, steps: usize, mut rows: Rows<'_>) -> f64 {
    let dims = params.dims();
    let (k, m_dur) = (dims.states, dims.max_dur);
    let (li, lt, ld) = (params.log_init(), params.log_trans(), params.log_dur());
    // ending[e][k]: terms whose last segment ends at e in state k
    let mut ending: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); k]; steps];
    let mut finals = Vec::new();
    for s in 0..steps {
        let start: Vec<f64> = if s == 0 {
            li.clone()
        } else {
            let alpha: Vec<f64> = ending[s - 1].iter().map(|v| log_sum_exp(v)).collect();
            (0..k)
                .map(|to| {
                    let terms: Vec<f64> = (0..k).map(|from| alpha[from] + lt[from * k + to]).collect();
                    log_sum_exp(&terms)
                })
                .collect()
        };
        if start.iter().all(|v| *v == f64::NEG_INFINITY) {
            continue;
        }
        let row = rows.row(s);
        for state in 0..k {
            for d in 1..=m_dur {
                let v = start[state] + ld[state * m_dur + d - 1] + row[(d - 1) * k + state];
                if s + d >= steps {
                    finals.push(v);
                } else {
                    ending[s + d - 1][state].push(v);
                }
            }
        }
    }
    log_sum_exp(&finals)
}

/// Most probable `(z, d)` path and its joint log-probability.
pub fn map_segmentation_scored(x: &Sequence, params: &GenerativeParams) -> Result<(LatentPath, f64)> {
    let table = SegmentScoreTable::build(params, x)?;
    Ok(viterbi(params, &table))
}

/// Most probable `(z, d)` path. Ties go to the smaller state, then the
/// shorter duration.
pub fn map_segmentation(x: &Sequence, params: &GenerativeParams) -> Result<LatentPath> {
    Ok(map_segmentation_scored(x, params)?.0)
}

fn viterbi(params: &GenerativeParams, table: &SegmentScoreTable) -> (LatentPath, f64) {
    let dims = params.dims();
    let (k, m_dur, steps) = (dims.states, dims.max_dur, table.steps);
    let (li, lt, ld) = (params.log_init(), params.log_trans(), params.log_dur());
    let neg = f64::NEG_INFINITY;
    // best score ending at e in state k, with the duration used
    let mut end_best = vec![vec![(neg, 0usize); k]; steps];
    // best predecessor state for a segment starting at s in state k
    let mut start_prev = vec![vec![0usize; k]; steps];
    let mut best_final = (neg, 0usize, 0usize, 0usize); // score, start, state, dur
    for s in 0..steps {
        let start: Vec<f64> = if s == 0 {
            li.clone()
        } else {
            (0..k)
                .map(|to| {
                    let mut best = (neg, 0);
                    for from in 0..k {
                        let v = end_best[s - 1][from].0 + lt[from * k + to];
                        if v > best.0 {
                            best = (v, from);
                        }
                    }
                    start_prev[s][to] = best.1;
                    best.0
                })
                .collect()
        };
        for state in 0..k {
            if start[state] == neg {
                continue;
            }
            for d in 1..=m_dur {
                let v = start[state] + ld[state * m_dur + d - 1] + table.get(s, d, state);
                if s + d >= steps {
                    let better = v > best_final.0
                        || (v == best_final.0 && (state, d) < (best_final.2, best_final.3));
                    if better {
                        best_final = (v, s, state, d);
                    }
                } else {
                    let slot = &mut end_best[s + d - 1][state];
                    if v > slot.0 {
                        *slot = (v, d);
                    }
                }
            }
        }
    }
    let (score, mut s, mut state, mut d) = best_final;
    let mut segments = vec![(state, d)];
    while s > 0 {
        let prev_state = start_prev[s][state];
        let e = s - 1;
        let prev_dur = end_best[e][prev_state].1;
        state = prev_state;
        d = prev_dur;
        s = e + 1 - d;
        segments.push((state, d));
    }
    segments.reverse();
    (LatentPath::from_segments(&segments, steps), score)
}

/// Number of countdown-valid paths of length `steps`, saturating.
pub fn count_paths(steps: usize, states: usize, max_dur: usize) -> u128 {
    // ways[r]: completions from a boundary with r steps left
    let mut ways = vec![0u128; steps + 1];
    for r in 1..=steps {
        let mut total: u128 = 0;
        for d in 1..=max_dur {
            let add = if d >= r { 1 } else { ways[r - d] };
            total = total.saturating_add(add);
        }
        ways[r] = total.saturating_mul(states as u128);
    }
    ways[steps]
}

/// Every countdown-valid path of length `steps`, in lexicographic order of
/// their `(state, duration)` segment lists.
pub fn enumerate_paths(steps: usize, states: usize, max_dur: usize) -> Result<Vec<LatentPath>> {
    let n = count_paths(steps, states, max_dur);
    if n > ENUMERATION_GUARD {
        return Err(SsnnError::Resource(format!(
            "{n} paths exceed the enumeration guard {ENUMERATION_GUARD}"
        )));
    }
    let mut out = Vec::with_capacity(n as usize);
    let mut segs = Vec::new();
    fn rec(
        covered: usize,
        steps: usize,
        states: usize,
        max_dur: usize,
        segs: &mut Vec<(usize, usize)>,
        out: &mut Vec<LatentPath>,
    ) {
        for z in 0..states {
            for d in 1..=max_dur {
                segs.push((z, d));
                if covered + d >= steps {
                    out.push(LatentPath::from_segments(segs, steps));
                } else {
                    rec(covered + d, steps, states, max_dur, segs, out);
                }
                segs.pop();
            }
        }
    }
    if steps > 0 {
        rec(0, steps, states, max_dur, &mut segs, &mut out);
    }
    Ok(out)
}

/// `log Σ_paths exp(joint_log_prob)` by explicit enumeration.
pub fn brute_force_log_likelihood(x: &Sequence, params: &GenerativeParams) -> Result<f64> {
    let dims = params.dims();
    let paths = enumerate_paths(x.len(), dims.states, dims.max_dur)?;
    let scores = paths
        .iter()
        .map(|p| params.joint_log_prob(x, p))
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generative::GenDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut ChaCha8Rng, k: usize, m_dur: usize, steps: usize) -> (GenerativeParams, Sequence) {
        let dims = GenDims {
            states: k,
            max_dur: m_dur,
            obs_dim: 2,
            hidden: 3,
        };
        let p = GenerativeParams::random(dims, rng).unwrap();
        let data = (0..steps * 2).map(|_| rng.random_range(-1.5..1.5)).collect();
        (p, Sequence::new("x", steps, 2, data).unwrap())
    }

    #[test]
    fn path_counts_match_enumeration() {
        for (t, k, m) in [(1, 1, 1), (3, 2, 2), (6, 3, 3), (5, 2, 4)] {
            assert_eq!(count_paths(t, k, m) as usize, enumerate_paths(t, k, m).unwrap().len());
        }
        assert_eq!(count_paths(6, 3, 3), 8001);
    }

    #[test]
    fn enumerated_paths_are_valid_and_distinct() {
        let paths = enumerate_paths(5, 2, 3).unwrap();
        let set: std::collections::HashSet<_> = paths.iter().cloned().collect();
        assert_eq!(set.len(), paths.len());
        assert!(paths.iter().all(|p| p.is_valid(2, 3)));
    }

    #[test]
    fn degenerate_model_has_one_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, x) = random_instance(&mut rng, 1, 1, 5);
        let path = LatentPath {
            z: vec![0; 5],
            d: vec![1; 5],
        };
        let joint = p.joint_log_prob(&x, &path).unwrap();
        assert!((exact_log_likelihood(&x, &p).unwrap() - joint).abs() < 1e-12);
        assert!((brute_force_log_likelihood(&x, &p).unwrap() - joint).abs() < 1e-12);
        assert_eq!(map_segmentation(&x, &p).unwrap(), path);
    }

    #[test]
    fn single_step_sums_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, x) = random_instance(&mut rng, 3, 2, 1);
        let (li, ld) = (p.log_init(), p.log_dur());
        let mut terms = Vec::new();
        for k in 0..3 {
            let mut w = vec![0.0; 3];
            w[k] = 1.0;
            let e = p.segment_log_prob(&x, 0, 1, &w).unwrap();
            for j in 0..2 {
                terms.push(li[k] + ld[k * 2 + j] + e);
            }
        }
        let expected = log_sum_exp(&terms);
        assert!((brute_force_log_likelihood(&x, &p).unwrap() - expected).abs() < 1e-12);
        assert!((exact_log_likelihood(&x, &p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn table_agrees_with_segment_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, x) = random_instance(&mut rng, 2, 3, 5);
        let table = SegmentScoreTable::build(&p, &x).unwrap();
        for s in 0..5 {
            for d in 1..=3 {
                for k in 0..2 {
                    let mut w = vec![0.0; 2];
                    w[k] = 1.0;
                    let len = d.min(5 - s);
                    let direct = p.segment_log_prob(&x, s, len, &w).unwrap();
                    assert_eq!(table.get(s, d, k), direct);
                }
            }
        }
    }

    #[test]
    fn dp_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let k = rng.random_range(1..=3);
            let m = rng.random_range(1..=3);
            let t = rng.random_range(1..=6);
            let (p, x) = random_instance(&mut rng, k, m, t);
            let dp = exact_log_likelihood(&x, &p).unwrap();
            let bf = brute_force_log_likelihood(&x, &p).unwrap();
            assert!((dp - bf).abs() / bf.abs().max(1.0) < 1e-10, "{dp} vs {bf}");
            let st = exact_log_likelihood_streaming(&x, &p).unwrap();
            assert_eq!(dp, st);
        }
    }

    #[test]
    fn map_matches_enumerated_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..15 {
            let (p, x) = random_instance(&mut rng, 3, 3, 6);
            let (path, score) = map_segmentation_scored(&x, &p).unwrap();
            assert!(path.is_valid(3, 3));
            let best = enumerate_paths(6, 3, 3)
                .unwrap()
                .iter()
                .map(|q| p.joint_log_prob(&x, q).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((score - best).abs() < 1e-10);
            assert!((p.joint_log_prob(&x, &path).unwrap() - best).abs() < 1e-10);
        }
    }

    #[test]
    fn emission_shift_adds_t_times_c() {
        // with zero weights and x = μ = 0, lowering log σ² by 2c adds c per step
        let dims = GenDims {
            states: 2,
            max_dur: 2,
            obs_dim: 1,
            hidden: 1,
        };
        let p = GenerativeParams::zeros(dims).unwrap();
        let x = Sequence::new("x", 4, 1, vec![0.0; 4]).unwrap();
        let base = exact_log_likelihood(&x, &p).unwrap();
        let mut q = p.clone();
        let c = 0.37;
        q.set_tensor("b_sigma", crate::numerics::Tensor::matrix(2, 1, vec![-2.0 * c; 2]))
            .unwrap();
        let shifted = exact_log_likelihood(&x, &q).unwrap();
        assert!((shifted - base - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn guards_are_enforced() {
        assert!(enumerate_paths(30, 3, 3).is_err());
        let dims = GenDims {
            states: 100,
            max_dur: 100,
            obs_dim: 1,
            hidden: 1,
        };
        let p = GenerativeParams::zeros(dims).unwrap();
        let x = Sequence::new("x", 1001, 1, vec![0.0; 1001]).unwrap();
        assert!(matches!(exact_log_likelihood(&x, &p), Err(SsnnError::Resource(_))));
    }
}
