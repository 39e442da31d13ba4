//! The generative network `p_θ(x, z, d)`.
//!
//! Latent states follow an explicit-duration semi-Markov chain: a fresh
//! `(z, d)` pair is drawn whenever the previous countdown reaches 1, and is
//! copied/decremented otherwise. Inside a segment the observations are
//! emitted by a state-conditioned tanh recurrence with a diagonal Gaussian
//! head. The recurrence restarts from the learned `h0[z]` at each segment
//! start and sees a zero vector as its first input, so segments are
//! conditionally independent given `(z, d)`.

mod path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use path::{LatentPath, SegmentSpan, Sequence};

use crate::error::{Result, SsnnError};
use crate::numerics::{log_softmax, ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "gen.";

/// Logit offset used to forbid self-transitions.
const FORBIDDEN_LOGIT: f64 = -1.0e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenDims {
    /// `K`
    pub states: usize,
    /// `M`
    pub max_dur: usize,
    /// `m`
    pub obs_dim: usize,
    /// `h`
    pub hidden: usize,
}

impl GenDims {
    pub fn pairs(&self) -> usize {
        self.states * self.max_dur
    }

    fn validate(&self) -> Result<()> {
        if self.states == 0 || self.max_dur == 0 || self.obs_dim == 0 || self.hidden == 0 {
            return Err(SsnnError::contract(format!("all model dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (k, m_dur, m, h) = (self.states, self.max_dur, self.obs_dim, self.hidden);
        vec![
            ("init_logits", vec![k]),
            ("trans_logits", vec![k, k]),
            ("dur_logits", vec![k, m_dur]),
            ("w_x", vec![k, h, m]),
            ("w_h", vec![k, h, h]),
            ("b_h", vec![k, h]),
            ("h0", vec![k, h]),
            ("w_mu", vec![k, m, h]),
            ("b_mu", vec![k, m]),
            ("w_sigma", vec![k, m, h]),
            ("b_sigma", vec![k, m]),
        ]
    }
}

/// All generative parameters θ.
///
/// The three probability tables are stored as unconstrained logits and
/// normalised on read.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeParams {
    dims: GenDims,
    store: ParamStore,
    no_self_transition: bool,
}

fn name(slot: &str) -> String {
    format!("{PREFIX}{slot}")
}

fn probs_to_logits(p: &[f64]) -> Vec<f64> {
    p.iter().map(|&v| v.max(1e-300).ln()).collect()
}

impl GenerativeParams {
    /// Uniform tables and all-zero weights.
    pub fn zeros(dims: GenDims) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        for (slot, shape) in dims.shapes() {
            store.register(&name(slot), Tensor::zeros(&shape))?;
        }
        Ok(GenerativeParams {
            dims,
            store,
            no_self_transition: false,
        })
    }

    /// Randomly initialised parameters.
    ///
    /// Tables are uniform mixed with a Dirichlet(1) draw; weight matrices are
    /// `Normal(0, 1/fan_in)`; emission mean offsets are standard normal so the
    /// states start apart. Other biases start at zero.
    pub fn random<R: Rng + ?Sized>(dims: GenDims, rng: &mut R) -> Result<Self> {
        let mut p = GenerativeParams::zeros(dims)?;
        let (k, m_dur) = (dims.states, dims.max_dur);
        let jitter_row = |rng: &mut R, n: usize| -> Vec<f64> {
            let e: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|v| 0.9 / n as f64 + 0.1 * v / s).collect();
            probs_to_logits(&p)
        };
        let init = jitter_row(rng, k);
        p.store.set(&name("init_logits"), Tensor::vector(init))?;
        let trans: Vec<f64> = (0..k).flat_map(|_| jitter_row(rng, k)).collect();
        p.store.set(&name("trans_logits"), Tensor::matrix(k, k, trans))?;
        let dur: Vec<f64> = (0..k).flat_map(|_| jitter_row(rng, m_dur)).collect();
        p.store.set(&name("dur_logits"), Tensor::matrix(k, m_dur, dur))?;

        let (m, h) = (dims.obs_dim, dims.hidden);
        for (slot, fan_in) in [("w_x", m), ("w_h", h), ("w_mu", h), ("w_sigma", h)] {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            let entries = p.store.entries_mut(&name(slot)).unwrap();
            entries.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        let entries = p.store.entries_mut(&name("b_mu")).unwrap();
        entries.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        Ok(p)
    }

    /// Rebuilds parameters from a store holding (at least) every `gen.*` slot.
    pub fn from_store(dims: GenDims, store: &ParamStore) -> Result<Self> {
        dims.validate()?;
        let mut own = ParamStore::new();
        for (slot, shape) in dims.shapes() {
            let n = name(slot);
            let t = store
                .get(&n)
                .ok_or_else(|| SsnnError::Schema(format!("missing tensor {n}")))?;
            if t.shape() != shape.as_slice() {
                return Err(SsnnError::Dimension(format!(
                    "{n} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            own.register(&n, t.clone())?;
        }
        Ok(GenerativeParams {
            dims,
            store: own,
            no_self_transition: false,
        })
    }

    pub fn dims(&self) -> GenDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn no_self_transition(&self) -> bool {
        self.no_self_transition
    }

    /// Forbids `z_t = z_{t−1}` at segment boundaries.
    pub fn set_no_self_transition(&mut self, on: bool) -> Result<()> {
        if on && self.dims.states < 2 {
            return Err(SsnnError::contract(
                "forbidding self-transitions needs at least two states",
            ));
        }
        self.no_self_transition = on;
        Ok(())
    }

    pub fn tensor(&self, slot: &str) -> &Tensor {
        self.store.expect(&name(slot))
    }

    /// Overwrites one weight slot (shape must match).
    pub fn set_tensor(&mut self, slot: &str, value: Tensor) -> Result<()> {
        self.store.set(&name(slot), value)
    }

    pub fn set_init_probs(&mut self, p: &[f64]) -> Result<()> {
        check_simplex(p, "initial distribution")?;
        self.store.set(&name("init_logits"), Tensor::vector(probs_to_logits(p)))
    }

    /// Row-major `K × K` transition probabilities.
    pub fn set_trans_probs(&mut self, p: &[f64]) -> Result<()> {
        let k = self.dims.states;
        for row in p.chunks(k) {
            check_simplex(row, "transition row")?;
        }
        let t = Tensor::new(vec![k, k], probs_to_logits(p))?;
        self.store.set(&name("trans_logits"), t)
    }

    /// Row-major `K × M` duration probabilities.
    pub fn set_dur_probs(&mut self, p: &[f64]) -> Result<()> {
        let (k, m) = (self.dims.states, self.dims.max_dur);
        for row in p.chunks(m) {
            check_simplex(row, "duration row")?;
        }
        let t = Tensor::new(vec![k, m], probs_to_logits(p))?;
        self.store.set(&name("dur_logits"), t)
    }

    pub fn log_init(&self) -> Vec<f64> {
        log_softmax(self.tensor("init_logits").data())
    }

    /// Row-major `K × K` log transition table.
    pub fn log_trans(&self) -> Vec<f64> {
        let k = self.dims.states;
        let mut logits = self.tensor("trans_logits").data().to_vec();
        if self.no_self_transition {
            for i in 0..k {
                logits[i * k + i] += FORBIDDEN_LOGIT;
            }
        }
        logits.chunks(k).flat_map(log_softmax).collect()
    }

    /// Row-major `K × M` log duration table; column `j` is duration `j + 1`.
    pub fn log_dur(&self) -> Vec<f64> {
        let m = self.dims.max_dur;
        self.tensor("dur_logits")
            .data()
            .chunks(m)
            .flat_map(log_softmax)
            .collect()
    }

    /// Registers θ on `tape` and derives the normalised log tables.
    pub fn bind(&self, tape: &mut Tape) -> GenVars {
        let (k, m_dur) = (self.dims.states, self.dims.max_dur);
        let p = |tape: &mut Tape, slot: &str| tape.param(&name(slot), self.tensor(slot));
        let init = p(tape, "init_logits");
        let log_init = tape.log_softmax(init);
        let mut trans = p(tape, "trans_logits");
        if self.no_self_transition {
            let mut mask = Tensor::zeros(&[k, k]);
            for i in 0..k {
                mask.data_mut()[i * k + i] = FORBIDDEN_LOGIT;
            }
            let mask = tape.constant(mask);
            trans = tape.add(trans, mask);
        }
        let log_trans = tape.log_softmax_rows(trans, k);
        let dur = p(tape, "dur_logits");
        let log_dur = tape.log_softmax_rows(dur, m_dur);
        GenVars {
            dims: self.dims,
            log_init,
            log_trans,
            log_dur,
            w_x: p(tape, "w_x"),
            w_h: p(tape, "w_h"),
            b_h: p(tape, "b_h"),
            h0: p(tape, "h0"),
            w_mu: p(tape, "w_mu"),
            b_mu: p(tape, "b_mu"),
            w_sigma: p(tape, "w_sigma"),
            b_sigma: p(tape, "b_sigma"),
        }
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dims.states {
            return Err(SsnnError::contract(format!(
                "state weights have length {}, K = {}",
                w.len(),
                self.dims.states
            )));
        }
        check_simplex(w, "state weights")
    }

    fn check_obs(&self, x: &Sequence) -> Result<()> {
        if x.dim() != self.dims.obs_dim {
            return Err(SsnnError::Dimension(format!(
                "sequence {} has m = {}, model expects {}",
                x.id,
                x.dim(),
                self.dims.obs_dim
            )));
        }
        Ok(())
    }

    /// Log-probabilities over the `K·M` pairs `(z, d)` (index `z·M + d − 1`)
    /// given the previous pair.
    pub fn transition_log_probs(&self, z_prev: usize, d_prev: usize) -> Result<Vec<f64>> {
        let (k, m_dur) = (self.dims.states, self.dims.max_dur);
        if z_prev >= k || d_prev == 0 || d_prev > m_dur {
            return Err(SsnnError::contract(format!(
                "previous pair ({z_prev}, {d_prev}) outside K = {k}, M = {m_dur}"
            )));
        }
        let mut out = vec![f64::NEG_INFINITY; k * m_dur];
        if d_prev > 1 {
            out[z_prev * m_dur + d_prev - 2] = 0.0;
            return Ok(out);
        }
        let (lt, ld) = (self.log_trans(), self.log_dur());
        for z in 0..k {
            for j in 0..m_dur {
                out[z * m_dur + j] = lt[z_prev * k + z] + ld[z * m_dur + j];
            }
        }
        Ok(out)
    }

    /// One step `h = tanh(W_x x_prev + W_h h_prev + b_h)` under mixed state weights.
    pub fn recurrent_update(&self, h_prev: &[f64], x_prev: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
        self.check_weights(weights)?;
        if h_prev.len() != self.dims.hidden || x_prev.len() != self.dims.obs_dim {
            return Err(SsnnError::contract(format!(
                "recurrent_update got |h| = {}, |x| = {}",
                h_prev.len(),
                x_prev.len()
            )));
        }
        let mut tape = Tape::new();
        let gv = self.bind(&mut tape);
        let w = tape.constant_vec(weights);
        let sw = gv.mix(&mut tape, w);
        let h = tape.constant_vec(h_prev);
        let x = tape.constant_vec(x_prev);
        let out = recurrent_step(&mut tape, &sw, h, Some(x));
        Ok(tape.value(out).data().to_vec())
    }

    /// Gaussian emission log-density of `x_t` given `h_t`.
    pub fn emission_log_prob(&self, x_t: &[f64], h_t: &[f64], weights: &[f64]) -> Result<f64> {
        self.check_weights(weights)?;
        if h_t.len() != self.dims.hidden || x_t.len() != self.dims.obs_dim {
            return Err(SsnnError::contract(format!(
                "emission_log_prob got |h| = {}, |x| = {}",
                h_t.len(),
                x_t.len()
            )));
        }
        let mut tape = Tape::new();
        let gv = self.bind(&mut tape);
        let w = tape.constant_vec(weights);
        let sw = gv.mix(&mut tape, w);
        let h = tape.constant_vec(h_t);
        let e = emission(&mut tape, &sw, h, x_t);
        Ok(tape.scalar(e))
    }

    /// Emission log-probability of the `len` steps starting at `start`.
    pub fn segment_log_prob(&self, x: &Sequence, start: usize, len: usize, weights: &[f64]) -> Result<f64> {
        self.check_weights(weights)?;
        self.check_obs(x)?;
        if len == 0 || start + len > x.len() {
            return Err(SsnnError::contract(format!(
                "segment {start}+{len} outside sequence of length {}",
                x.len()
            )));
        }
        let mut tape = Tape::new();
        let gv = self.bind(&mut tape);
        let w = tape.constant_vec(weights);
        let sw = gv.mix(&mut tape, w);
        let terms = segment_emissions(&mut tape, &sw, x, start, len);
        let total = tape.add_n(&terms);
        Ok(tape.scalar(total))
    }

    /// `log p_θ(x, z, d)`; `−∞` for paths that break the countdown.
    pub fn joint_log_prob(&self, x: &Sequence, path: &LatentPath) -> Result<f64> {
        self.check_obs(x)?;
        if path.len() != x.len() {
            return Err(SsnnError::contract(format!(
                "path length {} differs from sequence length {}",
                path.len(),
                x.len()
            )));
        }
        if !path.is_valid(self.dims.states, self.dims.max_dur) {
            return Ok(f64::NEG_INFINITY);
        }
        let mut tape = Tape::new();
        let gv = self.bind(&mut tape);
        let plan = hard_plan(&mut tape, self.dims, path);
        let total = joint_log_prob_on_tape(&mut tape, &gv, x, &plan);
        Ok(tape.scalar(total))
    }

    /// Ancestral sample of `(x, z, d)` of length `steps`.
    pub fn sample_sequence<R: Rng + ?Sized>(
        &self,
        steps: usize,
        id: impl Into<String>,
        rng: &mut R,
    ) -> Result<(Sequence, LatentPath)> {
        if steps == 0 {
            return Err(SsnnError::contract("cannot sample an empty sequence"));
        }
        let (k, m_dur) = (self.dims.states, self.dims.max_dur);
        let (li, lt, ld) = (self.log_init(), self.log_trans(), self.log_dur());

        let mut segments = Vec::new();
        let mut covered = 0;
        let mut prev: Option<usize> = None;
        while covered < steps {
            let z = match prev {
                None => sample_log_categorical(&li, rng),
                Some(p) => sample_log_categorical(&lt[p * k..(p + 1) * k], rng),
            };
            let d = sample_log_categorical(&ld[z * m_dur..(z + 1) * m_dur], rng) + 1;
            segments.push((z, d));
            covered += d;
            prev = Some(z);
        }
        let path = LatentPath::from_segments(&segments, steps);

        let mut tape = Tape::new();
        let gv = self.bind(&mut tape);
        let m = self.dims.obs_dim;
        let mut data = Vec::with_capacity(steps * m);
        for seg in path.segments() {
            let w = tape.constant(one_hot(k, seg.state));
            let sw = gv.mix(&mut tape, w);
            let mut h = sw.h0;
            let mut x_prev: Option<Var> = None;
            for _ in 0..seg.len {
                h = recurrent_step(&mut tape, &sw, h, x_prev);
                let (mu, logvar) = emission_moments(&mut tape, &sw, h);
                let (mu, lv) = (tape.value(mu).data().to_vec(), tape.value(logvar).data().to_vec());
                let x_t: Vec<f64> = (0..m)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        mu[j] + (0.5 * lv[j]).exp() * z
                    })
                    .collect();
                x_prev = Some(tape.constant_vec(&x_t));
                data.extend(x_t);
            }
        }
        let seq = Sequence::new(id, steps, m, data)?.with_truth(path.clone())?;
        Ok((seq, path))
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(SsnnError::contract(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(SsnnError::contract(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

pub(crate) fn one_hot(n: usize, i: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n]);
    t.data_mut()[i] = 1.0;
    t
}

/// Draws an index from unnormalised log-weights.
pub fn sample_log_categorical<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let probs = crate::numerics::softmax(logp);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// θ registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GenVars {
    pub dims: GenDims,
    pub log_init: Var,
    pub log_trans: Var,
    /// Flattened `K × M`, index `z·M + d − 1`.
    pub log_dur: Var,
    pub w_x: Var,
    pub w_h: Var,
    pub b_h: Var,
    pub h0: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

/// Per-state weight slices mixed by one segment's state weights.
#[derive(Clone, Copy, Debug)]
pub struct SegmentWeights {
    pub w_x: Var,
    pub w_h: Var,
    pub b_h: Var,
    pub h0: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

impl GenVars {
    /// Convex mixture of the per-state weight banks (exact slice for one-hot weights).
    pub fn mix(&self, tape: &mut Tape, state_weights: Var) -> SegmentWeights {
        SegmentWeights {
            w_x: tape.mixture(self.w_x, state_weights),
            w_h: tape.mixture(self.w_h, state_weights),
            b_h: tape.mixture(self.b_h, state_weights),
            h0: tape.mixture(self.h0, state_weights),
            w_mu: tape.mixture(self.w_mu, state_weights),
            b_mu: tape.mixture(self.b_mu, state_weights),
            w_sigma: tape.mixture(self.w_sigma, state_weights),
            b_sigma: tape.mixture(self.b_sigma, state_weights),
        }
    }
}

/// `tanh(W_x x_prev + W_h h + b_h)`; `None` stands for the zero input.
pub fn recurrent_step(tape: &mut Tape, sw: &SegmentWeights, h: Var, x_prev: Option<Var>) -> Var {
    let rec = tape.matvec(sw.w_h, h);
    let mut pre = tape.add(rec, sw.b_h);
    if let Some(x) = x_prev {
        let inp = tape.matvec(sw.w_x, x);
        pre = tape.add(pre, inp);
    }
    tape.tanh(pre)
}

pub fn emission_moments(tape: &mut Tape, sw: &SegmentWeights, h: Var) -> (Var, Var) {
    let mu = tape.matvec(sw.w_mu, h);
    let mu = tape.add(mu, sw.b_mu);
    let lv = tape.matvec(sw.w_sigma, h);
    let lv = tape.add(lv, sw.b_sigma);
    (mu, lv)
}

pub fn emission(tape: &mut Tape, sw: &SegmentWeights, h: Var, x_t: &[f64]) -> Var {
    let (mu, lv) = emission_moments(tape, sw, h);
    tape.gaussian_log_prob(x_t, mu, lv)
}

/// Per-step emission log-probabilities of one segment.
pub fn segment_emissions(
    tape: &mut Tape,
    sw: &SegmentWeights,
    x: &Sequence,
    start: usize,
    len: usize,
) -> Vec<Var> {
    let mut h = sw.h0;
    let mut x_prev = None;
    let mut out = Vec::with_capacity(len);
    for t in start..start + len {
        h = recurrent_step(tape, sw, h, x_prev);
        out.push(emission(tape, sw, h, x.step(t)));
        x_prev = Some(tape.constant_vec(x.step(t)));
    }
    out
}

/// A segment whose state/pair weights live on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PlannedSegment {
    pub start: usize,
    pub len: usize,
    /// Weights over the `K` states.
    pub state_weights: Var,
    /// Weights over the `K·M` pairs.
    pub pair_weights: Var,
}

/// One-hot plan for a hard path.
pub fn hard_plan(tape: &mut Tape, dims: GenDims, path: &LatentPath) -> Vec<PlannedSegment> {
    path.segments()
        .iter()
        .map(|s| PlannedSegment {
            start: s.start,
            len: s.len,
            state_weights: tape.constant(one_hot(dims.states, s.state)),
            pair_weights: tape.constant(one_hot(dims.pairs(), s.pair_index(dims.max_dur))),
        })
        .collect()
}

/// Joint log-probability with every discrete choice entering multilinearly
/// through its weights, so one-hot weights give the exact hard value.
pub fn joint_log_prob_on_tape(
    tape: &mut Tape,
    gv: &GenVars,
    x: &Sequence,
    plan: &[PlannedSegment],
) -> Var {
    let mut terms = Vec::with_capacity(plan.len() * 3);
    let mut prev: Option<Var> = None;
    for seg in plan {
        match prev {
            None => terms.push(tape.dot(seg.state_weights, gv.log_init)),
            Some(p) => {
                let row = tape.matvec(gv.log_trans, seg.state_weights);
                terms.push(tape.dot(p, row));
            }
        }
        terms.push(tape.dot(seg.pair_weights, gv.log_dur));
        let sw = gv.mix(tape, seg.state_weights);
        let em = segment_emissions(tape, &sw, x, seg.start, seg.len);
        terms.push(tape.add_n(&em));
        prev = Some(seg.state_weights);
    }
    tape.add_n(&terms)
}

/// Per-step latent weights of a countdown path on the tape.
///
/// `pairs[t]` is a weight vector over the `K·M` pairs at step `t` and
/// `starts[t]` the weight on a segment starting at `t`. With one-hot
/// candidates at the boundaries both are exactly 0/1 and describe the hard
/// path; otherwise they are the expected countdown.
#[derive(Clone, Debug)]
pub struct CountdownPath {
    pub starts: Vec<Var>,
    pub pairs: Vec<Var>,
}

/// `c_1 = e_1`; `b_t = Σ_k c_{t−1}[k, 1]`; `c_t = b_t·e_t + shift(c_{t−1})`,
/// where `shift` decrements every remaining duration.
pub fn countdown_path(tape: &mut Tape, candidates: &[Var], max_dur: usize) -> CountdownPath {
    let mut starts = Vec::with_capacity(candidates.len());
    let mut pairs: Vec<Var> = Vec::with_capacity(candidates.len());
    for (t, &e) in candidates.iter().enumerate() {
        if t == 0 {
            starts.push(tape.constant(Tensor::scalar(1.0)));
            pairs.push(e);
            continue;
        }
        let prev = pairs[t - 1];
        let ending = tape.column(prev, max_dur, 0);
        let b = tape.sum(ending);
        let fresh = tape.scale_by(b, e);
        let carried = tape.shift_rows(prev, max_dur);
        starts.push(b);
        pairs.push(tape.add(fresh, carried));
    }
    CountdownPath { starts, pairs }
}

/// Joint log-probability along a countdown path.
///
/// Every term is multilinear in the start weights and pair weights, and the
/// recurrent state at `t` blends a fresh start from `h0` with the carried
/// state by `b_t`, so one-hot candidates give the hard joint.
pub fn countdown_joint_log_prob(
    tape: &mut Tape,
    gv: &GenVars,
    x: &Sequence,
    path: &CountdownPath,
    candidates: &[Var],
) -> Var {
    let m_dur = gv.dims.max_dur;
    let mut terms = Vec::with_capacity(x.len() * 3);
    let mut h: Option<Var> = None;
    for t in 0..x.len() {
        let e = candidates[t];
        let b = path.starts[t];
        let state = tape.row_sums(path.pairs[t], m_dur);
        let sw = gv.mix(tape, state);
        let fresh_state = tape.row_sums(e, m_dur);
        let dur = tape.dot(e, gv.log_dur);
        let h_new = recurrent_step(tape, &sw, sw.h0, None);
        let h_t = match h {
            None => {
                terms.push(tape.dot(fresh_state, gv.log_init));
                terms.push(dur);
                h_new
            }
            Some(h_prev) => {
                let ending = tape.column(path.pairs[t - 1], m_dur, 0);
                let row = tape.matvec(gv.log_trans, fresh_state);
                terms.push(tape.dot(ending, row));
                terms.push(tape.mul(b, dur));
                let x_prev = tape.constant_vec(x.step(t - 1));
                let h_cont = recurrent_step(tape, &sw, h_prev, Some(x_prev));
                let keep = tape.affine(b, -1.0, 1.0);
                let a = tape.scale_by(b, h_new);
                let c = tape.scale_by(keep, h_cont);
                tape.add(a, c)
            }
        };
        terms.push(emission(tape, &sw, h_t, x.step(t)));
        h = Some(h_t);
    }
    tape.add_n(&terms)
}

/// `Σ_t b_t ⟨e_t, log q_t⟩`: the posterior term along a countdown path.
pub fn countdown_log_q(tape: &mut Tape, path: &CountdownPath, candidates: &[Var], log_probs: &[Var]) -> Var {
    let terms: Vec<Var> = (0..candidates.len())
        .map(|t| {
            let d = tape.dot(candidates[t], log_probs[t]);
            if t == 0 {
                d
            } else {
                tape.mul(path.starts[t], d)
            }
        })
        .collect();
    tape.add_n(&terms)
}
