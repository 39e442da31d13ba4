//! The structured inference network `q_φ(z, d | x)`.
//!
//! A bi-directional LSTM encodes the sequence into `ĥ_t`. A GRU then runs
//! backward over `[x_t; ĥ_t]` from a learned terminal state, giving
//! summaries `I_t` that see the whole future. At each segment boundary two
//! linear heads read `I_t`; their logits are added into one logit per
//! `(z, d)` pair and a Gumbel-softmax draw picks the pair. Between
//! boundaries the countdown is copied/decremented without sampling.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::generative::{one_hot, GenDims, LatentPath, Sequence};
use crate::numerics::{argmax, softmax, ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "inf.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfDims {
    /// `K`
    pub states: usize,
    /// `M`
    pub max_dur: usize,
    /// `m`
    pub obs_dim: usize,
    /// Encoder state size per direction, `e`.
    pub encoder: usize,
    /// Summary size, `q`.
    pub summary: usize,
}

impl InfDims {
    pub fn pairs(&self) -> usize {
        self.states * self.max_dur
    }

    fn validate(&self) -> Result<()> {
        if self.states == 0
            || self.max_dur == 0
            || self.obs_dim == 0
            || self.encoder == 0
            || self.summary == 0
        {
            return Err(SsnnError::contract(format!(
                "all inference dims must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Whether these dims pair with a generative model.
    pub fn matches(&self, gen: &GenDims) -> bool {
        self.states == gen.states && self.max_dur == gen.max_dur && self.obs_dim == gen.obs_dim
    }

    fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (k, m_dur, m, e, q) = (
            self.states,
            self.max_dur,
            self.obs_dim,
            self.encoder,
            self.summary,
        );
        vec![
            ("fwd_w", vec![4 * e, m]),
            ("fwd_u", vec![4 * e, e]),
            ("fwd_b", vec![4 * e]),
            ("bwd_w", vec![4 * e, m]),
            ("bwd_u", vec![4 * e, e]),
            ("bwd_b", vec![4 * e]),
            ("gru_w", vec![3 * q, m + 2 * e]),
            ("gru_u", vec![3 * q, q]),
            ("gru_b", vec![3 * q]),
            ("terminal", vec![q]),
            ("w_z", vec![q, k]),
            ("w_d", vec![q, m_dur]),
        ]
    }
}

fn name(slot: &str) -> String {
    format!("{PREFIX}{slot}")
}

/// All inference parameters φ.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceParams {
    dims: InfDims,
    store: ParamStore,
}

/// Softmax temperature, strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(SsnnError::contract(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Temperature(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// One-hot forward pass, gradients through the relaxed sample.
    #[default]
    HardSt,
    /// The relaxed sample feeds the generative model directly.
    Relaxed,
}

impl std::str::FromStr for SampleMode {
    type Err = SsnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard-st" => Ok(SampleMode::HardSt),
            "relaxed" => Ok(SampleMode::Relaxed),
            other => Err(SsnnError::contract(format!(
                "unknown mode {other:?} (expected hard-st or relaxed)"
            ))),
        }
    }
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SampleMode::HardSt => "hard-st",
            SampleMode::Relaxed => "relaxed",
        })
    }
}

/// Where boundary Gumbel noise comes from.
pub enum Noise<'a> {
    /// Fresh standard Gumbel draws.
    Fresh(&'a mut dyn RngCore),
    /// Row `t` of a `[T, K·M]` table is used at boundary step `t`.
    Frozen(&'a Tensor),
    /// No noise: greedy decoding.
    Zero,
}

impl Noise<'_> {
    fn draw(&mut self, t: usize, n: usize) -> Vec<f64> {
        match self {
            Noise::Fresh(rng) => (0..n).map(|_| standard_gumbel(&mut **rng)).collect(),
            Noise::Frozen(table) => table.slice(t).to_vec(),
            Noise::Zero => vec![0.0; n],
        }
    }
}

/// One Gumbel(0, 1) draw from a uniform on the open interval (0, 1).
pub fn standard_gumbel<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    -(-u.ln()).ln()
}

/// A `[T, N]` table of Gumbel draws for frozen-noise evaluation.
pub fn gumbel_table<R: RngCore + ?Sized>(steps: usize, pairs: usize, rng: &mut R) -> Tensor {
    let data = (0..steps * pairs).map(|_| standard_gumbel(rng)).collect();
    Tensor::matrix(steps, pairs, data)
}

/// `softmax((logits + g) / τ)`.
pub fn gumbel_softmax(logits: &[f64], tau: Temperature, g: &[f64]) -> Vec<f64> {
    assert_eq!(logits.len(), g.len(), "contract violation: noise length");
    let scaled: Vec<f64> = logits
        .iter()
        .zip(g)
        .map(|(l, n)| (l + n) / tau.get())
        .collect();
    softmax(&scaled)
}

/// The draw at one segment boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDraw {
    pub t: usize,
    /// Relaxed sample over the `K·M` pairs, index `z·M + d − 1`.
    pub y: Vec<f64>,
    pub noise: Vec<f64>,
    /// Chosen pair index.
    pub pair: usize,
}

/// A posterior sample: relaxed draws at boundaries plus the decoded hard path.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedPath {
    pub draws: Vec<BoundaryDraw>,
    pub hard: LatentPath,
    /// `log q_φ` of the hard path.
    pub log_q: f64,
}

/// Final forward-encoder state, used to carry context across chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl InferenceParams {
    pub fn zeros(dims: InfDims) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        for (slot, shape) in dims.shapes() {
            store.register(&name(slot), Tensor::zeros(&shape))?;
        }
        Ok(InferenceParams { dims, store })
    }

    /// `Normal(0, 1/fan_in)` weights, zero biases except forget gates at 1,
    /// zero terminal summary.
    pub fn random<R: Rng + ?Sized>(dims: InfDims, rng: &mut R) -> Result<Self> {
        let mut p = InferenceParams::zeros(dims)?;
        let (m, e, q) = (dims.obs_dim, dims.encoder, dims.summary);
        for (slot, fan_in) in [
            ("fwd_w", m),
            ("fwd_u", e),
            ("bwd_w", m),
            ("bwd_u", e),
            ("gru_w", m + 2 * e),
            ("gru_u", q),
            ("w_z", q),
            ("w_d", q),
        ] {
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            let entries = p.store.entries_mut(&name(slot)).unwrap();
            entries.iter_mut().for_each(|v| *v = normal.sample(rng));
        }
        for slot in ["fwd_b", "bwd_b"] {
            p.store.entries_mut(&name(slot)).unwrap()[e..2 * e].fill(1.0);
        }
        Ok(p)
    }

    pub fn from_store(dims: InfDims, store: &ParamStore) -> Result<Self> {
        dims.validate()?;
        let mut own = ParamStore::new();
        for (slot, shape) in dims.shapes() {
            let n = name(slot);
            let t = store
                .get(&n)
                .ok_or_else(|| SsnnError::Schema(format!("missing parameter {n}")))?;
            if t.shape() != shape.as_slice() {
                return Err(SsnnError::Dimension(format!(
                    "parameter {n} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            own.register(&n, t.clone())?;
        }
        Ok(InferenceParams { dims, store: own })
    }

    pub fn dims(&self) -> InfDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tensor(&self, slot: &str) -> &Tensor {
        self.store.expect(&name(slot))
    }

    pub fn set_tensor(&mut self, slot: &str, value: Tensor) -> Result<()> {
        self.store.set(&name(slot), value)
    }

    pub fn bind(&self, tape: &mut Tape) -> InfVars {
        let mut p = |slot: &str| tape.param(&name(slot), self.store.expect(&name(slot)));
        InfVars {
            dims: self.dims,
            fwd: CellVars {
                w: p("fwd_w"),
                u: p("fwd_u"),
                b: p("fwd_b"),
            },
            bwd: CellVars {
                w: p("bwd_w"),
                u: p("bwd_u"),
                b: p("bwd_b"),
            },
            gru: CellVars {
                w: p("gru_w"),
                u: p("gru_u"),
                b: p("gru_b"),
            },
            terminal: p("terminal"),
            w_z: p("w_z"),
            w_d: p("w_d"),
        }
    }

    fn check_obs(&self, x: &Sequence) -> Result<()> {
        if x.dim() != self.dims.obs_dim {
            return Err(SsnnError::Dimension(format!(
                "sequence {} has m = {}, inference network expects {}",
                x.id,
                x.dim(),
                self.dims.obs_dim
            )));
        }
        Ok(())
    }

    /// `ĥ` as a `[T, 2e]` matrix.
    pub fn encode_bidirectional(&self, x: &Sequence) -> Result<Tensor> {
        self.check_obs(x)?;
        let mut tape = Tape::new();
        let iv = self.bind(&mut tape);
        let xs = observation_vars(&mut tape, x);
        let enc = encode(&mut tape, &iv, &xs, None);
        Ok(stack(&tape, &enc.rows))
    }

    /// `I_{1:T}` as a `[T, q]` matrix.
    pub fn backward_summaries(&self, x: &Sequence) -> Result<Tensor> {
        self.check_obs(x)?;
        let mut tape = Tape::new();
        let iv = self.bind(&mut tape);
        let xs = observation_vars(&mut tape, x);
        let enc = encode(&mut tape, &iv, &xs, None);
        let summaries = backward_summaries(&mut tape, &iv, &xs, &enc.rows);
        Ok(stack(&tape, &summaries))
    }

    /// Raw head logits `(W_zᵀ I, W_dᵀ I)` for one summary vector.
    pub fn posterior_logits(&self, summary: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if summary.len() != self.dims.summary {
            return Err(SsnnError::Dimension(format!(
                "summary has length {}, expected {}",
                summary.len(),
                self.dims.summary
            )));
        }
        let mut tape = Tape::new();
        let iv = self.bind(&mut tape);
        let s = tape.constant_vec(summary);
        let lz = tape.matvec_t(iv.w_z, s);
        let ld = tape.matvec_t(iv.w_d, s);
        Ok((tape.value(lz).data().to_vec(), tape.value(ld).data().to_vec()))
    }

    /// Per-step joint log-probabilities over pairs, `[T, K·M]`, as used at boundaries.
    pub fn posterior_table(&self, x: &Sequence) -> Result<Tensor> {
        self.check_obs(x)?;
        let mut tape = Tape::new();
        let iv = self.bind(&mut tape);
        let xs = observation_vars(&mut tape, x);
        let enc = encode(&mut tape, &iv, &xs, None);
        let summaries = backward_summaries(&mut tape, &iv, &xs, &enc.rows);
        let rows: Vec<Var> = summaries
            .iter()
            .map(|&s| {
                let joint = joint_logits(&mut tape, &iv, s);
                tape.log_softmax(joint)
            })
            .collect();
        Ok(stack(&tape, &rows))
    }

    /// Draws one posterior path.
    pub fn sample_posterior_path(
        &self,
        x: &Sequence,
        tau: Temperature,
        noise: Noise<'_>,
        mode: SampleMode,
    ) -> Result<RelaxedPath> {
        self.check_obs(x)?;
        let mut tape = Tape::new();
        let iv = self.bind(&mut tape);
        let xs = observation_vars(&mut tape, x);
        let enc = encode(&mut tape, &iv, &xs, None);
        let summaries = backward_summaries(&mut tape, &iv, &xs, &enc.rows);
        Ok(sample_on_tape(&mut tape, &iv, &summaries, tau, noise, mode)?.path)
    }

    /// `log q_φ(z, d | x)`; `−∞` for paths that break the countdown.
    pub fn posterior_log_prob(&self, path: &LatentPath, x: &Sequence) -> Result<f64> {
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
        let table = self.posterior_table(x)?;
        Ok(path_log_prob(&table, path, self.dims.max_dur))
    }
}

/// `Σ_boundaries table[t][pair]`, accumulated in time order.
pub fn path_log_prob(table: &Tensor, path: &LatentPath, max_dur: usize) -> f64 {
    let mut total = 0.0;
    for seg in path.segments() {
        total += table.slice(seg.start)[seg.pair_index(max_dur)];
    }
    total
}

fn stack(tape: &Tape, rows: &[Var]) -> Tensor {
    let cols = tape.value(rows[0]).len();
    let data: Vec<f64> = rows.iter().flat_map(|&r| tape.value(r).data().to_vec()).collect();
    Tensor::matrix(rows.len(), cols, data)
}

/// Weights of one gated cell.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

/// φ registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct InfVars {
    pub dims: InfDims,
    pub fwd: CellVars,
    pub bwd: CellVars,
    pub gru: CellVars,
    pub terminal: Var,
    pub w_z: Var,
    pub w_d: Var,
}

pub fn observation_vars(tape: &mut Tape, x: &Sequence) -> Vec<Var> {
    x.rows().map(|r| tape.constant_vec(r)).collect()
}

/// One LSTM step with gate order `[i, f, g, o]`; `None` is the zero state.
fn lstm_step(tape: &mut Tape, cell: &CellVars, e: usize, x: Var, state: Option<(Var, Var)>) -> (Var, Var) {
    let wx = tape.matvec(cell.w, x);
    let mut pre = tape.add(wx, cell.b);
    if let Some((h, _)) = state {
        let uh = tape.matvec(cell.u, h);
        pre = tape.add(pre, uh);
    }
    let i = tape.slice(pre, 0, e);
    let i = tape.sigmoid(i);
    let g = tape.slice(pre, 2 * e, e);
    let g = tape.tanh(g);
    let o = tape.slice(pre, 3 * e, e);
    let o = tape.sigmoid(o);
    let mut c = tape.mul(i, g);
    if let Some((_, c_prev)) = state {
        let f = tape.slice(pre, e, e);
        let f = tape.sigmoid(f);
        let keep = tape.mul(f, c_prev);
        c = tape.add(keep, c);
    }
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (h, c)
}

/// Encoder output rows and the final forward state.
pub struct Encoded {
    pub rows: Vec<Var>,
    pub forward_final: (Var, Var),
}

/// Runs both LSTM directions; `init` seeds the forward direction.
pub fn encode(tape: &mut Tape, iv: &InfVars, xs: &[Var], init: Option<&LstmState>) -> Encoded {
    let e = iv.dims.encoder;
    let n = xs.len();
    let mut state = init.map(|s| (tape.constant_vec(&s.h), tape.constant_vec(&s.c)));
    let mut fwd = Vec::with_capacity(n);
    for &x in xs {
        let s = lstm_step(tape, &iv.fwd, e, x, state);
        fwd.push(s.0);
        state = Some(s);
    }
    let forward_final = state.expect("non-empty sequence");
    let mut bwd = vec![fwd[0]; n];
    let mut state = None;
    for t in (0..n).rev() {
        let s = lstm_step(tape, &iv.bwd, e, xs[t], state);
        bwd[t] = s.0;
        state = Some(s);
    }
    let rows = (0..n).map(|t| tape.concat(&[fwd[t], bwd[t]])).collect();
    Encoded {
        rows,
        forward_final,
    }
}

/// GRU step `I_t = g(I_{t+1}, v_t)`.
fn gru_step(tape: &mut Tape, cell: &CellVars, q: usize, v: Var, s: Var) -> Var {
    let wv = tape.matvec(cell.w, v);
    let wv = tape.add(wv, cell.b);
    let us = tape.matvec(cell.u, s);
    let pre_r = {
        let a = tape.slice(wv, 0, q);
        let b = tape.slice(us, 0, q);
        tape.add(a, b)
    };
    let r = tape.sigmoid(pre_r);
    let pre_u = {
        let a = tape.slice(wv, q, q);
        let b = tape.slice(us, q, q);
        tape.add(a, b)
    };
    let u = tape.sigmoid(pre_u);
    let cand = {
        let a = tape.slice(wv, 2 * q, q);
        let b = tape.slice(us, 2 * q, q);
        let rb = tape.mul(r, b);
        let pre = tape.add(a, rb);
        tape.tanh(pre)
    };
    // s' = n + u ⊙ (s − n)
    let diff = tape.sub(s, cand);
    let gated = tape.mul(u, diff);
    tape.add(cand, gated)
}

/// `I_t` for `t = 0..T`, built backward from the learned terminal state.
pub fn backward_summaries(tape: &mut Tape, iv: &InfVars, xs: &[Var], hhat: &[Var]) -> Vec<Var> {
    let q = iv.dims.summary;
    let n = xs.len();
    let mut out = vec![iv.terminal; n];
    let mut s = iv.terminal;
    for t in (0..n).rev() {
        let v = tape.concat(&[xs[t], hhat[t]]);
        s = gru_step(tape, &iv.gru, q, v, s);
        out[t] = s;
    }
    out
}

/// Joint pair logits `lz[k] + ld[j]` at index `k·M + j`.
pub fn joint_logits(tape: &mut Tape, iv: &InfVars, summary: Var) -> Var {
    let lz = tape.matvec_t(iv.w_z, summary);
    let ld = tape.matvec_t(iv.w_d, summary);
    tape.outer_sum(lz, ld)
}

/// A posterior sample recorded on a tape.
pub struct PosteriorDraw {
    pub path: RelaxedPath,
    /// Pair weights offered at every step: the (straight-through or relaxed)
    /// sample at boundaries, the noiseless posterior elsewhere.
    pub candidates: Vec<Var>,
    /// `log softmax` of the joint logits at every step.
    pub log_probs: Vec<Var>,
}

/// Walks the sequence, sampling a pair at each boundary.
pub fn sample_on_tape(
    tape: &mut Tape,
    iv: &InfVars,
    summaries: &[Var],
    tau: Temperature,
    mut noise: Noise<'_>,
    mode: SampleMode,
) -> Result<PosteriorDraw> {
    let (k, m_dur) = (iv.dims.states, iv.dims.max_dur);
    let n_pairs = k * m_dur;
    let steps = summaries.len();
    if let Noise::Frozen(table) = &noise {
        if table.shape() != [steps, n_pairs] {
            return Err(SsnnError::Dimension(format!(
                "frozen noise has shape {:?}, expected [{steps}, {n_pairs}]",
                table.shape()
            )));
        }
    }
    let mut draws = Vec::new();
    let mut segments = Vec::new();
    let mut candidates = Vec::with_capacity(steps);
    let mut log_probs = Vec::with_capacity(steps);
    let mut log_q = 0.0;
    let mut next_boundary = 0;
    for t in 0..steps {
        let joint = joint_logits(tape, iv, summaries[t]);
        let logp = tape.log_softmax(joint);
        log_probs.push(logp);
        if t < next_boundary {
            candidates.push(tape.softmax(joint));
            continue;
        }
        let g = noise.draw(t, n_pairs);
        let g_var = tape.constant_vec(&g);
        let perturbed = tape.add(joint, g_var);
        let pair = argmax(tape.value(perturbed).data());
        let scaled = tape.affine(perturbed, 1.0 / tau.get(), 0.0);
        let y = tape.softmax(scaled);
        candidates.push(match mode {
            SampleMode::HardSt => tape.straight_through(y, one_hot(n_pairs, pair)),
            SampleMode::Relaxed => y,
        });
        log_q += tape.value(logp).data()[pair];
        let (state, dur) = (pair / m_dur, pair % m_dur + 1);
        draws.push(BoundaryDraw {
            t,
            y: tape.value(y).data().to_vec(),
            noise: g,
            pair,
        });
        segments.push((state, dur));
        next_boundary = t + dur;
    }
    Ok(PosteriorDraw {
        path: RelaxedPath {
            draws,
            hard: LatentPath::from_segments(&segments, steps),
            log_q,
        },
        candidates,
        log_probs,
    })
}
