//! ELBO estimation, gradients and the training loop.
//!
//! Each sequence gets one posterior draw per iteration. Its ELBO is built on
//! a single tape, so one backward pass yields the pathwise gradient for φ
//! and the Monte-Carlo gradient for θ. The batch loss is the mean ELBO.

use std::time::Instant;

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::generative::{self, LatentPath, Sequence};
use crate::init::EmissionInit;
use crate::inference::{
    self, path_log_prob, LstmState, Noise, RelaxedPath, SampleMode, Temperature,
};
use crate::model::{Model, ModelDims};
use crate::numerics::{Gradients, ParamStore, Tape, Tensor, Var};

fn default_batch() -> usize {
    8
}
fn default_iterations() -> usize {
    200
}
fn default_lr() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_tau_start() -> f64 {
    0.1
}
fn default_tau_end() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    10.0
}
fn default_samples() -> usize {
    1
}

/// Training hyper-parameters and model sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    #[serde(default)]
    pub mode: SampleMode,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
    /// Truncated-BPTT chunk length; `None` trains on whole sequences.
    #[serde(default)]
    pub bptt_chunk: Option<usize>,
    /// Posterior draws per sequence per iteration.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Checkpoint every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Record wall-clock time in the history (makes it non-reproducible).
    #[serde(default)]
    pub record_time: bool,
    #[serde(default)]
    pub no_self_transition: bool,
    /// Learning rate for the generative parameters; `None` uses `learning_rate`.
    #[serde(default)]
    pub theta_learning_rate: Option<f64>,
    /// Leading iterations that update only the inference network.
    #[serde(default)]
    pub warmup: usize,
    #[serde(default)]
    pub emission_init: EmissionInit,
    pub states: usize,
    pub max_dur: usize,
    pub hidden: usize,
    pub encoder: usize,
    pub summary: usize,
}

impl TrainConfig {
    /// Defaults for the given model sizes.
    pub fn with_dims(states: usize, max_dur: usize, hidden: usize, encoder: usize, summary: usize) -> Self {
        TrainConfig {
            batch_size: default_batch(),
            iterations: default_iterations(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            tau_start: default_tau_start(),
            tau_end: default_tau_end(),
            mode: SampleMode::HardSt,
            clip_norm: default_clip(),
            seed: 0,
            bptt_chunk: None,
            samples: default_samples(),
            checkpoint_every: 0,
            record_time: false,
            no_self_transition: false,
            theta_learning_rate: None,
            warmup: 0,
            emission_init: EmissionInit::default(),
            states,
            max_dur,
            hidden,
            encoder,
            summary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SsnnError::contract(msg));
        if self.batch_size == 0 || self.samples == 0 {
            return bad("batch_size and samples must be >= 1".into());
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end && self.tau_start.is_finite()) {
            return bad(format!(
                "need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            ));
        }
        if self.theta_learning_rate.is_some_and(|v| !(v > 0.0)) {
            return bad("theta_learning_rate must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0 && self.clip_norm > 0.0) {
            return bad("learning_rate, epsilon and clip_norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("ADAM betas must lie in [0, 1)".into());
        }
        if self.bptt_chunk == Some(0) {
            return bad("bptt_chunk must be >= 1".into());
        }
        if self.states == 0 || self.max_dur == 0 || self.hidden == 0 || self.encoder == 0 || self.summary == 0 {
            return bad("model dims must be >= 1".into());
        }
        Ok(())
    }

    pub fn model_dims(&self, obs_dim: usize) -> ModelDims {
        ModelDims {
            states: self.states,
            max_dur: self.max_dur,
            obs_dim,
            hidden: self.hidden,
            encoder: self.encoder,
            summary: self.summary,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Purpose tags for derived random streams.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Init = 0,
    Batch = 1,
    Posterior = 2,
    Data = 3,
    Eval = 4,
}

/// Independent generator for `(seed, purpose, a, b)`.
pub fn derived_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// ADAM moments per parameter entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    moments: std::collections::BTreeMap<String, (i32, Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }
}

/// One bias-corrected ADAM update that descends `grads`.
pub fn adam_step(
    stores: &mut [&mut ParamStore],
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    for store in stores.iter_mut() {
        adam_update(store, grads, state, cfg)?;
    }
    Ok(())
}

/// ADAM update of one store without advancing the global step counter.
fn adam_update(store: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let Some(g) = grads.get(&name) else { continue };
        let values = store.entries_mut(&name).unwrap();
        if g.len() != values.len() {
            return Err(SsnnError::contract(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                values.len()
            )));
        }
        let (t, m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (0, vec![0.0; g.len()], vec![0.0; g.len()]));
        // bias correction counts this parameter's own updates
        *t += 1;
        let c1 = 1.0 - cfg.beta1.powi(*t);
        let c2 = 1.0 - cfg.beta2.powi(*t);
        for j in 0..values.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            values[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Rescales `grads` to norm `max_norm` when it is longer; returns the
/// original norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `τ(step) = τ_start·(τ_end/τ_start)^{step/total}`, clamped at `τ_end`.
pub fn anneal_temperature(step: usize, config: &TrainConfig) -> f64 {
    let (start, end) = (config.tau_start, config.tau_end);
    if start == end || config.iterations == 0 {
        return start;
    }
    let frac = step as f64 / config.iterations as f64;
    (start * (end / start).powf(frac)).max(end)
}

/// `log p_θ(x, path) − log q_φ(path | x)` along the countdown path of `draw`.
pub fn elbo_on_tape(tape: &mut Tape, gv: &generative::GenVars, x: &Sequence, draw: &inference::PosteriorDraw) -> Var {
    let path = generative::countdown_path(tape, &draw.candidates, gv.dims.max_dur);
    let joint = generative::countdown_joint_log_prob(tape, gv, x, &path, &draw.candidates);
    let log_q = generative::countdown_log_q(tape, &path, &draw.candidates, &draw.log_probs);
    tape.sub(joint, log_q)
}

/// One sequence's ELBO and its gradient.
#[derive(Clone, Debug)]
pub struct SequenceElbo {
    pub elbo: f64,
    pub grads: Gradients,
    pub path: RelaxedPath,
    pub forward_final: LstmState,
}

/// Builds `log p_θ(x, path) − log q_φ(path | x)` on a fresh tape and
/// differentiates it.
pub fn sequence_elbo(
    model: &Model,
    x: &Sequence,
    tau: Temperature,
    noise: Noise<'_>,
    mode: SampleMode,
    init: Option<&LstmState>,
) -> Result<SequenceElbo> {
    let dims = model.dims();
    if x.dim() != dims.obs_dim {
        return Err(SsnnError::Dimension(format!(
            "sequence {} has m = {}, model expects {}",
            x.id,
            x.dim(),
            dims.obs_dim
        )));
    }
    let mut tape = Tape::new();
    let gv = model.gen.bind(&mut tape);
    let iv = model.inf.bind(&mut tape);
    let xs = inference::observation_vars(&mut tape, x);
    let enc = inference::encode(&mut tape, &iv, &xs, init);
    let summaries = inference::backward_summaries(&mut tape, &iv, &xs, &enc.rows);
    let draw = inference::sample_on_tape(&mut tape, &iv, &summaries, tau, noise, mode)?;
    let elbo = elbo_on_tape(&mut tape, &gv, x, &draw);
    let value = tape.scalar(elbo);
    if !value.is_finite() {
        return Err(SsnnError::Diagnostic(format!(
            "non-finite ELBO {value} for sequence {}: the posterior left the prior's support",
            x.id
        )));
    }
    let grads = tape.backward(elbo)?;
    let forward_final = LstmState {
        h: tape.value(enc.forward_final.0).data().to_vec(),
        c: tape.value(enc.forward_final.1).data().to_vec(),
    };
    Ok(SequenceElbo {
        elbo: value,
        grads,
        path: draw.path,
        forward_final,
    })
}

/// ELBO of an existing posterior draw.
///
/// In hard-ST mode this is `log p_θ(x, hard) − log q_φ(hard | x)`. In
/// relaxed mode the generative side consumes the relaxed weights and the
/// posterior term is `Σ ⟨y, log q⟩` over boundaries.
pub fn elbo_term(x: &Sequence, path: &RelaxedPath, model: &Model, mode: SampleMode) -> Result<f64> {
    let value = match mode {
        SampleMode::HardSt => {
            model.gen.joint_log_prob(x, &path.hard)? - model.inf.posterior_log_prob(&path.hard, x)?
        }
        SampleMode::Relaxed => {
            let table = model.inf.posterior_table(x)?;
            let mut tape = Tape::new();
            let gv = model.gen.bind(&mut tape);
            let mut draws = path.draws.iter().peekable();
            let mut candidates = Vec::with_capacity(x.len());
            let mut log_probs = Vec::with_capacity(x.len());
            for t in 0..x.len() {
                let row = table.slice(t);
                log_probs.push(tape.constant_vec(row));
                let e = match draws.peek() {
                    Some(d) if d.t == t => draws.next().unwrap().y.clone(),
                    _ => crate::numerics::softmax(row),
                };
                candidates.push(tape.constant_vec(&e));
            }
            let draw = inference::PosteriorDraw {
                path: path.clone(),
                candidates,
                log_probs,
            };
            let elbo = elbo_on_tape(&mut tape, &gv, x, &draw);
            tape.scalar(elbo)
        }
    };
    if !value.is_finite() {
        return Err(SsnnError::Diagnostic(format!(
            "non-finite ELBO for sequence {}: the posterior left the prior's support",
            x.id
        )));
    }
    Ok(value)
}

/// Options shared by every sequence of one gradient estimate.
#[derive(Clone, Copy, Debug)]
pub struct EstimatorOptions {
    pub tau: Temperature,
    pub mode: SampleMode,
    pub samples: usize,
    pub bptt_chunk: Option<usize>,
    pub iteration: usize,
}

/// Per-sequence noise for [`elbo_gradients`].
pub enum BatchNoise<'a> {
    Fresh(Box<dyn RngCore + 'a>),
    /// A `[T, K·M]` Gumbel table per draw.
    Frozen(Vec<Tensor>),
}

#[derive(Clone, Debug)]
pub struct BatchGradients {
    /// Gradient of the mean ELBO (ascent direction).
    pub grads: Gradients,
    pub mean_elbo: f64,
    pub elbos: Vec<f64>,
}

fn rows_of(table: &Tensor, start: usize, len: usize) -> Tensor {
    let cols = table.shape()[1];
    Tensor::matrix(len, cols, table.data()[start * cols..(start + len) * cols].to_vec())
}

/// Mean-ELBO gradient over a batch, reduced in batch order.
pub fn elbo_gradients(
    model: &Model,
    batch: Vec<(&Sequence, BatchNoise<'_>)>,
    opts: &EstimatorOptions,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(SsnnError::contract("empty batch"));
    }
    let scale = 1.0 / (batch.len() * opts.samples) as f64;
    let mut total = Gradients::default();
    let mut elbos = Vec::with_capacity(batch.len());
    for (x, mut noise) in batch {
        let chunk = opts.bptt_chunk.unwrap_or(x.len()).max(1);
        let mut seq_elbo = 0.0;
        for s in 0..opts.samples {
            let mut carry: Option<LstmState> = None;
            let mut start = 0;
            while start < x.len() {
                let len = chunk.min(x.len() - start);
                let piece;
                let xc = if len == x.len() {
                    x
                } else {
                    piece = x.window(format!("{}@{start}", x.id), start, len);
                    &piece
                };
                let frozen;
                let n = match &mut noise {
                    BatchNoise::Fresh(rng) => Noise::Fresh(&mut **rng),
                    BatchNoise::Frozen(tables) => {
                        let table = tables.get(s).ok_or_else(|| {
                            SsnnError::contract("frozen noise has fewer tables than samples")
                        })?;
                        frozen = rows_of(table, start, len);
                        Noise::Frozen(&frozen)
                    }
                };
                let r = sequence_elbo(model, xc, opts.tau, n, opts.mode, carry.as_ref())?;
                seq_elbo += r.elbo;
                total.accumulate(&r.grads);
                carry = Some(r.forward_final);
                start += len;
            }
        }
        elbos.push(seq_elbo / opts.samples as f64);
    }
    total.scale(scale);
    if let Some(name) = total.first_non_finite() {
        return Err(SsnnError::NonFinite {
            what: format!("gradient of {name}"),
            iteration: opts.iteration,
        });
    }
    let mean_elbo = elbos.iter().sum::<f64>() / elbos.len() as f64;
    Ok(BatchGradients {
        grads: total,
        mean_elbo,
        elbos,
    })
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub mean_elbo: f64,
    pub tau: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_phi: f64,
    pub clipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, r: TrainRecord) {
        self.records.push(r);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Callbacks invoked by [`train`].
pub trait TrainHooks {
    fn on_record(&mut self, _record: &TrainRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iteration: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainHooks for () {}

/// Random parameters from the `Init` stream, with emission offsets set per
/// `config.emission_init`.
pub fn initial_model(config: &TrainConfig, data: &[Sequence]) -> Result<Model> {
    config.validate()?;
    let m = crate::data::check_dims(data)?;
    if data.is_empty() {
        return Err(SsnnError::contract("cannot initialise from an empty dataset"));
    }
    let mut rng = derived_rng(config.seed, Stream::Init, 0, 0);
    let mut model = Model::random(config.model_dims(m), &mut rng)?;
    model.gen.set_no_self_transition(config.no_self_transition)?;
    if config.emission_init == EmissionInit::Kmeans {
        crate::init::init_emissions(&mut model, data, &mut rng)?;
    }
    Ok(model)
}

/// Indices of one mini-batch: without replacement while the dataset lasts.
fn sample_batch(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = index::sample(rng, n, size.min(n)).into_vec();
    while out.len() < size {
        out.push((rng.next_u64() % n as u64) as usize);
    }
    out
}

/// The training loop: batch → posterior draws → ELBO gradients → clip →
/// ADAM → anneal.
pub fn train(
    dataset: &[Sequence],
    mut model: Model,
    config: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(SsnnError::contract("cannot train on an empty dataset"));
    }
    let m = model.dims().obs_dim;
    if let Some(x) = dataset.iter().find(|x| x.dim() != m) {
        return Err(SsnnError::Dimension(format!(
            "sequence {} has m = {}, model expects {m}",
            x.id,
            x.dim()
        )));
    }
    let adam = config.adam();
    let mut state = OptimizerState::new();
    let mut history = TrainHistory::default();
    let mut batch_rng = derived_rng(config.seed, Stream::Batch, 0, 0);
    let started = Instant::now();
    for it in 0..config.iterations {
        let tau = anneal_temperature(it, config);
        let idx = sample_batch(dataset.len(), config.batch_size, &mut batch_rng);
        let batch = idx
            .iter()
            .map(|&i| {
                let rng = derived_rng(config.seed, Stream::Posterior, it as u64, i as u64);
                (&dataset[i], BatchNoise::Fresh(Box::new(rng)))
            })
            .collect();
        let opts = EstimatorOptions {
            tau: Temperature::new(tau)?,
            mode: config.mode,
            samples: config.samples,
            bptt_chunk: config.bptt_chunk,
            iteration: it,
        };
        let est = elbo_gradients(&model, batch, &opts)?;
        if !est.mean_elbo.is_finite() {
            return Err(SsnnError::NonFinite {
                what: "mean ELBO".into(),
                iteration: it,
            });
        }
        let mut grads = est.grads;
        if it < config.warmup {
            grads.retain(|n| !n.starts_with(generative::PREFIX));
        }
        let theta = grads.norm_where(|n| n.starts_with(generative::PREFIX));
        let phi = grads.norm_where(|n| n.starts_with(inference::PREFIX));
        let norm = clip_gradients(&mut grads, config.clip_norm);
        // ascend the ELBO
        grads.scale(-1.0);
        state.step += 1;
        let theta_adam = AdamConfig {
            learning_rate: config.theta_learning_rate.unwrap_or(config.learning_rate),
            ..adam
        };
        adam_update(model.gen.store_mut(), &grads, &mut state, &theta_adam)?;
        adam_update(model.inf.store_mut(), &grads, &mut state, &adam)?;
        let record = TrainRecord {
            iteration: it,
            mean_elbo: est.mean_elbo,
            tau,
            grad_norm_theta: theta,
            grad_norm_phi: phi,
            clipped: norm > config.clip_norm,
            wall_time: config.record_time.then(|| started.elapsed().as_secs_f64()),
        };
        hooks.on_record(&record)?;
        history.push(record);
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            hooks.on_checkpoint(it + 1, &model)?;
        }
    }
    Ok((model, history))
}

/// Mean ELBO of every sequence under fresh draws at temperature `tau`.
pub fn mean_elbo(
    model: &Model,
    x: &Sequence,
    tau: Temperature,
    mode: SampleMode,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let path = model.inf.sample_posterior_path(x, tau, Noise::Fresh(&mut *rng), mode)?;
        values.push(elbo_term(x, &path, model, mode)?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}

/// Greedy hard path: zero noise at every boundary.
pub fn greedy_path(model: &Model, x: &Sequence) -> Result<LatentPath> {
    let tau = Temperature::new(1.0)?;
    Ok(model
        .inf
        .sample_posterior_path(x, tau, Noise::Zero, SampleMode::HardSt)?
        .hard)
}

/// `log q` of `path` from a cached posterior table.
pub fn cached_log_q(table: &Tensor, path: &LatentPath, max_dur: usize) -> f64 {
    path_log_prob(table, path, max_dur)
}

/// Result of [`audit_gradients`].
#[derive(Clone, Debug, Serialize)]
pub struct GradientAudit {
    /// θ under hard-ST (exact derivative of the hard-path ELBO).
    pub theta_hard: f64,
    /// θ under the relaxed estimator.
    pub theta_relaxed: f64,
    /// φ under the relaxed estimator.
    pub phi_relaxed: f64,
    pub entries_checked: usize,
}

impl GradientAudit {
    pub fn max_rel_error(&self) -> f64 {
        self.theta_hard.max(self.theta_relaxed).max(self.phi_relaxed)
    }
}

/// Compares tape gradients of one sequence's ELBO with central differences,
/// holding the Gumbel noise fixed.
///
/// Straight-through gradients for φ are not derivatives of the hard-path
/// value, so φ is audited under the relaxed estimator, where they are.
pub fn audit_gradients(
    model: &Model,
    x: &Sequence,
    noise: &Tensor,
    tau: Temperature,
    step: f64,
) -> Result<GradientAudit> {
    let dims = model.dims();
    let no_self = model.gen.no_self_transition();
    let store = model.to_store();
    let check = |mode: SampleMode, prefix: &'static str| -> Result<crate::numerics::GradCheck> {
        crate::numerics::grad_check(&store, step, |n| n.starts_with(prefix), |s, tape| {
            let m = Model::from_store(dims, s, no_self)?;
            let gv = m.gen.bind(tape);
            let iv = m.inf.bind(tape);
            let xs = inference::observation_vars(tape, x);
            let enc = inference::encode(tape, &iv, &xs, None);
            let summaries = inference::backward_summaries(tape, &iv, &xs, &enc.rows);
            let draw = inference::sample_on_tape(tape, &iv, &summaries, tau, Noise::Frozen(noise), mode)?;
            Ok(elbo_on_tape(tape, &gv, x, &draw))
        })
    };
    let th = check(SampleMode::HardSt, generative::PREFIX)?;
    let tr = check(SampleMode::Relaxed, generative::PREFIX)?;
    let pr = check(SampleMode::Relaxed, inference::PREFIX)?;
    Ok(GradientAudit {
        theta_hard: th.max_rel_error,
        theta_relaxed: tr.max_rel_error,
        phi_relaxed: pr.max_rel_error,
        entries_checked: th.entries_checked + tr.entries_checked + pr.entries_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::exact_log_likelihood;
    use rand::Rng;

    fn tiny_dims(k: usize, m_dur: usize) -> ModelDims {
        ModelDims {
            states: k,
            max_dur: m_dur,
            obs_dim: 2,
            hidden: 3,
            encoder: 3,
            summary: 3,
        }
    }

    fn random_seq(rng: &mut ChaCha8Rng, id: &str, steps: usize) -> Sequence {
        let data = (0..steps * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        Sequence::new(id, steps, 2, data).unwrap()
    }

    fn tau(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.5)).unwrap();
        let mut g = Gradients::default();
        g.insert("w".into(), Tensor::scalar(1.0));
        let cfg = AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut st = OptimizerState::new();
        adam_step(&mut [&mut store], &g, &mut st, &cfg).unwrap();
        let moved = 0.5 - store.expect("w").item();
        assert!((moved - 0.001).abs() < 1e-10, "{moved}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::vector(vec![0.3, -2.0])).unwrap();
        let before = store.clone();
        let mut g = Gradients::default();
        g.insert("w".into(), Tensor::vector(vec![0.0, 0.0]));
        let mut st = OptimizerState::new();
        let cfg = TrainConfig::with_dims(1, 1, 1, 1, 1).adam();
        for _ in 0..50 {
            adam_step(&mut [&mut store], &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut g = Gradients::default();
        g.insert("a".into(), Tensor::vector(vec![3.0, 4.0]));
        g.insert("b".into(), Tensor::scalar(12.0));
        let orig = g.clone();
        let norm = clip_gradients(&mut g, 1.0);
        assert!((norm - 13.0).abs() < 1e-12);
        assert!((g.norm() - 1.0).abs() < 1e-12);
        for (name, t) in g.iter() {
            for (a, b) in t.data().iter().zip(orig.get(name).unwrap().data()) {
                assert!((a * 13.0 - b).abs() < 1e-12);
            }
        }
        let mut small = orig.clone();
        clip_gradients(&mut small, 100.0);
        assert_eq!(small, orig);
    }

    #[test]
    fn temperature_schedule_endpoints() {
        let mut c = TrainConfig::with_dims(1, 1, 1, 1, 1);
        c.tau_start = 0.15;
        c.tau_end = 0.01;
        c.iterations = 100;
        assert_eq!(anneal_temperature(0, &c), 0.15);
        assert!((anneal_temperature(100, &c) - 0.01).abs() < 1e-15);
        assert_eq!(anneal_temperature(500, &c), 0.01);
        let mid = anneal_temperature(50, &c);
        assert!((mid - (0.15f64 * 0.01).sqrt()).abs() < 1e-12);
        c.tau_start = 1e-4;
        c.tau_end = 1e-4;
        assert!((0..100).all(|s| anneal_temperature(s, &c) == 1e-4));
    }

    #[test]
    fn degenerate_elbo_is_exact_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::random(tiny_dims(1, 1), &mut rng).unwrap();
        let x = random_seq(&mut rng, "x", 5);
        let r = sequence_elbo(&model, &x, tau(0.3), Noise::Fresh(&mut rng), SampleMode::HardSt, None).unwrap();
        let exact = exact_log_likelihood(&x, &model.gen).unwrap();
        assert!((r.elbo - exact).abs() < 1e-10);
        let t = elbo_term(&x, &r.path, &model, SampleMode::HardSt).unwrap();
        assert!((t - exact).abs() < 1e-10);
    }

    #[test]
    fn elbo_term_reproduces_tape_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::random(tiny_dims(2, 3), &mut rng).unwrap();
        let x = random_seq(&mut rng, "x", 6);
        for mode in [SampleMode::HardSt, SampleMode::Relaxed] {
            let mut r1 = ChaCha8Rng::seed_from_u64(9);
            let r = sequence_elbo(&model, &x, tau(0.5), Noise::Fresh(&mut r1), mode, None).unwrap();
            let t = elbo_term(&x, &r.path, &model, mode).unwrap();
            assert!((r.elbo - t).abs() < 1e-10, "{mode}: {} vs {t}", r.elbo);
        }
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::random(tiny_dims(2, 2), &mut rng).unwrap();
        let x = random_seq(&mut rng, "x", 5);
        let y = random_seq(&mut rng, "y", 4);
        let opts = EstimatorOptions {
            tau: tau(0.4),
            mode: SampleMode::HardSt,
            samples: 1,
            bptt_chunk: None,
            iteration: 0,
        };
        let noise = |seed: u64| BatchNoise::Fresh(Box::new(ChaCha8Rng::seed_from_u64(seed)));
        let single = elbo_gradients(&model, vec![(&x, noise(1)), (&y, noise(2))], &opts).unwrap();
        let doubled = elbo_gradients(
            &model,
            vec![(&x, noise(1)), (&y, noise(2)), (&x, noise(1)), (&y, noise(2))],
            &opts,
        )
        .unwrap();
        assert!((single.mean_elbo - doubled.mean_elbo).abs() < 1e-12);
        for (name, g) in single.grads.iter() {
            for (a, b) in g.data().iter().zip(doubled.grads.get(name).unwrap().data()) {
                assert!((a - b).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn derived_streams_are_distinct_and_stable() {
        let a = derived_rng(5, Stream::Posterior, 1, 2).next_u64();
        assert_eq!(a, derived_rng(5, Stream::Posterior, 1, 2).next_u64());
        assert_ne!(a, derived_rng(5, Stream::Posterior, 2, 1).next_u64());
        assert_ne!(a, derived_rng(5, Stream::Batch, 1, 2).next_u64());
    }

    #[test]
    fn frozen_noise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::random(tiny_dims(2, 2), &mut rng).unwrap();
        let x = random_seq(&mut rng, "x", 4);
        let g = inference::gumbel_table(4, 4, &mut rng);
        let audit = audit_gradients(&model, &x, &g, tau(0.5), 1e-5).unwrap();
        assert!(audit.max_rel_error() < 1e-4, "{audit:?}");
    }

    #[test]
    fn degenerate_theta_gradient_is_likelihood_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::random(tiny_dims(1, 1), &mut rng).unwrap();
        let x = random_seq(&mut rng, "x", 5);
        let r = sequence_elbo(&model, &x, tau(0.3), Noise::Fresh(&mut rng), SampleMode::HardSt, None).unwrap();
        let report = crate::numerics::grad_check(model.gen.store(), 1e-5, |_| true, |s, tape| {
            let gen = crate::generative::GenerativeParams::from_store(model.gen.dims(), s)?;
            let gv = gen.bind(tape);
            let path = LatentPath {
                z: vec![0; 5],
                d: vec![1; 5],
            };
            let plan = generative::hard_plan(tape, gen.dims(), &path);
            Ok(generative::joint_log_prob_on_tape(tape, &gv, &x, &plan))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
        // the ELBO's θ gradient is the likelihood gradient
        let mut tape = Tape::new();
        let gv = model.gen.bind(&mut tape);
        let path = LatentPath {
            z: vec![0; 5],
            d: vec![1; 5],
        };
        let plan = generative::hard_plan(&mut tape, model.gen.dims(), &path);
        let ll = generative::joint_log_prob_on_tape(&mut tape, &gv, &x, &plan);
        let direct = tape.backward(ll).unwrap();
        for (name, g) in direct.iter() {
            let e = r.grads.get(name).unwrap();
            for (a, b) in g.data().iter().zip(e.data()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{name}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::with_dims(2, 2, 2, 2, 2);
        assert!(c.validate().is_ok());
        c.tau_end = 0.5;
        c.tau_start = 0.1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::with_dims(2, 2, 2, 2, 2);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
