use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use ssnn::checkpoint::{self, CheckpointMeta};
use ssnn::data::{
    generate_ssnn_dataset, io_write_atomic, read_dataset, separated_ground_truth, simulate_pendulum, write_dataset,
    Dataset, Format, NormStats,
};
use ssnn::eval::{evaluate, pca_features, r2_probe, stack_rows};
use ssnn::generative::{LatentPath, Sequence};
use ssnn::inference::{gumbel_table, Temperature};
use ssnn::model::{Model, ModelDims};
use ssnn::numerics::Tensor;
use ssnn::training::{audit_gradients, derived_rng, initial_model, train as fit, Stream, TrainHooks, TrainRecord};
use ssnn::{oracle as exact, SsnnError};

use crate::{CliError, Settings};

fn dataset_format(path: &Path, s: &Settings) -> Result<Format, CliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(Format::Csv),
        Some("bin") | Some("f32") => Ok(Format::RawF32),
        _ => s.format(),
    }
}

fn load_data(path: &Path, s: &Settings) -> Result<Dataset, CliError> {
    Ok(read_dataset(path, dataset_format(path, s)?)?)
}

/// Sequences scaled by the checkpoint's statistics, after a width check.
fn prepared(model: &Model, meta: &CheckpointMeta, data: &Dataset) -> Result<Vec<Sequence>, CliError> {
    let m = model.dims().obs_dim;
    if let Some(x) = data.sequences.iter().find(|x| x.dim() != m) {
        return Err(SsnnError::Dimension(format!(
            "sequence {} has m = {}, checkpoint expects m = {m}",
            x.id,
            x.dim()
        ))
        .into());
    }
    Ok(match &meta.norm {
        Some(n) => n.apply_all(&data.sequences)?,
        None => data.sequences.clone(),
    })
}

struct Checkpoints<'a> {
    dir: &'a Path,
    meta: CheckpointMeta,
}

impl TrainHooks for Checkpoints<'_> {
    fn on_record(&mut self, r: &TrainRecord) -> ssnn::Result<()> {
        if (r.iteration + 1) % 50 == 0 {
            eprintln!("iteration {} elbo {:.4} tau {:.4}", r.iteration + 1, r.mean_elbo, r.tau);
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, iteration: usize, model: &Model) -> ssnn::Result<()> {
        let meta = CheckpointMeta {
            iteration,
            ..self.meta.clone()
        };
        checkpoint::save(&self.dir.join(format!("checkpoint-{iteration:06}.ckpt")), model, &meta)
    }
}

pub fn train(s: &Settings, seed: u64, data: &Path, out: &Path) -> Result<(), CliError> {
    let config = s.train_config(seed)?;
    let ds = load_data(data, s)?;
    if ds.is_empty() {
        return Err(SsnnError::Schema(format!("{} holds no sequences", data.display())).into());
    }
    let norm = NormStats::compute(&ds.sequences)?;
    let xs = norm.apply_all(&ds.sequences)?;
    std::fs::create_dir_all(out)?;
    let model = initial_model(&config, &xs)?;
    let mut meta = CheckpointMeta::for_model(&model);
    meta.config = Some(config.clone());
    meta.norm = Some(norm);
    let mut hooks = Checkpoints {
        dir: out,
        meta: meta.clone(),
    };
    let (model, history) = fit(&xs, model, &config, &mut hooks)?;
    meta.iteration = config.iterations;
    io_write_atomic(&out.join("history.jsonl"), history.to_jsonl().as_bytes())?;
    checkpoint::save(&out.join("model.ckpt"), &model, &meta)?;
    if let Some(last) = history.records.last() {
        println!("trained {} iterations, final mean ELBO {:.6}", config.iterations, last.mean_elbo);
    }
    Ok(())
}

pub fn sample(s: &Settings, seed: u64, ckpt: &Path, out: &Path, steps: Option<usize>) -> Result<(), CliError> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let count: usize = s.get("data.count")?;
    let steps = match steps {
        Some(t) => t,
        None => s.get("ssnn.steps")?,
    };
    let mut seqs = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = derived_rng(seed, Stream::Data, i as u64, 0);
        let (mut x, _) = model.gen.sample_sequence(steps, format!("s{i}"), &mut rng)?;
        if let Some(n) = &meta.norm {
            let m = x.dim();
            for (j, v) in x.values_mut().iter_mut().enumerate() {
                *v = *v * n.std[j % m] + n.mean[j % m];
            }
        }
        seqs.push(x);
    }
    write_dataset(&Dataset::new(seqs)?, out, dataset_format(out, s)?)?;
    println!("wrote {count} sequences of {steps} steps to {}", out.display());
    Ok(())
}

pub struct EvalArgs {
    pub out: Option<PathBuf>,
    pub states: Option<PathBuf>,
    pub require_truth: bool,
    pub timing: bool,
}

/// `seq_id,t,phi,omega` rows grouped per sequence, in file order.
fn read_states(path: &Path) -> Result<Vec<(String, Vec<[f64; 2]>)>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut out: Vec<(String, Vec<[f64; 2]>)> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| SsnnError::Parse {
            location: format!("{} line {}", path.display(), i + 1),
            message: msg.to_string(),
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad("expected seq_id,t,phi,omega").into());
        }
        let phi: f64 = cols[2].parse().map_err(|_| bad("phi is not a number"))?;
        let omega: f64 = cols[3].parse().map_err(|_| bad("omega is not a number"))?;
        match out.last_mut() {
            Some((id, rows)) if id == cols[0] => rows.push([phi, omega]),
            _ => out.push((cols[0].to_string(), vec![[phi, omega]])),
        }
    }
    Ok(out)
}

const PROBE_TARGETS: [&str; 3] = ["sin_phi", "cos_phi", "omega"];

/// R² of the encoder's `ĥ` rows and of a two-component PCA of the
/// observations, each against `sin φ`, `cos φ` and `ω`.
fn probe(model: &Model, xs: &[Sequence], states: &Path) -> Result<Vec<(String, f64)>, CliError> {
    let st = read_states(states)?;
    let mut feats = Vec::new();
    let mut raw = Vec::new();
    let mut targets = Vec::new();
    for x in xs {
        let rows = st
            .iter()
            .find(|(id, _)| *id == x.id)
            .map(|(_, r)| r)
            .ok_or_else(|| SsnnError::Schema(format!("no states for sequence {}", x.id)))?;
        if rows.len() != x.len() {
            return Err(SsnnError::Schema(format!(
                "sequence {} has {} steps but {} state rows",
                x.id,
                x.len(),
                rows.len()
            ))
            .into());
        }
        feats.push(model.inf.encode_bidirectional(x)?);
        raw.push(Tensor::matrix(x.len(), x.dim(), x.values().to_vec()));
        let y = rows.iter().flat_map(|[p, w]| [p.sin(), p.cos(), *w]).collect();
        targets.push(Tensor::matrix(x.len(), 3, y));
    }
    let y = stack_rows(&targets)?;
    let enc = r2_probe(&stack_rows(&feats)?, &y)?;
    let pca = r2_probe(&pca_features(&stack_rows(&raw)?, 2)?, &y)?;
    for w in enc.warnings.iter().chain(&pca.warnings) {
        eprintln!("warning: {w}");
    }
    let mut out = Vec::new();
    for (name, fit) in [("encoder", &enc), ("pca2", &pca)] {
        for (t, r) in PROBE_TARGETS.iter().zip(&fit.r2) {
            out.push((format!("{name}/{t}"), *r));
        }
    }
    Ok(out)
}

pub fn eval(s: &Settings, seed: u64, ckpt: &Path, data: &Path, args: &EvalArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let mut opts = s.eval_options(seed)?;
    opts.require_truth = args.require_truth;
    let (model, meta) = checkpoint::load(ckpt)?;
    let ds = load_data(data, s)?;
    let xs = prepared(&model, &meta, &ds)?;
    let mut report = evaluate(&model, &xs, &opts)?;
    if let Some(path) = &args.states {
        report.r2.extend(probe(&model, &xs, path)?);
    }
    if args.timing {
        report.runtime_secs = Some(started.elapsed().as_secs_f64());
    }
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => {
            io_write_atomic(path, json.as_bytes())?;
            print!("{}", report.to_table());
        }
        None => print!("{json}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleLine<'a> {
    id: &'a str,
    log_likelihood: f64,
    map_log_prob: f64,
    map_path: LatentPath,
}

pub fn oracle(s: &Settings, ckpt: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let ds = load_data(data, s)?;
    let xs = prepared(&model, &meta, &ds)?;
    let mut text = String::new();
    for x in &xs {
        let ll = exact::exact_log_likelihood(x, &model.gen)?;
        let (path, score) = exact::map_segmentation_scored(x, &model.gen)?;
        let line = OracleLine {
            id: &x.id,
            log_likelihood: ll,
            map_log_prob: score,
            map_path: path,
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    match out {
        Some(p) => io_write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

/// `data.csv` → `data.states.csv`.
pub fn states_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    path.with_file_name(format!("{stem}.states.csv"))
}

pub fn gen_pendulum(s: &Settings, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = s.pendulum_config()?;
    let count: usize = s.get("data.count")?;
    let mut seqs = Vec::with_capacity(count);
    let mut states = String::from("seq_id,t,phi,omega\n");
    for i in 0..count {
        let mut rng = derived_rng(seed, Stream::Data, i as u64, 0);
        let tr = simulate_pendulum(&cfg, format!("p{i}"), &mut rng)?;
        for (t, (p, w)) in tr.phi.iter().zip(&tr.omega).enumerate() {
            writeln!(states, "{},{t},{p},{w}", tr.x.id).expect("write to string");
        }
        seqs.push(tr.x);
    }
    write_dataset(&Dataset::new(seqs)?, out, dataset_format(out, s)?)?;
    io_write_atomic(&states_path(out), states.as_bytes())?;
    println!("wrote {count} pendulum sequences to {}", out.display());
    Ok(())
}

pub fn gen_ssnn(s: &Settings, seed: u64, out: &Path) -> Result<(), CliError> {
    let dims = s.ssnn_dims()?;
    let count: usize = s.get("data.count")?;
    let steps: usize = s.get("ssnn.steps")?;
    let separation: f64 = s.get("ssnn.separation")?;
    let mut rng = derived_rng(seed, Stream::Data, 0, 0);
    let truth = separated_ground_truth(dims, separation, &mut rng)?;
    let ds = generate_ssnn_dataset(&truth, count, steps, &mut rng)?;
    write_dataset(&ds, out, dataset_format(out, s)?)?;
    println!("wrote {count} sequences of {steps} steps to {}", out.display());
    Ok(())
}

pub struct GradcheckArgs {
    pub steps: usize,
    pub states: usize,
    pub max_dur: usize,
    pub obs_dim: usize,
    pub hidden: usize,
    pub tau: f64,
    pub tolerance: f64,
}

#[derive(Serialize)]
struct GradcheckLine {
    theta_hard: f64,
    theta_relaxed: f64,
    phi_relaxed: f64,
    max_rel_error: f64,
    entries_checked: usize,
    passed: bool,
}

pub fn gradcheck(g: &GradcheckArgs, seed: u64) -> Result<(), CliError> {
    if g.steps == 0 || g.states == 0 || g.max_dur == 0 || g.obs_dim == 0 || g.hidden == 0 {
        return Err(CliError::Usage("gradcheck sizes must be >= 1".into()));
    }
    let tau = Temperature::new(g.tau).map_err(|e| CliError::Usage(e.to_string()))?;
    let dims = ModelDims {
        states: g.states,
        max_dur: g.max_dur,
        obs_dim: g.obs_dim,
        hidden: g.hidden,
        encoder: g.hidden,
        summary: g.hidden,
    };
    let mut rng = derived_rng(seed, Stream::Init, 0, 0);
    let model = Model::random(dims, &mut rng)?;
    let data = (0..g.steps * g.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Sequence::new("gradcheck", g.steps, g.obs_dim, data)?;
    let noise = gumbel_table(g.steps, g.states * g.max_dur, &mut rng);
    let audit = audit_gradients(&model, &x, &noise, tau, 1e-5)?;
    let line = GradcheckLine {
        theta_hard: audit.theta_hard,
        theta_relaxed: audit.theta_relaxed,
        phi_relaxed: audit.phi_relaxed,
        max_rel_error: audit.max_rel_error(),
        entries_checked: audit.entries_checked,
        passed: audit.max_rel_error() < g.tolerance,
    };
    println!("{}", serde_json::to_string(&line)?);
    if line.passed {
        Ok(())
    } else {
        Err(SsnnError::Diagnostic(format!(
            "max relative gradient error {} exceeds {}",
            line.max_rel_error, g.tolerance
        ))
        .into())
    }
}
