//! Evaluation: permutation-matched label error, linear probes and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::generative::{LatentPath, Sequence};
use crate::inference::{SampleMode, Temperature};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::oracle;
use crate::training::{derived_rng, greedy_path, mean_elbo, Stream};

pub const REPORT_VERSION: u32 = 1;

/// Maximum-weight one-to-one assignment of rows to columns.
///
/// Returns `col[r]` for every row (`None` when the row is left unmatched
/// because there are more rows than columns).
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    // square cost matrix, padded with zeros; minimise the negated weights
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    // Kuhn-Munkres with potentials, 1-based internally
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Fraction of frames whose label differs from the truth after the best
/// one-to-one relabelling of `pred`.
pub fn label_error(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(SsnnError::contract(format!(
            "label sequences differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut confusion = vec![vec![0.0; kt]; kp];
    for (&a, &b) in pred.iter().zip(truth) {
        confusion[a][b] += 1.0;
    }
    let assignment = max_weight_assignment(&confusion);
    let matched: f64 = assignment
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| confusion[r][c]))
        .sum();
    Ok(1.0 - matched / pred.len() as f64)
}

/// [`label_error`] on the state labels of two paths.
pub fn segmentation_error(pred: &LatentPath, truth: &LatentPath) -> Result<f64> {
    label_error(&pred.z, &truth.z)
}

/// Goodness of fit of a linear probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub r2: Vec<f64>,
    pub warnings: Vec<String>,
}

/// OLS with intercept from each row of `features` to each column of `targets`.
pub fn r2_probe(features: &Tensor, targets: &Tensor) -> Result<ProbeFit> {
    let (n, p) = (features.shape()[0], features.shape()[1]);
    let (nt, r) = (targets.shape()[0], targets.shape()[1]);
    if n != nt {
        return Err(SsnnError::contract(format!(
            "features have {n} rows, targets {nt}"
        )));
    }
    if n <= p + 1 {
        return Err(SsnnError::contract(format!(
            "probe needs more than p + 1 = {} rows, got {n}",
            p + 1
        )));
    }
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { features.data()[i * p + j - 1] });
    let xtx = x.transpose() * &x;
    let chol = xtx.clone().cholesky().or_else(|| {
        let ridge = &xtx + DMatrix::identity(p + 1, p + 1) * 1e-8;
        ridge.cholesky()
    });
    let mut fit = ProbeFit {
        r2: Vec::with_capacity(r),
        warnings: Vec::new(),
    };
    for c in 0..r {
        let y = DVector::from_fn(n, |i, _| targets.data()[i * r + c]);
        let mean = y.mean();
        let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        if ss_tot == 0.0 {
            fit.warnings.push(format!("target column {c} is constant; R² set to 0"));
            fit.r2.push(0.0);
            continue;
        }
        let xty = x.transpose() * &y;
        let beta = match &chol {
            Some(ch) => ch.solve(&xty),
            None => x
                .clone()
                .svd(true, true)
                .solve(&y, 1e-12)
                .map_err(|e| SsnnError::Diagnostic(format!("least squares failed: {e}")))?,
        };
        let resid = &y - &x * beta;
        let ss_res: f64 = resid.iter().map(|v| v * v).sum();
        fit.r2.push(1.0 - ss_res / ss_tot);
    }
    Ok(fit)
}

/// Projections of the rows of `x` onto its top `k` principal directions.
pub fn pca_features(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    if n == 0 || k == 0 || k > m {
        return Err(SsnnError::contract(format!("PCA with k = {k} on a {n}×{m} matrix")));
    }
    let mat = DMatrix::from_row_slice(n, m, x.data());
    let mean = mat.row_mean();
    let centered = DMatrix::from_fn(n, m, |i, j| mat[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        for &c in order.iter().take(k) {
            let mut s = 0.0;
            for j in 0..m {
                s += centered[(i, j)] * eig.eigenvectors[(j, c)];
            }
            out.push(s);
        }
    }
    Ok(Tensor::matrix(n, k, out))
}

/// Stacks the rows of several `[T_i, c]` matrices.
pub fn stack_rows(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |t| t.shape()[1]);
    if parts.iter().any(|t| t.shape()[1] != cols) {
        return Err(SsnnError::Dimension("matrices to stack differ in width".into()));
    }
    let rows = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::matrix(rows, cols, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Posterior draws per sequence for the ELBO estimate.
    pub elbo_samples: usize,
    pub tau: f64,
    pub mode: SampleMode,
    pub seed: u64,
    /// Fail if a sequence lacks a true path.
    pub require_truth: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            elbo_samples: 100,
            tau: 0.01,
            mode: SampleMode::HardSt,
            seed: 0,
            require_truth: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub id: String,
    pub steps: usize,
    /// `map` (exact) or `greedy` (posterior argmax).
    pub decoder: String,
    pub path: LatentPath,
    pub error_rate: Option<f64>,
    pub elbo: f64,
    pub elbo_std_error: f64,
    pub oracle_log_likelihood: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub sequences: usize,
    pub error_rate_mean: Option<f64>,
    pub error_rate_std: Option<f64>,
    pub elbo_mean: f64,
    pub oracle_log_likelihood_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub sequences: Vec<SequenceReport>,
    pub aggregate: Aggregate,
    /// R² per probe target, keyed `<features>/<target>`.
    #[serde(default)]
    pub r2: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_secs: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

impl Aggregate {
    pub fn from_sequences(seqs: &[SequenceReport]) -> Aggregate {
        let errors: Vec<f64> = seqs.iter().filter_map(|s| s.error_rate).collect();
        let (em, es) = if errors.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&errors);
            (Some(m), Some(s))
        };
        let elbos: Vec<f64> = seqs.iter().map(|s| s.elbo).collect();
        let oracle: Option<Vec<f64>> = seqs.iter().map(|s| s.oracle_log_likelihood).collect();
        Aggregate {
            sequences: seqs.len(),
            error_rate_mean: em,
            error_rate_std: es,
            elbo_mean: if elbos.is_empty() { 0.0 } else { mean_std(&elbos).0 },
            oracle_log_likelihood_mean: oracle.filter(|v| !v.is_empty()).map(|v| mean_std(&v).0),
        }
    }
}

fn within_guard(model: &Model, x: &Sequence) -> bool {
    let d = model.dims();
    d.states.saturating_mul(d.max_dur).saturating_mul(x.len()) <= oracle::DP_GUARD
}

/// Decodes, scores and bounds every sequence.
pub fn evaluate(model: &Model, sequences: &[Sequence], options: &EvalOptions) -> Result<EvalReport> {
    let tau = Temperature::new(options.tau)?;
    let m = model.dims().obs_dim;
    let mut out = Vec::with_capacity(sequences.len());
    for (i, x) in sequences.iter().enumerate() {
        if x.dim() != m {
            return Err(SsnnError::Dimension(format!(
                "sequence {} has m = {}, model expects {m}",
                x.id,
                x.dim()
            )));
        }
        if options.require_truth && x.truth.is_none() {
            return Err(SsnnError::Schema(format!(
                "sequence {} has no true path but an error rate was requested",
                x.id
            )));
        }
        let exact = within_guard(model, x);
        let (path, decoder, oracle_ll) = if exact {
            let path = oracle::map_segmentation(x, &model.gen)?;
            (path, "map", Some(oracle::exact_log_likelihood(x, &model.gen)?))
        } else {
            (greedy_path(model, x)?, "greedy", None)
        };
        let error_rate = match &x.truth {
            Some(t) => Some(segmentation_error(&path, t)?),
            None => None,
        };
        let mut rng = derived_rng(options.seed, Stream::Eval, i as u64, 0);
        let (elbo, se) = mean_elbo(model, x, tau, options.mode, options.elbo_samples.max(1), &mut rng)?;
        out.push(SequenceReport {
            id: x.id.clone(),
            steps: x.len(),
            decoder: decoder.into(),
            path,
            error_rate,
            elbo,
            elbo_std_error: se,
            oracle_log_likelihood: oracle_ll,
        });
    }
    Ok(EvalReport {
        report_version: REPORT_VERSION,
        aggregate: Aggregate::from_sequences(&out),
        sequences: out,
        r2: BTreeMap::new(),
        runtime_secs: None,
    })
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let fmt_opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |v| format!("{v:.prec$}"));
        let header = ["sequence", "T", "decoder", "error", "elbo", "elbo_se", "log_lik"];
        let mut rows: Vec<Vec<String>> = self
            .sequences
            .iter()
            .map(|s| {
                vec![
                    s.id.clone(),
                    s.steps.to_string(),
                    s.decoder.clone(),
                    fmt_opt(s.error_rate, 4),
                    format!("{:.4}", s.elbo),
                    format!("{:.4}", s.elbo_std_error),
                    fmt_opt(s.oracle_log_likelihood, 4),
                ]
            })
            .collect();
        let a = &self.aggregate;
        let err = match (a.error_rate_mean, a.error_rate_std) {
            (Some(m), Some(s)) => format!("{m:.4}±{s:.4}"),
            _ => "-".into(),
        };
        rows.push(vec![
            "mean".into(),
            String::new(),
            String::new(),
            err,
            format!("{:.4}", a.elbo_mean),
            String::new(),
            fmt_opt(a.oracle_log_likelihood_mean, 4),
        ]);
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r[c].chars().count())
                    .chain([header[c].len()])
                    .max()
                    .unwrap()
            })
            .collect();
        let mut s = String::new();
        let line = |s: &mut String, cells: Vec<&str>| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, header.to_vec());
        for r in &rows {
            line(&mut s, r.iter().map(String::as_str).collect());
        }
        for (k, v) in &self.r2 {
            let _ = writeln!(s, "R² {k}: {v:.4}");
        }
        s
    }
}
