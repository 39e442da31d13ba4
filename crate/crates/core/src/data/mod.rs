//! Synthetic data, dataset files, normalisation, chunking and splits.

mod io;
mod pendulum;

pub use io::{read_dataset, truth_sidecar_path, write_atomic as io_write_atomic, write_dataset, Format};
pub use pendulum::{simulate_pendulum, Observation, PendulumConfig, PendulumTrace, Torque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::generative::{GenDims, GenerativeParams, Sequence};
use crate::numerics::Tensor;

/// Per-dimension mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Pooled statistics over every step of every sequence. Dimensions with
    /// zero spread keep a unit scale.
    pub fn compute(sequences: &[Sequence]) -> Result<Self> {
        let m = check_dims(sequences)?;
        let n: usize = sequences.iter().map(Sequence::len).sum();
        if n == 0 {
            return Err(SsnnError::contract("normalisation needs at least one step"));
        }
        let mut mean = vec![0.0; m];
        for x in sequences {
            for row in x.rows() {
                for (a, v) in mean.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut var = vec![0.0; m];
        for x in sequences {
            for row in x.rows() {
                for j in 0..m {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, x: &Sequence) -> Result<Sequence> {
        if x.dim() != self.mean.len() {
            return Err(SsnnError::Dimension(format!(
                "sequence {} has m = {}, statistics have {}",
                x.id,
                x.dim(),
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        let m = x.dim();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let j = i % m;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }

    pub fn apply_all(&self, xs: &[Sequence]) -> Result<Vec<Sequence>> {
        xs.iter().map(|x| self.apply(x)).collect()
    }
}

/// Common observation width of `sequences` (0 when empty).
pub fn check_dims(sequences: &[Sequence]) -> Result<usize> {
    let m = sequences.first().map_or(0, Sequence::dim);
    if let Some(x) = sequences.iter().find(|x| x.dim() != m) {
        return Err(SsnnError::Schema(format!(
            "sequence {} has m = {}, others have {m}",
            x.id,
            x.dim()
        )));
    }
    Ok(m)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub stats: Option<NormStats>,
}

impl Dataset {
    pub fn new(sequences: Vec<Sequence>) -> Result<Self> {
        check_dims(&sequences)?;
        Ok(Dataset {
            sequences,
            stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.sequences.first().map_or(0, Sequence::dim)
    }

    /// Normalised copy using statistics of this dataset.
    pub fn normalized(&self) -> Result<Dataset> {
        let stats = NormStats::compute(&self.sequences)?;
        Ok(Dataset {
            sequences: stats.apply_all(&self.sequences)?,
            stats: Some(stats),
        })
    }
}

/// A ground-truth model whose states emit around well-separated means.
///
/// State means sit on a circle in the first two observation dimensions (on a
/// line when `m = 1`) with adjacent means `separation` apart; emissions have
/// unit variance and a weak recurrent perturbation. Durations are peaked
/// around state-specific centres and self-transitions are rare.
pub fn separated_ground_truth<R: Rng + ?Sized>(
    dims: GenDims,
    separation: f64,
    rng: &mut R,
) -> Result<GenerativeParams> {
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(SsnnError::contract(format!("separation must be >= 0, got {separation}")));
    }
    let mut p = GenerativeParams::random(dims, rng)?;
    let (k, big_m, m, h) = (dims.states, dims.max_dur, dims.obs_dim, dims.hidden);

    let init = vec![1.0 / k as f64; k];
    p.set_init_probs(&init)?;
    let trans: Vec<f64> = if k == 1 {
        vec![1.0]
    } else {
        (0..k)
            .flat_map(|i| (0..k).map(move |j| if i == j { 0.05 } else { 0.95 / (k - 1) as f64 }))
            .collect()
    };
    p.set_trans_probs(&trans)?;
    let width = (big_m as f64 / 4.0).max(0.5);
    let mut dur = Vec::with_capacity(k * big_m);
    for s in 0..k {
        let lo = big_m as f64 / 3.0;
        let centre = if k == 1 { big_m as f64 * 0.6 } else { lo + (big_m as f64 - lo) * s as f64 / (k - 1) as f64 };
        let w: Vec<f64> = (1..=big_m)
            .map(|d| (-(d as f64 - centre).powi(2) / (2.0 * width * width)).exp() + 1e-3)
            .collect();
        let total: f64 = w.iter().sum();
        dur.extend(w.iter().map(|v| v / total));
    }
    p.set_dur_probs(&dur)?;

    let mut means = vec![0.0; k * m];
    for s in 0..k {
        if m == 1 {
            means[s] = separation * s as f64;
        } else if k > 1 {
            let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
            let angle = 2.0 * std::f64::consts::PI * s as f64 / k as f64;
            means[s * m] = radius * angle.cos();
            means[s * m + 1] = radius * angle.sin();
        }
    }
    p.set_tensor("b_mu", Tensor::matrix(k, m, means))?;
    let w_mu: Vec<f64> = p.tensor("w_mu").data().iter().map(|v| 0.1 * v).collect();
    p.set_tensor("w_mu", Tensor::new(vec![k, m, h], w_mu)?)?;
    p.set_tensor("w_sigma", Tensor::zeros(&[k, m, h]))?;
    p.set_tensor("b_sigma", Tensor::zeros(&[k, m]))?;
    Ok(p)
}

/// Ancestral samples from `params`, each with its true path attached.
pub fn generate_ssnn_dataset<R: Rng + ?Sized>(
    params: &GenerativeParams,
    count: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let width = count.max(1).to_string().len();
    let sequences = (0..count)
        .map(|i| {
            params
                .sample_sequence(steps, format!("seq{i:0width$}"), rng)
                .map(|(x, _)| x)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(sequences)
}

/// A window of a longer sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub sequence: Sequence,
    pub parent: String,
    pub offset: usize,
}

/// Non-overlapping windows of at most `chunk_len` steps, in order.
pub fn chunk_sequences(dataset: &Dataset, chunk_len: usize) -> Result<Vec<Chunk>> {
    if chunk_len == 0 {
        return Err(SsnnError::contract("chunk length must be >= 1"));
    }
    let mut out = Vec::new();
    for x in &dataset.sequences {
        let mut offset = 0;
        while offset < x.len() {
            let len = chunk_len.min(x.len() - offset);
            out.push(Chunk {
                sequence: x.window(format!("{}@{offset}", x.id), offset, len),
                parent: x.id.clone(),
                offset,
            });
            offset += len;
        }
    }
    Ok(out)
}

/// One leave-one-out fold, with statistics from its training part.
#[derive(Clone, Debug)]
pub struct Split {
    pub index: usize,
    pub train: Vec<Sequence>,
    pub test: Sequence,
    pub stats: NormStats,
}

impl Split {
    /// `(train, test)` normalised with the training statistics.
    pub fn normalized(&self) -> Result<(Vec<Sequence>, Sequence)> {
        Ok((self.stats.apply_all(&self.train)?, self.stats.apply(&self.test)?))
    }
}

/// Every fold that holds out one sequence.
pub fn leave_one_out_splits(dataset: &Dataset) -> Result<impl Iterator<Item = Result<Split>> + '_> {
    if dataset.len() < 2 {
        return Err(SsnnError::contract(format!(
            "leave-one-out needs >= 2 sequences, got {}",
            dataset.len()
        )));
    }
    Ok((0..dataset.len()).map(move |i| {
        let train: Vec<Sequence> = dataset
            .sequences
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, x)| x.clone())
            .collect();
        let stats = NormStats::compute(&train)?;
        Ok(Split {
            index: i,
            train,
            test: dataset.sequences[i].clone(),
            stats,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(id: &str, steps: usize, offset: f64) -> Sequence {
        let data = (0..steps * 2).map(|i| offset + i as f64 * 0.37 % 1.3).collect();
        Sequence::new(id, steps, 2, data).unwrap()
    }

    #[test]
    fn chunking_splits_and_reassembles() {
        let ds = Dataset::new(vec![seq("a", 10, 0.0)]).unwrap();
        let chunks = chunk_sequences(&ds, 4).unwrap();
        let lens: Vec<usize> = chunks.iter().map(|c| c.sequence.len()).collect();
        assert_eq!(lens, vec![4, 4, 2]);
        let joined: Vec<f64> = chunks.iter().flat_map(|c| c.sequence.values().to_vec()).collect();
        assert_eq!(joined, ds.sequences[0].values());
        assert_eq!(chunks[2].offset, 8);
        let whole = chunk_sequences(&ds, 50).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].sequence.values(), ds.sequences[0].values());
    }

    #[test]
    fn normalised_training_data_is_standard() {
        let ds = Dataset::new(vec![seq("a", 7, 1.0), seq("b", 5, -2.0)]).unwrap();
        let n = ds.normalized().unwrap();
        let stats = NormStats::compute(&n.sequences).unwrap();
        assert!(stats.mean.iter().all(|v| v.abs() < 1e-10));
        assert!(stats.std.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn leave_one_out_covers_every_sequence_once() {
        let ds = Dataset::new(vec![seq("a", 4, 0.0), seq("b", 4, 3.0), seq("c", 4, -1.0)]).unwrap();
        let splits: Vec<Split> = leave_one_out_splits(&ds).unwrap().map(|s| s.unwrap()).collect();
        assert_eq!(splits.len(), 3);
        let ids: Vec<&str> = splits.iter().map(|s| s.test.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        for s in &splits {
            assert_eq!(s.train.len(), 2);
            assert_eq!(s.stats, NormStats::compute(&s.train).unwrap());
        }
        assert!(leave_one_out_splits(&Dataset::new(vec![seq("a", 4, 0.0)]).unwrap()).is_err());
    }

    #[test]
    fn generated_datasets_repeat_under_a_seed() {
        let dims = GenDims {
            states: 2,
            max_dur: 3,
            obs_dim: 2,
            hidden: 2,
        };
        let p = GenerativeParams::random(dims, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = generate_ssnn_dataset(&p, 3, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = generate_ssnn_dataset(&p, 3, 10, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.sequences.iter().all(|x| x.truth.is_some()));
        assert!(generate_ssnn_dataset(&p, 0, 10, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn occupancy_matches_semi_markov_stationary_law() {
        // two states that alternate; durations 1..=3 with state-specific laws
        let dims = GenDims {
            states: 2,
            max_dur: 3,
            obs_dim: 1,
            hidden: 1,
        };
        let mut p = GenerativeParams::zeros(dims).unwrap();
        p.set_trans_probs(&[0.2, 0.8, 0.6, 0.4]).unwrap();
        p.set_dur_probs(&[0.5, 0.3, 0.2, 0.1, 0.1, 0.8]).unwrap();
        let ds = generate_ssnn_dataset(&p, 100, 400, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // embedded-chain stationary law π ∝ (0.6, 0.8); occupancy ∝ π_k · E[d_k]
        let mean_dur = [0.5 + 0.6 + 0.6, 0.1 + 0.2 + 2.4];
        let w = [0.6 * mean_dur[0], 0.8 * mean_dur[1]];
        let expected0 = w[0] / (w[0] + w[1]);
        let mut per_seq = Vec::new();
        for x in &ds.sequences {
            let z = &x.truth.as_ref().unwrap().z;
            per_seq.push(z.iter().filter(|&&s| s == 0).count() as f64 / z.len() as f64);
        }
        let n = per_seq.len() as f64;
        let mean = per_seq.iter().sum::<f64>() / n;
        let sd = (per_seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        // generous: per-sequence start-up bias is small at T = 400
        assert!((mean - expected0).abs() < 3.0 * sd / n.sqrt() + 0.005, "{mean} vs {expected0}");
    }
}
