//! Data-dependent starting points for the emission heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsnnError};
use crate::generative::Sequence;
use crate::model::Model;
use crate::numerics::Tensor;

/// How emission offsets are set before training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmissionInit {
    /// Keep the random draw.
    Random,
    /// Centre each state on a k-means cluster of the training frames.
    #[default]
    Kmeans,
}

impl std::str::FromStr for EmissionInit {
    type Err = SsnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(EmissionInit::Random),
            "kmeans" => Ok(EmissionInit::Kmeans),
            _ => Err(SsnnError::contract(format!(
                "unknown emission init {s:?} (expected random or kmeans)"
            ))),
        }
    }
}

impl std::fmt::Display for EmissionInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmissionInit::Random => "random",
            EmissionInit::Kmeans => "kmeans",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    /// `k × m` row-major centroids.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(row: &[f64], centroids: &[f64], m: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks_exact(m).enumerate() {
        let d = sq_dist(row, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Lloyd's algorithm from a k-means++ seeding.
pub fn kmeans<R: Rng + ?Sized>(rows: &[&[f64]], k: usize, max_iter: usize, rng: &mut R) -> Result<Clustering> {
    if k == 0 || rows.len() < k {
        return Err(SsnnError::contract(format!(
            "k-means needs 1 <= k <= {} rows, got k = {k}",
            rows.len()
        )));
    }
    let m = rows[0].len();
    let mut centroids = Vec::with_capacity(k * m);
    centroids.extend_from_slice(rows[rng.random_range(0..rows.len())]);
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[..m])).collect();
    while centroids.len() < k * m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = rows.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..rows.len())
        };
        let start = centroids.len();
        centroids.extend_from_slice(rows[pick]);
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &centroids[start..]));
        }
    }
    let mut labels = vec![usize::MAX; rows.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (l, r) in labels.iter_mut().zip(rows) {
            let c = nearest(r, &centroids, m);
            changed |= *l != c;
            *l = c;
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * m];
        let mut counts = vec![0usize; k];
        for (&l, r) in labels.iter().zip(rows) {
            counts[l] += 1;
            for (s, v) in sums[l * m..(l + 1) * m].iter_mut().zip(r.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their previous centre
            if counts[c] > 0 {
                for j in 0..m {
                    centroids[c * m + j] = sums[c * m + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(Clustering { centroids, labels })
}

/// Sets each state's emission mean offset to a cluster centre of the pooled
/// frames and its log-variance offset to the within-cluster log-variance.
/// The emission weights start at zero so each state first emits its cluster.
pub fn init_emissions<R: Rng + ?Sized>(model: &mut Model, data: &[Sequence], rng: &mut R) -> Result<()> {
    let d = model.dims();
    let rows: Vec<&[f64]> = data.iter().flat_map(|x| x.rows()).collect();
    if rows.iter().any(|r| r.len() != d.obs_dim) {
        return Err(SsnnError::Dimension("frame width differs from the model".into()));
    }
    let cl = kmeans(&rows, d.states, 100, rng)?;
    let m = d.obs_dim;
    let mut var = vec![0.0; d.states * m];
    let mut counts = vec![0usize; d.states];
    for (&l, r) in cl.labels.iter().zip(&rows) {
        counts[l] += 1;
        for j in 0..m {
            var[l * m + j] += (r[j] - cl.centroids[l * m + j]).powi(2);
        }
    }
    let logvar: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let n = counts[i / m];
            if n > 1 {
                (v / n as f64).max(1e-4).ln()
            } else {
                0.0
            }
        })
        .collect();
    model.gen.set_tensor("b_mu", Tensor::matrix(d.states, m, cl.centroids))?;
    model.gen.set_tensor("b_sigma", Tensor::matrix(d.states, m, logvar))?;
    model.gen.set_tensor("w_mu", Tensor::zeros(&[d.states, m, d.hidden]))?;
    model.gen.set_tensor("w_sigma", Tensor::zeros(&[d.states, m, d.hidden]))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separated_blobs_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let data: Vec<[f64; 2]> = (0..300)
            .map(|i| {
                let c = centres[i % 3];
                [c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]
            })
            .collect();
        let rows: Vec<&[f64]> = data.iter().map(|r| &r[..]).collect();
        let cl = kmeans(&rows, 3, 100, &mut rng).unwrap();
        for i in 0..300 {
            assert_eq!(cl.labels[i], cl.labels[i % 3]);
        }
        let mut firsts: Vec<usize> = cl.labels[..3].to_vec();
        firsts.sort();
        assert_eq!(firsts, vec![0, 1, 2]);
        assert!(kmeans(&rows[..2], 3, 10, &mut rng).is_err());
    }
}
