use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const KMEANS_MAX_ITERS: usize = 50;

/// Frozen table of `V` codewords of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    entries: Vec<f64>,
}

impl Codebook {
    /// Rejects empty tables and duplicate codewords.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.is_empty() || entries.len() % dim != 0 {
            return Err(Error::Tokenizer(format!(
                "codebook needs a positive multiple of dim {dim}, got {} values",
                entries.len()
            )));
        }
        let mut seen = HashSet::new();
        for row in entries.chunks(dim) {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::Tokenizer("duplicate codeword".into()));
            }
        }
        Ok(Codebook { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn lookup(&self, index: usize) -> Result<&[f64]> {
        if index >= self.len() {
            return Err(Error::Tokenizer(format!(
                "token {index} out of range for codebook of {}",
                self.len()
            )));
        }
        Ok(&self.entries[index * self.dim..(index + 1) * self.dim])
    }

    /// Index of the closest codeword in squared Euclidean distance; ties go
    /// to the lower index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.entries.chunks(self.dim).enumerate() {
            let d = sq_dist(c, v);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded k-means (k-means++ initialization, Lloyd iterations capped at a
/// fixed count). `samples` is a flat `n x dim` array.
pub fn build_codebook(samples: &[f64], dim: usize, size: usize, seed: u64) -> Result<Codebook> {
    if size == 0 {
        return Err(Error::Tokenizer("codebook size must be positive".into()));
    }
    let points: Vec<&[f64]> = samples.chunks(dim).collect();
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < size {
        return Err(Error::Tokenizer(format!(
            "{} distinct samples cannot seed {size} codewords",
            distinct.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut nearest_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < size {
        let total: f64 = nearest_d.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &d) in nearest_d.iter().enumerate() {
            if d > 0.0 {
                chosen = Some(i);
                if pick < d {
                    break;
                }
                pick -= d;
            }
        }
        let c = points[chosen.expect("distinct samples remain")].to_vec();
        for (nd, p) in nearest_d.iter_mut().zip(&points) {
            *nd = nd.min(sq_dist(p, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (a, p) in assign.iter_mut().zip(&points) {
            let best = nearest_index(&centers, p);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; size];
        let mut counts = vec![0usize; size];
        for (&a, p) in assign.iter().zip(&points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, v)| *s += v);
        }
        for k in 0..size {
            if counts[k] == 0 {
                // Re-seed an empty cluster at the worst-served point.
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(points[i], &centers[assign[i]]);
                        let dj = sq_dist(points[j], &centers[assign[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .expect("non-empty samples");
                centers[k] = points[far].to_vec();
                assign[far] = k;
            } else {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
    }
    Codebook::new(dim, centers.concat())
}

fn nearest_index(centers: &[Vec<f64>], p: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_two_codewords() {
        let cb = build_codebook(&[0.0, 1.0, 5.0, -2.0, 0.0, 1.0], 2, 2, 4).unwrap();
        let mut rows: Vec<Vec<f64>> = cb.entries().chunks(2).map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(rows, vec![vec![0.0, 1.0], vec![5.0, -2.0]]);
    }

    #[test]
    fn single_codeword_is_mean() {
        let cb = build_codebook(&[1.0, 2.0, 6.0, 3.0], 1, 1, 0).unwrap();
        assert_eq!(cb.entries(), &[3.0]);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let samples: Vec<f64> = (0..400).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        let a = build_codebook(&samples, 4, 8, 42).unwrap();
        let b = build_codebook(&samples, 4, 8, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_distinct_samples() {
        let err = build_codebook(&[1.0, 1.0, 1.0], 1, 2, 0).unwrap_err();
        assert!(err.to_string().contains("distinct"));
    }

    #[test]
    fn duplicate_codewords_rejected() {
        assert!(Codebook::new(1, vec![0.5, 0.5]).is_err());
        assert!(Codebook::new(2, vec![]).is_err());
    }
}
