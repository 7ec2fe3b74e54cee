use super::NodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LatencyError {
    #[error("latency matrix is not square")]
    NotSquare,
    #[error("latency matrix is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("latency matrix diagonal entry {0} is not zero")]
    NonZeroDiagonal(usize),
    #[error("latency entry ({0}, {1}) is negative or not finite")]
    BadEntry(usize, usize),
    #[error("jitter fraction {0} outside [0, 1)")]
    BadJitter(f64),
}

/// Pairwise one-way latency with multiplicative jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    base: Vec<Vec<f64>>,
    jitter_fraction: f64,
    rng_seed: u64,
}

impl LatencyModel {
    pub fn new(base: Vec<Vec<f64>>, jitter_fraction: f64, rng_seed: u64) -> Result<Self, LatencyError> {
        let n = base.len();
        if base.iter().any(|row| row.len() != n) {
            return Err(LatencyError::NotSquare);
        }
        if !(0.0..1.0).contains(&jitter_fraction) {
            return Err(LatencyError::BadJitter(jitter_fraction));
        }
        for i in 0..n {
            if base[i][i] != 0.0 {
                return Err(LatencyError::NonZeroDiagonal(i));
            }
            for j in 0..n {
                let v = base[i][j];
                if !v.is_finite() || v < 0.0 {
                    return Err(LatencyError::BadEntry(i, j));
                }
                if v != base[j][i] {
                    return Err(LatencyError::Asymmetric(i, j));
                }
            }
        }
        Ok(LatencyModel { base, jitter_fraction, rng_seed })
    }

    /// Every pair at the same latency.
    pub fn uniform(n: usize, latency_ms: f64) -> Self {
        let base = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { latency_ms }).collect())
            .collect();
        LatencyModel { base, jitter_fraction: 0.0, rng_seed: 0 }
    }

    /// Nodes placed uniformly in a square; latency grows with distance.
    pub fn planar(n: usize, min_ms: f64, max_ms: f64, jitter_fraction: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        let diag = std::f64::consts::SQRT_2;
        let base = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            0.0
                        } else {
                            let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
                            let d = (dx * dx + dy * dy).sqrt() / diag;
                            (min_ms + (max_ms - min_ms) * d).round()
                        }
                    })
                    .collect()
            })
            .collect();
        LatencyModel { base, jitter_fraction, rng_seed: seed }
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn jitter(&self) -> f64 {
        self.jitter_fraction
    }

    pub fn base(&self, a: NodeId, b: NodeId) -> f64 {
        self.base[a.index()][b.index()]
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.base
    }

    pub fn max_base(&self) -> f64 {
        self.base.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// Restriction to a subset of nodes, in the given order.
    pub fn submatrix(&self, nodes: &[NodeId]) -> Vec<Vec<f64>> {
        nodes
            .iter()
            .map(|a| nodes.iter().map(|b| self.base(*a, *b)).collect())
            .collect()
    }

    /// `base × (1 + U(−jitter, +jitter))`, rounded to whole milliseconds.
    pub fn sample(&self, a: NodeId, b: NodeId, rng: &mut ChaCha8Rng) -> u64 {
        let base = self.base(a, b);
        let factor = if self.jitter_fraction > 0.0 {
            1.0 + rng.random_range(-self.jitter_fraction..self.jitter_fraction)
        } else {
            1.0
        };
        (base * factor).round().max(0.0) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_asymmetric_and_diagonal() {
        assert_eq!(
            LatencyModel::new(vec![vec![0.0, 1.0], vec![2.0, 0.0]], 0.0, 0).unwrap_err(),
            LatencyError::Asymmetric(0, 1)
        );
        assert_eq!(
            LatencyModel::new(vec![vec![1.0, 1.0], vec![1.0, 0.0]], 0.0, 0).unwrap_err(),
            LatencyError::NonZeroDiagonal(0)
        );
        assert_eq!(
            LatencyModel::new(vec![vec![0.0, f64::NAN], vec![f64::NAN, 0.0]], 0.0, 0).unwrap_err(),
            LatencyError::BadEntry(0, 1)
        );
        assert!(LatencyModel::new(vec![vec![0.0]], 1.0, 0).is_err());
    }

    #[test]
    fn zero_jitter_is_exact() {
        let m = LatencyModel::new(vec![vec![0.0, 10.0], vec![10.0, 0.0]], 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(m.sample(NodeId(0), NodeId(1), &mut rng), 10);
    }

    #[test]
    fn jitter_stays_in_band() {
        let m = LatencyModel::new(vec![vec![0.0, 100.0], vec![100.0, 0.0]], 0.2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = m.sample(NodeId(0), NodeId(1), &mut rng);
            assert!((80..=120).contains(&s));
        }
    }

    #[test]
    fn planar_is_valid() {
        let m = LatencyModel::planar(20, 5.0, 80.0, 0.1, 9);
        assert!(LatencyModel::new(m.base.clone(), 0.1, 9).is_ok());
        assert!(m.max_base() <= 80.0);
    }
}
