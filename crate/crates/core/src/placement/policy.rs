//! One-hidden-layer policy network over a flattened snapshot.

use super::PlacementError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

pub const HIDDEN_UNITS: usize = 64;

/// Softmax, shifted by the largest logit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

/// Log density of `q` under Dirichlet(`alpha`).
pub fn dirichlet_log_density(q: &[f64], alpha: &[f64]) -> f64 {
    let sum: f64 = alpha.iter().sum();
    ln_gamma(sum) + alpha.iter().zip(q).map(|(a, x)| (a - 1.0) * x.ln() - ln_gamma(*a)).sum::<f64>()
}

/// `tanh` hidden layer, linear logits. Parameters are flat: input weights
/// (hidden x inputs, row-major), hidden biases, output weights
/// (devices x hidden), output biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub inputs: usize,
    pub hidden: usize,
    pub devices: usize,
    pub theta: Vec<f64>,
}

struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl Policy {
    /// Small random hidden layer and zero output layer, so every device
    /// starts with the same probability. Small hidden activations keep the
    /// output-layer step close to the raw learning rate.
    pub fn new(devices: usize, seed: u64) -> Self {
        let inputs = devices * devices + 2 * devices;
        let hidden = HIDDEN_UNITS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.1 / (inputs as f64).sqrt();
        let mut theta: Vec<f64> = (0..hidden * inputs).map(|_| rng.random_range(-bound..bound)).collect();
        theta.resize(Self::param_count(inputs, hidden, devices), 0.0);
        Policy { inputs, hidden, devices, theta }
    }

    pub fn param_count(inputs: usize, hidden: usize, devices: usize) -> usize {
        hidden * inputs + hidden + devices * hidden + devices
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.inputs;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.devices * self.hidden;
        (b1, w2, b2)
    }

    fn run(&self, features: &[f64]) -> Result<Forward, PlacementError> {
        assert_eq!(features.len(), self.inputs, "feature width");
        let (b1, w2, b2) = self.offsets();
        let t = &self.theta;
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &t[h * self.inputs..(h + 1) * self.inputs];
                (row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + t[b1 + h]).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..self.devices)
            .map(|k| {
                let row = &t[w2 + k * self.hidden..w2 + (k + 1) * self.hidden];
                row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + t[b2 + k]
            })
            .collect();
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(PlacementError::PolicyDiverged("non-finite logits".into()));
        }
        Ok(Forward { hidden, probs: softmax(&logits) })
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>, PlacementError> {
        self.run(features).map(|f| f.probs)
    }

    /// `log P(q)` for a Dirichlet action with concentration
    /// `concentration * p(features)`, and its gradient in `theta`.
    pub fn grad_log_prob(&self, features: &[f64], q: &[f64], concentration: f64) -> Result<(f64, Vec<f64>), PlacementError> {
        let fwd = self.run(features)?;
        let p = &fwd.probs;
        let alpha: Vec<f64> = p.iter().map(|pk| concentration * pk).collect();
        let log_prob = dirichlet_log_density(q, &alpha);
        // d log P / d p_k, then through the softmax to the logits
        let dp: Vec<f64> =
            (0..self.devices).map(|k| concentration * (digamma(concentration) - digamma(alpha[k]) + q[k].ln())).collect();
        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        let dlogit: Vec<f64> = (0..self.devices).map(|k| p[k] * (dp[k] - mean)).collect();

        let (b1, w2, b2) = self.offsets();
        let mut grad = vec![0.0; self.theta.len()];
        for k in 0..self.devices {
            for h in 0..self.hidden {
                grad[w2 + k * self.hidden + h] = dlogit[k] * fwd.hidden[h];
            }
            grad[b2 + k] = dlogit[k];
        }
        for h in 0..self.hidden {
            let back: f64 = (0..self.devices).map(|k| self.theta[w2 + k * self.hidden + h] * dlogit[k]).sum();
            let dz = back * (1.0 - fwd.hidden[h] * fwd.hidden[h]);
            for i in 0..self.inputs {
                grad[h * self.inputs + i] = dz * features[i];
            }
            grad[b1 + h] = dz;
        }
        if !log_prob.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PlacementError::PolicyDiverged("non-finite log-probability gradient".into()));
        }
        Ok((log_prob, grad))
    }

    pub fn log_prob(&self, features: &[f64], q: &[f64], concentration: f64) -> Result<f64, PlacementError> {
        let p = self.probabilities(features)?;
        let alpha: Vec<f64> = p.iter().map(|pk| concentration * pk).collect();
        Ok(dirichlet_log_density(q, &alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_is_uniform() {
        let p = Policy::new(3, 1);
        let f = vec![0.3; p.inputs];
        let probs = p.probabilities(&f).unwrap();
        assert!(probs.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&[0.1, -2.0, 3.5]);
        let b = softmax(&[100.1, 98.0, 103.5]);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diverged_logits_are_reported() {
        let mut p = Policy::new(2, 1);
        let (_, _, b2) = p.offsets();
        p.theta[b2] = f64::INFINITY;
        assert!(matches!(p.probabilities(&vec![0.0; p.inputs]), Err(PlacementError::PolicyDiverged(_))));
    }

    #[test]
    fn uniform_dirichlet_density() {
        // Dirichlet(1,1,1) has constant density Gamma(3) = 2
        assert!((dirichlet_log_density(&[0.2, 0.3, 0.5], &[1.0, 1.0, 1.0]) - 2f64.ln()).abs() < 1e-12);
    }
}
