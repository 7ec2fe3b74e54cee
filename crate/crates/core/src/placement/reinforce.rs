//! REINFORCE with an exponential-moving-average baseline.

use super::policy::Policy;
use super::{project_allocation, EnvSnapshot, PlacementError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReinforceConfig {
    pub lr: f64,
    /// Weight of the old baseline in each update.
    pub ema_decay: f64,
    /// Dirichlet concentration at temperature 1.
    pub concentration: f64,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Episodes over which the temperature anneals.
    pub anneal_episodes: u64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            lr: 1e-3,
            ema_decay: 0.9,
            concentration: 100.0,
            temperature_start: 1.0,
            temperature_end: 0.1,
            anneal_episodes: 2000,
        }
    }
}

/// A sampled action and what the update needs from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    /// Dirichlet sample around the policy's probabilities.
    pub q: Vec<f64>,
    pub allocation: Vec<usize>,
    pub log_prob: f64,
    pub grad: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub allocation: Vec<usize>,
    pub latency: f64,
    pub reward: f64,
    /// Baseline after this episode.
    pub baseline: f64,
    /// Entropy of the policy's probabilities.
    pub entropy: f64,
}

#[derive(Clone, Debug)]
pub struct Reinforce {
    pub policy: Policy,
    pub cfg: ReinforceConfig,
    pub baseline: Option<f64>,
    pub episode: u64,
    /// Episodes dropped for a non-finite gradient.
    pub discarded: u64,
    rng: ChaCha8Rng,
}

impl Reinforce {
    pub fn new(policy: Policy, cfg: ReinforceConfig, seed: u64) -> Self {
        Reinforce { policy, cfg, baseline: None, episode: 0, discarded: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn temperature(&self) -> f64 {
        let c = &self.cfg;
        let frac = if c.anneal_episodes == 0 { 1.0 } else { (self.episode as f64 / c.anneal_episodes as f64).min(1.0) };
        c.temperature_start + (c.temperature_end - c.temperature_start) * frac
    }

    /// Dirichlet concentration now; lower temperature explores less.
    pub fn concentration(&self) -> f64 {
        self.cfg.concentration / self.temperature()
    }

    pub fn sample(&mut self, snap: &EnvSnapshot, batch: usize) -> Result<Action, PlacementError> {
        let features = snap.features(batch);
        let probs = self.policy.probabilities(&features)?;
        let c = self.concentration();
        let draws: Vec<f64> = probs
            .iter()
            .map(|p| Gamma::new(c * p, 1.0).map(|g| g.sample(&mut self.rng)).unwrap_or(0.0))
            .collect();
        let sum: f64 = draws.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(PlacementError::PolicyDiverged("degenerate Dirichlet sample".into()));
        }
        let q: Vec<f64> = draws.iter().map(|g| g / sum).collect();
        let allocation = project_allocation(&q, batch, &snap.capacity)?;
        let (log_prob, grad) = self.policy.grad_log_prob(&features, &q, c)?;
        Ok(Action { q, allocation, log_prob, grad, probs })
    }

    /// Applies one policy-gradient step for `action` with reward `-latency`.
    pub fn update(&mut self, action: &Action, latency: f64) -> EpisodeRecord {
        let reward = -latency;
        // The first episode seeds the baseline, so it carries no advantage.
        let b = self.baseline.unwrap_or(reward);
        let advantage = reward - b;
        for (t, g) in self.policy.theta.iter_mut().zip(&action.grad) {
            *t += self.cfg.lr * g * advantage;
        }
        let rho = self.cfg.ema_decay;
        let baseline = rho * b + (1.0 - rho) * reward;
        self.baseline = Some(baseline);
        let record = EpisodeRecord {
            episode: self.episode,
            allocation: action.allocation.clone(),
            latency,
            reward,
            baseline,
            entropy: entropy(&action.probs),
        };
        self.episode += 1;
        record
    }

    /// Samples, scores and learns from one episode. Returns `None` when the
    /// episode was discarded.
    pub fn episode(&mut self, snap: &EnvSnapshot, batch: usize) -> Result<Option<EpisodeRecord>, PlacementError> {
        match self.sample(snap, batch) {
            Ok(action) => {
                let latency = snap.episode_latency(&action.allocation);
                Ok(Some(self.update(&action, latency)))
            }
            Err(PlacementError::PolicyDiverged(_)) if self.policy.probabilities(&snap.features(batch)).is_ok() => {
                self.discarded += 1;
                self.episode += 1;
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    pub fn train(&mut self, snap: &EnvSnapshot, batch: usize, episodes: u64) -> Result<Vec<EpisodeRecord>, PlacementError> {
        let mut out = Vec::with_capacity(episodes as usize);
        for _ in 0..episodes {
            if let Some(r) = self.episode(snap, batch)? {
                out.push(r);
            }
        }
        Ok(out)
    }

    /// Allocation from the policy's probabilities, without exploration.
    pub fn greedy(&self, snap: &EnvSnapshot, batch: usize) -> Result<Vec<usize>, PlacementError> {
        let p = self.policy.probabilities(&snap.features(batch))?;
        project_allocation(&p, batch, &snap.capacity)
    }

    /// JSON checkpoint: config header plus flat parameters.
    pub fn checkpoint(&self) -> String {
        serde_json::json!({
            "config": self.cfg,
            "baseline": self.baseline,
            "episode": self.episode,
            "policy": self.policy,
        })
        .to_string()
    }

    pub fn from_checkpoint(text: &str, seed: u64) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Saved {
            config: ReinforceConfig,
            baseline: Option<f64>,
            episode: u64,
            policy: Policy,
        }
        let s: Saved = serde_json::from_str(text)?;
        let mut r = Reinforce::new(s.policy, s.config, seed);
        r.baseline = s.baseline;
        r.episode = s.episode;
        Ok(r)
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}
