//! A small multilayer perceptron with hand-written backward pass.

use super::precision::Precision;
use super::TrainError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-layer parameter tensors. Layer `l` stores its `out x in` weights
/// row-major, followed by `out` biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<Vec<f64>>,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params { layers: self.layers.iter().map(|l| vec![0.0; l.len()]).collect() }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.concat()
    }

    /// Splits `flat` into tensors shaped like `self`.
    pub fn unflatten_like(&self, flat: &[f64]) -> Params {
        assert_eq!(flat.len(), self.len(), "flat length");
        let mut at = 0;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let part = flat[at..at + l.len()].to_vec();
                at += l.len();
                part
            })
            .collect();
        Params { layers }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Params) -> f64 {
        self.flatten().iter().zip(other.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Params {
        Params { layers: self.layers.iter().map(|l| l.iter().map(|v| f(*v)).collect()).collect() }
    }
}

/// Gradient sums over a chunk of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub grads: Params,
    pub n: usize,
    /// Summed unscaled loss, for reporting.
    pub loss: f64,
}

/// Fully connected network: tanh hidden layers, linear output, squared loss
/// `0.5 * |y - t|^2` per example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|w| *w > 0), "need input and output widths");
        Mlp { widths }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform Glorot initialization.
    pub fn init(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self
            .widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let mut l: Vec<f64> = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect();
                l.extend((0..w[1]).map(|_| rng.random_range(-0.1..0.1)));
                l
            })
            .collect();
        Params { layers }
    }

    /// Activations of every layer, input first.
    fn forward_all(&self, params: &Params, x: &[f64], prec: Precision) -> Vec<Vec<f64>> {
        let last = self.widths.len() - 2;
        let mut acts = vec![x.iter().map(|v| prec.round(*v)).collect::<Vec<f64>>()];
        for (l, w) in self.widths.windows(2).enumerate() {
            let (inp, out) = (w[0], w[1]);
            let layer = &params.layers[l];
            let a = &acts[l];
            let next: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &layer[o * inp..(o + 1) * inp];
                    let z = prec.round(row.iter().zip(a).map(|(w, a)| w * a).sum::<f64>() + layer[inp * out + o]);
                    if l == last {
                        z
                    } else {
                        prec.round(z.tanh())
                    }
                })
                .collect();
            acts.push(next);
        }
        acts
    }

    pub fn forward(&self, params: &Params, x: &[f64]) -> Vec<f64> {
        self.forward_all(params, x, Precision::F64).pop().expect("output layer")
    }

    pub fn loss(&self, params: &Params, x: &[f64], target: &[f64]) -> f64 {
        let y = self.forward(params, x);
        0.5 * y.iter().zip(target).map(|(y, t)| (y - t) * (y - t)).sum::<f64>()
    }

    /// Adds `scale` times the gradient of one example's loss into `acc`,
    /// returning the unscaled loss.
    pub fn accumulate_gradient(
        &self,
        params: &Params,
        x: &[f64],
        target: &[f64],
        prec: Precision,
        scale: f64,
        acc: &mut Params,
    ) -> f64 {
        let acts = self.forward_all(params, x, prec);
        let y = acts.last().expect("output layer");
        let loss = 0.5 * y.iter().zip(target).map(|(y, t)| (y - t) * (y - t)).sum::<f64>();
        // delta = dLoss/dz for the current layer
        let mut delta: Vec<f64> = y.iter().zip(target).map(|(y, t)| prec.round(scale * (y - t))).collect();
        for l in (0..self.widths.len() - 1).rev() {
            let (inp, out) = (self.widths[l], self.widths[l + 1]);
            let layer = &params.layers[l];
            let a = &acts[l];
            let g = &mut acc.layers[l];
            for o in 0..out {
                for i in 0..inp {
                    g[o * inp + i] += prec.round(delta[o] * a[i]);
                }
                g[inp * out + o] += delta[o];
            }
            if l > 0 {
                // a = tanh(z), so da/dz = 1 - a^2
                delta = (0..inp)
                    .map(|i| {
                        let back: f64 = (0..out).map(|o| layer[o * inp + i] * delta[o]).sum();
                        prec.round(prec.round(back) * (1.0 - a[i] * a[i]))
                    })
                    .collect();
            }
        }
        loss
    }

    /// Summed gradients of `scale * loss` over the chunk.
    pub fn local_gradients(
        &self,
        params: &Params,
        data: &Dataset,
        chunk: &[usize],
        prec: Precision,
        scale: f64,
    ) -> Result<GradientSet, TrainError> {
        let mut grads = params.zeros_like();
        let mut loss = 0.0;
        for &i in chunk {
            loss += self.accumulate_gradient(params, &data.inputs[i], &data.targets[i], prec, scale, &mut grads);
        }
        if !loss.is_finite() {
            return Err(TrainError::Diverged("non-finite loss in forward pass".into()));
        }
        let grads = grads.map(|v| prec.round(v));
        Ok(GradientSet { grads, n: chunk.len(), loss })
    }
}

/// Seeded regression data labelled by a random teacher network plus noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn synthetic(model: &Mlp, samples: usize, noise: f64, seed: u64) -> Self {
        let teacher = model.init(seed ^ 0x7ea0_c4e1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::with_capacity(samples);
        let mut targets = Vec::with_capacity(samples);
        for _ in 0..samples {
            let x: Vec<f64> = (0..model.input_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = model.forward(&teacher, &x).into_iter().map(|y| y + noise * rng.random_range(-1.0..1.0)).collect();
            inputs.push(x);
            targets.push(t);
        }
        Dataset { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
