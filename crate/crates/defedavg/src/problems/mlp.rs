//! One-hidden-layer MLP classifier (tanh hidden units, softmax output).
//!
//! Parameter layout, flattened in order: `W1 (H x d_in)` row-major,
//! `b1 (H)`, `W2 (C x H)` row-major, `b2 (C)`. Initial weights are drawn
//! uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer from a
//! seed-derived stream, so initialization is reproducible independent of
//! where the problem is constructed.

use super::logreg::{draw_batch, validate_partition};
use super::{argmax, softmax_in_place, Dataset, Partition};
use crate::numerics::{RngStream, Weights};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Mlp {
    train: Dataset,
    test: Option<Dataset>,
    part: Partition,
    hidden: usize,
    init: Weights,
}

/// Builds an MLP problem; `seed` fixes the initial weights.
pub fn make_mlp(
    train: Dataset,
    test: Option<Dataset>,
    part: Partition,
    hidden: usize,
    seed: u64,
) -> Result<Mlp> {
    if hidden == 0 {
        return Err(Error::InvalidProblem("hidden layer needs at least one unit".into()));
    }
    validate_partition(&train, &part)?;
    if let Some(t) = &test {
        if t.d_in() != train.d_in() || t.num_classes() > train.num_classes() {
            return Err(Error::InvalidProblem(
                "test set shape does not match the training set".into(),
            ));
        }
    }
    let init = init_weights(train.d_in(), hidden, train.num_classes(), seed);
    Ok(Mlp { train, test, part, hidden, init })
}

fn init_weights(d_in: usize, hidden: usize, classes: usize, seed: u64) -> Weights {
    let mut stream = RngStream::derive(seed, "mlp-init");
    let mut values = Vec::with_capacity(hidden * d_in + hidden + classes * hidden + classes);
    let mut layer = |count: usize, fan_in: usize, s: &mut RngStream| {
        let a = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..count {
            values.push((2.0 * s.uniform_f64() - 1.0) * a);
        }
    };
    layer(hidden * d_in + hidden, d_in, &mut stream);
    layer(classes * hidden + classes, hidden, &mut stream);
    Weights::from_vec(values).expect("uniform draws are finite")
}

/// Offsets of the four parameter blocks within the flat vector.
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    dim: usize,
}

impl Mlp {
    fn layout(&self) -> Layout {
        let (d, h, c) = (self.train.d_in(), self.hidden, self.train.num_classes());
        Layout {
            w1: 0,
            b1: h * d,
            w2: h * d + h,
            b2: h * d + h + c * h,
            dim: h * d + h + c * h + c,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout().dim
    }

    pub fn num_clients(&self) -> usize {
        self.part.num_clients()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn shard_len(&self, client: usize) -> usize {
        self.part.shards[client].len()
    }

    /// Seed-determined initial parameter vector.
    pub fn initial_weights(&self) -> &Weights {
        &self.init
    }

    /// Forward pass; returns (hidden activations, output logits).
    fn forward(&self, w: &Weights, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (d, h, c) = (self.train.d_in(), self.hidden, self.train.num_classes());
        let lay = self.layout();
        let wv = w.as_slice();
        let mut a1 = Vec::with_capacity(h);
        for unit in 0..h {
            let row = &wv[lay.w1 + unit * d..lay.w1 + (unit + 1) * d];
            let z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + wv[lay.b1 + unit];
            a1.push(z.tanh());
        }
        let mut logits = Vec::with_capacity(c);
        for class in 0..c {
            let row = &wv[lay.w2 + class * h..lay.w2 + (class + 1) * h];
            let z: f64 =
                row.iter().zip(&a1).map(|(a, b)| a * b).sum::<f64>() + wv[lay.b2 + class];
            logits.push(z);
        }
        (a1, logits)
    }

    /// Output logits for one feature row.
    pub fn logits(&self, w: &Weights, x: &[f64]) -> Vec<f64> {
        self.forward(w, x).1
    }

    pub fn client_loss(&self, client: usize, w: &Weights) -> f64 {
        let shard = &self.part.shards[client];
        shard
            .iter()
            .map(|&s| {
                let mut logits = self.logits(w, self.train.feature_row(s));
                softmax_in_place(&mut logits, self.train.label(s))
            })
            .sum::<f64>()
            / shard.len() as f64
    }

    pub fn client_gradient(&self, client: usize, w: &Weights) -> Weights {
        let all: Vec<usize> = (0..self.shard_len(client)).collect();
        self.gradient_on_positions(client, &all, w)
    }

    /// Mean backpropagated gradient over the given shard positions.
    pub fn gradient_on_positions(&self, client: usize, positions: &[usize], w: &Weights) -> Weights {
        assert!(!positions.is_empty(), "gradient needs at least one sample");
        let (d, h, c) = (self.train.d_in(), self.hidden, self.train.num_classes());
        let lay = self.layout();
        let wv = w.as_slice();
        let shard = &self.part.shards[client];
        let mut grad = Weights::zeros(lay.dim);
        let inv = 1.0 / positions.len() as f64;
        for &pos in positions {
            let sample = shard[pos];
            let x = self.train.feature_row(sample);
            let (a1, mut p) = self.forward(w, x);
            softmax_in_place(&mut p, self.train.label(sample));
            p[self.train.label(sample)] -= 1.0; // dL/dlogits
            let gv = grad.as_mut_slice();
            // Output layer: dW2 = dz2 a1^T, db2 = dz2.
            for class in 0..c {
                let coeff = p[class] * inv;
                let row = &mut gv[lay.w2 + class * h..lay.w2 + (class + 1) * h];
                for (g, a) in row.iter_mut().zip(&a1) {
                    *g += coeff * a;
                }
                gv[lay.b2 + class] += coeff;
            }
            // Hidden layer: dz1 = (W2^T dz2) * (1 - a1^2).
            for unit in 0..h {
                let mut back = 0.0;
                for class in 0..c {
                    back += p[class] * wv[lay.w2 + class * h + unit];
                }
                let dz1 = back * (1.0 - a1[unit] * a1[unit]) * inv;
                let row = &mut gv[lay.w1 + unit * d..lay.w1 + (unit + 1) * d];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += dz1 * xv;
                }
                gv[lay.b1 + unit] += dz1;
            }
        }
        grad
    }

    /// Gradient on a uniform-with-replacement mini-batch.
    pub fn stochastic_gradient(
        &self,
        client: usize,
        w: &Weights,
        batch: usize,
        stream: &mut RngStream,
    ) -> Weights {
        let positions = draw_batch(self.shard_len(client), batch, stream);
        self.gradient_on_positions(client, &positions, w)
    }

    /// Top-1 accuracy on the held-out set, if one was provided.
    pub fn accuracy(&self, w: &Weights) -> Option<f64> {
        let test = self.test.as_ref()?;
        let correct = (0..test.len())
            .filter(|&i| argmax(&self.logits(w, test.feature_row(i))) == test.label(i))
            .count();
        Some(correct as f64 / test.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_l2_error};
    use crate::problems::PartitionScheme;

    fn tiny_mlp(seed: u64) -> Mlp {
        let features = vec![
            0.5, -1.0, //
            1.2, 0.3, //
            -0.7, 0.8, //
            0.1, -0.4, //
            -1.5, -0.2, //
            0.9, 1.1,
        ];
        let labels = vec![0, 1, 2, 0, 1, 2];
        let ds = Dataset::new(features, labels, 2, 3).unwrap();
        let part = Partition { shards: vec![(0..6).collect()], scheme: PartitionScheme::Iid };
        make_mlp(ds, None, part, 4, seed).unwrap()
    }

    #[test]
    fn initialization_is_seed_deterministic() {
        let a = tiny_mlp(11);
        let b = tiny_mlp(11);
        let c = tiny_mlp(12);
        assert_eq!(a.initial_weights(), b.initial_weights());
        assert_ne!(a.initial_weights(), c.initial_weights());
        // dim = 4*2 + 4 + 3*4 + 3
        assert_eq!(a.dim(), 27);
    }

    #[test]
    fn init_respects_fan_in_ranges() {
        let p = tiny_mlp(1);
        let lay = p.layout();
        let w = p.initial_weights().as_slice();
        let bound1 = 1.0 / (2.0f64).sqrt();
        let bound2 = 1.0 / (4.0f64).sqrt();
        assert!(w[lay.w1..lay.w2].iter().all(|v| v.abs() <= bound1));
        assert!(w[lay.w2..].iter().all(|v| v.abs() <= bound2));
    }

    #[test]
    fn zero_input_logits_come_from_biases_alone() {
        let ds = Dataset::new(vec![0.0, 0.0], vec![0], 2, 2).unwrap();
        let part = Partition { shards: vec![vec![0]], scheme: PartitionScheme::Iid };
        let p = make_mlp(ds, None, part, 3, 5).unwrap();
        let lay = p.layout();
        let w = p.initial_weights().clone();
        let logits = p.logits(&w, &[0.0, 0.0]);
        // With x = 0 the hidden activations are tanh(b1), so the logits
        // reduce to W2 tanh(b1) + b2.
        let wv = w.as_slice();
        for class in 0..2 {
            let mut expect = wv[lay.b2 + class];
            for unit in 0..3 {
                expect += wv[lay.w2 + class * 3 + unit] * wv[lay.b1 + unit].tanh();
            }
            assert!((logits[class] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let p = tiny_mlp(3);
        let mut stream = RngStream::derive(8, "probe");
        for _ in 0..3 {
            let w = Weights::from_vec(
                stream.gaussian_vec(p.dim()).iter().map(|v| 0.5 * v).collect(),
            )
            .unwrap();
            let analytic = p.client_gradient(0, &w);
            let fd = finite_difference_gradient(|x| p.client_loss(0, x), &w, 1e-6).unwrap();
            let err = relative_l2_error(&analytic, &fd).unwrap();
            assert!(err < 1e-7, "relative error {err}");
        }
    }

    #[test]
    fn single_sample_batches_average_to_full_gradient() {
        let p = tiny_mlp(4);
        let w = p.initial_weights().clone();
        let full = p.client_gradient(0, &w);
        let m = p.shard_len(0);
        let mut mean = Weights::zeros(p.dim());
        for pos in 0..m {
            mean.add_scaled(&p.gradient_on_positions(0, &[pos], &w), 1.0 / m as f64)
                .unwrap();
        }
        assert!(mean.max_abs_diff(&full).unwrap() < 1e-12);
    }
}
