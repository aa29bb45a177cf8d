//! Multinomial logistic regression with optional L2 regularization.
//!
//! Parameters are a `C x d_in` weight matrix followed by `C` biases,
//! flattened row-major. Each client's objective is the mean softmax
//! cross-entropy over its shard plus `l2/2 * |w|^2`.

use super::{argmax, softmax_in_place, Dataset, Partition};
use crate::numerics::{RngStream, Weights};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LogReg {
    train: Dataset,
    test: Option<Dataset>,
    part: Partition,
    l2: f64,
}

/// Builds a logistic-regression problem over a partitioned dataset.
pub fn make_logreg(
    train: Dataset,
    test: Option<Dataset>,
    part: Partition,
    l2: f64,
) -> Result<LogReg> {
    if l2 < 0.0 {
        return Err(Error::InvalidProblem("l2 must be nonnegative".into()));
    }
    validate_partition(&train, &part)?;
    if let Some(t) = &test {
        if t.d_in() != train.d_in() || t.num_classes() > train.num_classes() {
            return Err(Error::InvalidProblem(
                "test set shape does not match the training set".into(),
            ));
        }
    }
    Ok(LogReg { train, test, part, l2 })
}

pub(super) fn validate_partition(dataset: &Dataset, part: &Partition) -> Result<()> {
    if part.shards.is_empty() {
        return Err(Error::InvalidProblem("partition has no clients".into()));
    }
    for (i, shard) in part.shards.iter().enumerate() {
        if shard.is_empty() {
            return Err(Error::InvalidProblem(format!("client {i} has an empty shard")));
        }
        if let Some(&bad) = shard.iter().find(|&&s| s >= dataset.len()) {
            return Err(Error::InvalidProblem(format!(
                "client {i} references sample {bad} outside the dataset"
            )));
        }
    }
    Ok(())
}

impl LogReg {
    pub fn dim(&self) -> usize {
        self.train.num_classes() * (self.train.d_in() + 1)
    }

    pub fn num_clients(&self) -> usize {
        self.part.num_clients()
    }

    pub fn shard_len(&self, client: usize) -> usize {
        self.part.shards[client].len()
    }

    /// Class scores `W x + b` for one feature row.
    pub fn logits(&self, w: &Weights, x: &[f64]) -> Vec<f64> {
        let (c, d) = (self.train.num_classes(), self.train.d_in());
        let wv = w.as_slice();
        (0..c)
            .map(|class| {
                let row = &wv[class * d..(class + 1) * d];
                let bias = wv[c * d + class];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias
            })
            .collect()
    }

    fn sample_loss(&self, w: &Weights, sample: usize) -> f64 {
        let mut logits = self.logits(w, self.train.feature_row(sample));
        softmax_in_place(&mut logits, self.train.label(sample))
    }

    pub fn client_loss(&self, client: usize, w: &Weights) -> f64 {
        let shard = &self.part.shards[client];
        let data_term =
            shard.iter().map(|&s| self.sample_loss(w, s)).sum::<f64>() / shard.len() as f64;
        data_term + 0.5 * self.l2 * w.norm_sq()
    }

    pub fn client_gradient(&self, client: usize, w: &Weights) -> Weights {
        let all: Vec<usize> = (0..self.shard_len(client)).collect();
        self.gradient_on_positions(client, &all, w)
    }

    /// Mean gradient over the shard positions in `positions` (with
    /// replacement semantics: duplicates count twice), plus the L2 term.
    pub fn gradient_on_positions(&self, client: usize, positions: &[usize], w: &Weights) -> Weights {
        assert!(!positions.is_empty(), "gradient needs at least one sample");
        let (c, d) = (self.train.num_classes(), self.train.d_in());
        let shard = &self.part.shards[client];
        let mut grad = Weights::zeros(self.dim());
        let gv = grad.as_mut_slice();
        let inv = 1.0 / positions.len() as f64;
        for &pos in positions {
            let sample = shard[pos];
            let x = self.train.feature_row(sample);
            let mut p = self.logits(w, x);
            softmax_in_place(&mut p, self.train.label(sample));
            p[self.train.label(sample)] -= 1.0; // dL/dlogits = p - onehot
            for class in 0..c {
                let coeff = p[class] * inv;
                let row = &mut gv[class * d..(class + 1) * d];
                for (g, xv) in row.iter_mut().zip(x) {
                    *g += coeff * xv;
                }
                gv[c * d + class] += coeff;
            }
        }
        grad.add_scaled(w, self.l2).expect("same dimension");
        grad
    }

    /// Gradient on a `batch`-sample mini-batch drawn uniformly with
    /// replacement from the client's shard.
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

/// Uniform-with-replacement shard positions for one mini-batch.
pub(super) fn draw_batch(shard_len: usize, batch: usize, stream: &mut RngStream) -> Vec<usize> {
    assert!(batch >= 1, "batch size must be at least 1");
    (0..batch)
        .map(|_| stream.uniform_int(shard_len as u64) as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_l2_error};
    use crate::problems::{partition, PartitionScheme};

    fn tiny_problem(l2: f64) -> LogReg {
        // 5 samples, 3 features, 2 classes, one client holding everything.
        let features = vec![
            1.0, 0.5, -0.2, //
            -1.0, 0.3, 0.8, //
            0.2, -0.7, 1.5, //
            0.9, 0.9, -1.1, //
            -0.4, 0.1, 0.3,
        ];
        let labels = vec![0, 1, 1, 0, 1];
        let ds = Dataset::new(features, labels, 3, 2).unwrap();
        let part = Partition {
            shards: vec![(0..5).collect()],
            scheme: PartitionScheme::Iid,
        };
        make_logreg(ds, None, part, l2).unwrap()
    }

    #[test]
    fn zero_weights_give_log_num_classes() {
        let p = tiny_problem(0.0);
        let w = Weights::zeros(p.dim());
        let loss = p.client_loss(0, &w);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for l2 in [0.0, 0.05] {
            let p = tiny_problem(l2);
            let mut stream = RngStream::derive(2, "probe");
            let w = Weights::from_vec(stream.gaussian_vec(p.dim())).unwrap();
            let analytic = p.client_gradient(0, &w);
            let fd =
                finite_difference_gradient(|x| p.client_loss(0, x), &w, 1e-6).unwrap();
            let err = relative_l2_error(&analytic, &fd).unwrap();
            assert!(err < 1e-7, "l2={l2}: relative error {err}");
        }
    }

    #[test]
    fn single_sample_batches_average_to_full_gradient() {
        let p = tiny_problem(0.03);
        let mut stream = RngStream::derive(3, "probe");
        let w = Weights::from_vec(stream.gaussian_vec(p.dim())).unwrap();
        let full = p.client_gradient(0, &w);
        let mut mean = Weights::zeros(p.dim());
        let m = p.shard_len(0);
        for pos in 0..m {
            mean.add_scaled(&p.gradient_on_positions(0, &[pos], &w), 1.0 / m as f64)
                .unwrap();
        }
        assert!(mean.max_abs_diff(&full).unwrap() < 1e-12);
    }

    #[test]
    fn separable_points_train_to_near_zero_loss() {
        // Two well-separated clusters on a line through the plane.
        let features = vec![2.0, 1.0, 1.5, 0.5, -2.0, -1.0, -1.5, -0.5];
        let labels = vec![1, 1, 0, 0];
        let ds = Dataset::new(features, labels, 2, 2).unwrap();
        let part = Partition { shards: vec![(0..4).collect()], scheme: PartitionScheme::Iid };
        let p = make_logreg(ds, None, part, 0.0).unwrap();
        let mut w = Weights::zeros(p.dim());
        for _ in 0..500 {
            let g = p.client_gradient(0, &w);
            w.add_scaled(&g, -2.0).unwrap();
        }
        let loss = p.client_loss(0, &w);
        assert!(loss < 0.01, "final loss {loss}");
    }

    #[test]
    fn stochastic_batches_are_reproducible() {
        let p = tiny_problem(0.0);
        let w = Weights::zeros(p.dim());
        let mut s1 = RngStream::derive(5, "batch");
        let mut s2 = RngStream::derive(5, "batch");
        let a = p.stochastic_gradient(0, &w, 4, &mut s1);
        let b = p.stochastic_gradient(0, &w, 4, &mut s2);
        assert_eq!(a, b);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let train = Dataset::new(vec![1.0, -1.0], vec![0, 1], 1, 2).unwrap();
        let test = Dataset::new(vec![3.0, -3.0, 0.5], vec![0, 1, 1], 1, 2).unwrap();
        let part = Partition { shards: vec![vec![0, 1]], scheme: PartitionScheme::Iid };
        let p = make_logreg(train, Some(test), part, 0.0).unwrap();
        // Weights that put class 0 on positive inputs: rows [1], [-1], biases 0.
        let w = Weights::from_vec(vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let acc = p.accuracy(&w).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12, "acc {acc}");
    }

    #[test]
    fn partition_validation_rejects_bad_indices() {
        let ds = Dataset::new(vec![0.0, 1.0], vec![0, 1], 1, 2).unwrap();
        let part = Partition { shards: vec![vec![0, 5]], scheme: PartitionScheme::Iid };
        assert!(make_logreg(ds.clone(), None, part, 0.0).is_err());
        let empty = Partition { shards: vec![vec![]], scheme: PartitionScheme::Iid };
        assert!(make_logreg(ds, None, empty, 0.0).is_err());
    }

    #[test]
    fn iid_partition_integration() {
        let mut s = RngStream::derive(7, "data");
        let ds = Dataset::synthetic_blobs(40, 4, 2, 3.0, &mut s).unwrap();
        let part = partition(&ds, PartitionScheme::Iid, 8, &mut s.child("part")).unwrap();
        let p = make_logreg(ds, None, part, 0.01).unwrap();
        assert_eq!(p.num_clients(), 8);
        assert_eq!(p.dim(), 2 * 5);
        let w = Weights::zeros(p.dim());
        let g = p.client_gradient(3, &w);
        assert_eq!(g.dim(), p.dim());
    }
}
