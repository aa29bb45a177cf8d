//! Training objectives and their data plumbing.
//!
//! Three problem families share one interface: a synthetic quadratic with
//! exactly known constants (used wherever a test needs ground truth), and
//! two data-driven classifiers — multinomial logistic regression and a
//! one-hidden-layer MLP. Data problems run on either generated Gaussian
//! blob datasets or IDX image files.
//!
//! The global objective is always the uniform average of per-client
//! objectives `F(w) = (1/N) sum_i F_i(w)`, matching how every algorithm in
//! [`crate::algorithms`] weighs clients.

mod idx;
mod logreg;
mod mlp;
mod partition;
mod quadratic;

pub use idx::read_idx;
pub use logreg::{make_logreg, LogReg};
pub use mlp::{make_mlp, Mlp};
pub use partition::{partition, Partition, PartitionScheme};
pub use quadratic::{make_quadratic, Quadratic};

use crate::numerics::{RngStream, Weights};
use crate::{Error, Result};

/// A labelled dense-feature dataset (row-major features).
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    d_in: usize,
    num_classes: usize,
}

impl Dataset {
    /// Builds a dataset from row-major features and labels.
    pub fn new(features: Vec<f64>, labels: Vec<usize>, d_in: usize, num_classes: usize) -> Result<Self> {
        if d_in == 0 || labels.is_empty() {
            return Err(Error::InvalidProblem("dataset must be nonempty".into()));
        }
        if features.len() != labels.len() * d_in {
            return Err(Error::InvalidProblem(format!(
                "feature buffer holds {} values but {} samples x {} features were declared",
                features.len(),
                labels.len(),
                d_in
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidProblem(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { features, labels, d_in, num_classes })
    }

    /// Synthetic Gaussian blobs: one unit-length center per class scaled by
    /// `separation`, unit-variance noise, labels balanced round-robin.
    pub fn synthetic_blobs(
        samples: usize,
        d_in: usize,
        num_classes: usize,
        separation: f64,
        stream: &mut RngStream,
    ) -> Result<Self> {
        if num_classes < 2 || d_in == 0 || samples < num_classes {
            return Err(Error::InvalidProblem(
                "blobs need >= 2 classes, >= 1 feature, and >= 1 sample per class".into(),
            ));
        }
        let mut centers = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            let mut c = stream.gaussian_vec(d_in);
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut c {
                *v *= separation / norm;
            }
            centers.push(c);
        }
        let mut features = Vec::with_capacity(samples * d_in);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let class = i % num_classes;
            for &coord in &centers[class] {
                features.push(coord + stream.gaussian());
            }
            labels.push(class);
        }
        Dataset::new(features, labels, d_in, num_classes)
    }

    /// Builds a dataset from an IDX image file and an IDX label file.
    pub fn from_idx_pair(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Self> {
        let images = read_idx(images_path)?;
        let labels = read_idx(labels_path)?;
        let (features, d_in, count) = match images {
            idx::IdxFile::Images { data, d_in, count } => (data, d_in, count),
            idx::IdxFile::Labels(_) => {
                return Err(Error::Idx {
                    path: images_path.display().to_string(),
                    reason: "expected an image file (magic 0x00000803)".into(),
                })
            }
        };
        let labels = match labels {
            idx::IdxFile::Labels(l) => l,
            idx::IdxFile::Images { .. } => {
                return Err(Error::Idx {
                    path: labels_path.display().to_string(),
                    reason: "expected a label file (magic 0x00000801)".into(),
                })
            }
        };
        if labels.len() != count {
            return Err(Error::Idx {
                path: labels_path.display().to_string(),
                reason: format!("{} labels for {} images", labels.len(), count),
            });
        }
        let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
        Dataset::new(features, labels, d_in, num_classes.max(2))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    /// Splits off the first `count` samples; the remainder becomes the
    /// second dataset. Useful for carving a held-out set out of one
    /// generated collection so both halves share a distribution.
    pub fn split_at(&self, count: usize) -> Result<(Dataset, Dataset)> {
        if count == 0 || count >= self.len() {
            return Err(Error::InvalidProblem(format!(
                "cannot split {} samples at {count}",
                self.len()
            )));
        }
        let head = Dataset::new(
            self.features[..count * self.d_in].to_vec(),
            self.labels[..count].to_vec(),
            self.d_in,
            self.num_classes,
        )?;
        let tail = Dataset::new(
            self.features[count * self.d_in..].to_vec(),
            self.labels[count..].to_vec(),
            self.d_in,
            self.num_classes,
        )?;
        Ok((head, tail))
    }
}

/// Converts `logits` to softmax probabilities in place and returns the
/// cross-entropy loss for `label`, stabilized by max-subtraction.
pub(crate) fn softmax_in_place(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    let loss = -(logits[label] / z).ln();
    for v in logits.iter_mut() {
        *v /= z;
    }
    loss
}

/// Index of the largest logit (ties to the lowest index).
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A federated training objective over `N` clients.
#[derive(Debug, Clone)]
pub enum Problem {
    Quadratic(Quadratic),
    LogReg(LogReg),
    Mlp(Mlp),
}

impl Problem {
    /// Model dimension (flattened parameter count).
    pub fn dim(&self) -> usize {
        match self {
            Problem::Quadratic(p) => p.dim(),
            Problem::LogReg(p) => p.dim(),
            Problem::Mlp(p) => p.dim(),
        }
    }

    /// Number of clients `N`.
    pub fn num_clients(&self) -> usize {
        match self {
            Problem::Quadratic(p) => p.num_clients(),
            Problem::LogReg(p) => p.num_clients(),
            Problem::Mlp(p) => p.num_clients(),
        }
    }

    /// Global objective `F(w)`, the uniform client average.
    pub fn loss(&self, w: &Weights) -> f64 {
        let n = self.num_clients();
        (0..n).map(|i| self.client_loss(i, w)).sum::<f64>() / n as f64
    }

    /// Exact gradient of the global objective.
    pub fn full_gradient(&self, w: &Weights) -> Weights {
        let n = self.num_clients();
        let mut g = Weights::zeros(self.dim());
        for i in 0..n {
            g.add_scaled(&self.client_gradient(i, w), 1.0 / n as f64)
                .expect("client gradients share the model dimension");
        }
        g
    }

    /// Client objective `F_i(w)`.
    pub fn client_loss(&self, client: usize, w: &Weights) -> f64 {
        match self {
            Problem::Quadratic(p) => p.client_loss(client, w),
            Problem::LogReg(p) => p.client_loss(client, w),
            Problem::Mlp(p) => p.client_loss(client, w),
        }
    }

    /// Exact gradient of `F_i`.
    pub fn client_gradient(&self, client: usize, w: &Weights) -> Weights {
        match self {
            Problem::Quadratic(p) => p.client_gradient(client, w),
            Problem::LogReg(p) => p.client_gradient(client, w),
            Problem::Mlp(p) => p.client_gradient(client, w),
        }
    }

    /// Unbiased stochastic gradient of `F_i`.
    ///
    /// Data problems draw `batch` shard positions uniformly with
    /// replacement from `stream`; the quadratic adds isotropic Gaussian
    /// noise with exact second moment `sigma^2` (its `batch` is ignored).
    pub fn stochastic_gradient(
        &self,
        client: usize,
        w: &Weights,
        batch: usize,
        stream: &mut RngStream,
    ) -> Weights {
        match self {
            Problem::Quadratic(p) => p.stochastic_gradient(client, w, stream),
            Problem::LogReg(p) => p.stochastic_gradient(client, w, batch, stream),
            Problem::Mlp(p) => p.stochastic_gradient(client, w, batch, stream),
        }
    }

    /// Mini-batch gradient at explicit shard positions (no RNG); the unit
    /// used by `stochastic_gradient` after drawing positions, exposed so
    /// tests can enumerate batches exhaustively.
    pub fn gradient_on_positions(&self, client: usize, positions: &[usize], w: &Weights) -> Weights {
        match self {
            Problem::Quadratic(p) => p.client_gradient(client, w),
            Problem::LogReg(p) => p.gradient_on_positions(client, positions, w),
            Problem::Mlp(p) => p.gradient_on_positions(client, positions, w),
        }
    }

    /// Top-1 accuracy on the held-out set, when the problem has one.
    pub fn accuracy(&self, w: &Weights) -> Option<f64> {
        match self {
            Problem::Quadratic(_) => None,
            Problem::LogReg(p) => p.accuracy(w),
            Problem::Mlp(p) => p.accuracy(w),
        }
    }

    /// Exact optimal value `F*`, when known (quadratic only).
    pub fn known_optimum(&self) -> Option<f64> {
        match self {
            Problem::Quadratic(p) => Some(p.optimal_value()),
            _ => None,
        }
    }

    /// Exact minimizer, when known (quadratic only).
    pub fn known_minimizer(&self) -> Option<Weights> {
        match self {
            Problem::Quadratic(p) => Some(p.minimizer().clone()),
            _ => None,
        }
    }

    /// Exact smoothness constant, when known (quadratic: 1).
    pub fn exact_smoothness(&self) -> Option<f64> {
        match self {
            Problem::Quadratic(_) => Some(1.0),
            _ => None,
        }
    }

    /// Exact stochastic-gradient noise level `sigma`, when known.
    pub fn exact_sigma(&self) -> Option<f64> {
        match self {
            Problem::Quadratic(p) => Some(p.sigma()),
            _ => None,
        }
    }

    /// Exact client heterogeneity `nu` (`|grad F_i - grad F| = nu`), when known.
    pub fn exact_nu(&self) -> Option<f64> {
        match self {
            Problem::Quadratic(p) => Some(p.nu()),
            _ => None,
        }
    }

    /// Starting point for training: the MLP's seed-derived init, zeros
    /// for the convex problems.
    pub fn initial_weights(&self) -> Weights {
        match self {
            Problem::Mlp(p) => p.initial_weights().clone(),
            _ => Weights::zeros(self.dim()),
        }
    }

    /// Nominal floating-point work of one local SGD step at the given batch
    /// size; feeds the system model's compute-time default. Data problems
    /// count ~6 multiply-accumulates per parameter per sample (forward and
    /// backward passes); the quadratic counts 3 per parameter.
    pub fn flops_per_iter(&self, batch: usize) -> f64 {
        match self {
            Problem::Quadratic(_) => 3.0 * self.dim() as f64,
            _ => 6.0 * self.dim() as f64 * batch.max(1) as f64,
        }
    }

    /// Serialized model size in bytes (f64 entries).
    pub fn model_bytes(&self) -> f64 {
        8.0 * self.dim() as f64
    }
}
