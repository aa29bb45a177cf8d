//! Deterministic numerics: keyed RNG streams, dense weight vectors, and
//! finite-difference gradient checking.
//!
//! Randomness is organized as named streams derived from a single root seed
//! by hashing `root_seed || label`. Streams with different labels are
//! statistically independent and can be re-derived anywhere without shared
//! mutable state, which is what makes event-order changes in the simulator
//! harmless to reproducibility: a training that starts earlier or later
//! still draws from the same stream.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const TWO_POW_NEG53: f64 = 1.0 / (1u64 << 53) as f64;

/// A named, reproducible random stream.
///
/// Identical `(root_seed, label)` pairs always yield identical draw
/// sequences; distinct labels yield independent sequences.
#[derive(Debug, Clone)]
pub struct RngStream {
    root_seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Derives the stream for `label` under `root_seed`.
    ///
    /// The label must be nonempty; empty labels are almost always a bug in
    /// the caller (two "anonymous" streams would collide).
    pub fn derive(root_seed: u64, label: &str) -> Self {
        assert!(!label.is_empty(), "rng stream label must be nonempty");
        let mut hasher = Sha256::new();
        hasher.update(root_seed.to_le_bytes());
        hasher.update([0x1f]); // separator so seed bytes cannot bleed into the label
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        RngStream {
            root_seed,
            label: label.to_string(),
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    /// Derives a child stream labelled `parent_label/suffix`.
    pub fn child(&self, suffix: &str) -> Self {
        RngStream::derive(self.root_seed, &format!("{}/{}", self.label, suffix))
    }

    /// The label this stream was derived with.
    pub fn label(&self) -> &str {
        &self.label
    }

    /// Next raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG53
    }

    /// Unbiased uniform draw in `[0, n)`; rejection-sampled so every value
    /// has exactly equal probability. `n` must be positive.
    pub fn uniform_int(&mut self, n: u64) -> u64 {
        assert!(n > 0, "uniform_int requires n > 0");
        // Reject draws beyond the largest multiple of n below 2^64.
        let overhang = (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= u64::MAX - overhang {
                return x % n;
            }
        }
    }

    /// Standard normal draw via Box-Muller (consumes two raw draws).
    pub fn gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the logarithm stays finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG53;
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Vector of `d` independent standard normal draws.
    pub fn gaussian_vec(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.gaussian()).collect()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_int(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Dense model parameter vector.
///
/// All construction paths and state transitions reject non-finite entries,
/// so a NaN can never propagate silently through a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    values: Vec<f64>,
}

impl Weights {
    /// All-zero vector of dimension `d`.
    pub fn zeros(d: usize) -> Self {
        Weights { values: vec![0.0; d] }
    }

    /// Builds from raw values, rejecting non-finite entries.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("weights component {i}")));
        }
        Ok(Weights { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Errors (naming `context`) if any entry is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("{context} (component {i})"))),
            None => Ok(()),
        }
    }

    fn check_dim(&self, other: &Weights) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Weights, c: f64) -> Result<()> {
        self.check_dim(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &Weights) -> Result<Weights> {
        self.check_dim(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Weights { values })
    }

    /// `self *= c`.
    pub fn scale(&mut self, c: f64) {
        for a in &mut self.values {
            *a *= c;
        }
    }

    pub fn dot(&self, other: &Weights) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Squared Euclidean norm.
    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &Weights) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl std::ops::Index<usize> for Weights {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for Weights {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// Central-difference gradient of `loss` at `w` with step `h`.
///
/// Used as the independent oracle against analytic gradients; cost is two
/// loss evaluations per coordinate.
pub fn finite_difference_gradient<F>(loss: F, w: &Weights, h: f64) -> Result<Weights>
where
    F: Fn(&Weights) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = Weights::zeros(w.dim());
    let mut probe = w.clone();
    for i in 0..w.dim() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss(&probe);
        probe[i] = orig - h;
        let down = loss(&probe);
        probe[i] = orig;
        let g = (up - down) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite-difference gradient component {i}"
            )));
        }
        grad[i] = g;
    }
    Ok(grad)
}

/// Relative L2 distance `|a - b| / max(|a|, |b|, floor)`; used by gradient
/// checks so that near-zero gradients do not inflate the ratio.
pub fn relative_l2_error(a: &Weights, b: &Weights) -> Result<f64> {
    let diff = a.sub(b)?.norm_sq().sqrt();
    let denom = a.norm_sq().sqrt().max(b.norm_sq().sqrt()).max(1e-12);
    Ok(diff / denom)
}
