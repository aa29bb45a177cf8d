//! Synthetic quadratic objective with exactly known constants.
//!
//! Client `i` minimizes `F_i(w) = 0.5 |w - c_i|^2` with center
//! `c_i = c_bar + nu * u_i`, where the `u_i` are unit vectors summing to
//! zero. Consequences used throughout the test suite:
//!
//! * the global objective is `F(w) = 0.5 |w - c_bar|^2 + nu^2 / 2`, with
//!   minimizer `c_bar` and optimal value `nu^2 / 2`;
//! * every client gradient satisfies `|grad F_i - grad F| = nu` exactly;
//! * smoothness is exactly 1;
//! * stochastic gradients add isotropic Gaussian noise with
//!   `E |noise|^2 = sigma^2` exactly.
//!
//! The shared center `c_bar` points along the all-ones direction and is
//! scaled so that `F(0) - F* = gap`, making the initial suboptimality at
//! `w = 0` a constructor parameter.

use crate::numerics::{RngStream, Weights};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Quadratic {
    centers: Vec<Weights>,
    c_bar: Weights,
    nu: f64,
    sigma: f64,
}

/// Builds the quadratic family described in the module docs.
///
/// With `nu > 0` the zero-sum unit offsets are laid out as evenly spaced
/// directions in the plane of the first two coordinates (alternating signs
/// when `dim == 1`), which requires `n_clients >= 2` and, for odd
/// `n_clients`, `dim >= 2`.
pub fn make_quadratic(
    n_clients: usize,
    dim: usize,
    nu: f64,
    sigma: f64,
    gap: f64,
) -> Result<Quadratic> {
    if n_clients == 0 || dim == 0 {
        return Err(Error::InvalidProblem(
            "quadratic needs at least one client and one dimension".into(),
        ));
    }
    if nu < 0.0 || sigma < 0.0 || gap < 0.0 {
        return Err(Error::InvalidProblem(
            "nu, sigma, and gap must be nonnegative".into(),
        ));
    }
    let scale = (2.0 * gap / dim as f64).sqrt();
    let c_bar = Weights::from_vec(vec![scale; dim])?;
    let offsets = unit_offsets(n_clients, dim, nu)?;
    let centers = offsets
        .into_iter()
        .map(|u| {
            let mut c = c_bar.clone();
            c.add_scaled(&u, nu).expect("offsets share the dimension");
            c
        })
        .collect();
    Ok(Quadratic { centers, c_bar, nu, sigma })
}

/// Unit vectors summing to zero (or zero vectors when `nu == 0`).
fn unit_offsets(n: usize, dim: usize, nu: f64) -> Result<Vec<Weights>> {
    if nu == 0.0 {
        return Ok(vec![Weights::zeros(dim); n]);
    }
    if n == 1 {
        return Err(Error::InvalidProblem(
            "one client cannot have nonzero heterogeneity: offsets must sum to zero".into(),
        ));
    }
    if dim == 1 {
        if !n.is_multiple_of(2) {
            return Err(Error::InvalidProblem(
                "odd client counts need dim >= 2 for zero-sum unit offsets".into(),
            ));
        }
        return Ok((0..n)
            .map(|i| Weights::from_vec(vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).unwrap())
            .collect());
    }
    // n evenly spaced directions on the unit circle in coordinates (0, 1);
    // the n-th roots of unity sum to zero for n >= 2.
    Ok((0..n)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / n as f64;
            let mut u = Weights::zeros(dim);
            u[0] = angle.cos();
            u[1] = angle.sin();
            u
        })
        .collect())
}

impl Quadratic {
    pub fn dim(&self) -> usize {
        self.c_bar.dim()
    }

    pub fn num_clients(&self) -> usize {
        self.centers.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Global minimizer `c_bar`.
    pub fn minimizer(&self) -> &Weights {
        &self.c_bar
    }

    /// Optimal value `F* = nu^2 / 2`.
    pub fn optimal_value(&self) -> f64 {
        0.5 * self.nu * self.nu
    }

    pub fn client_loss(&self, client: usize, w: &Weights) -> f64 {
        0.5 * w.sub(&self.centers[client]).expect("dimension fixed at construction").norm_sq()
    }

    pub fn client_gradient(&self, client: usize, w: &Weights) -> Weights {
        w.sub(&self.centers[client]).expect("dimension fixed at construction")
    }

    /// `grad F_i(w)` plus isotropic Gaussian noise with exact second
    /// moment `sigma^2`.
    pub fn stochastic_gradient(&self, client: usize, w: &Weights, stream: &mut RngStream) -> Weights {
        let mut g = self.client_gradient(client, w);
        if self.sigma > 0.0 {
            let noise_scale = self.sigma / (self.dim() as f64).sqrt();
            for v in g.as_mut_slice() {
                *v += noise_scale * stream.gaussian();
            }
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Problem;

    #[test]
    fn gap_at_zero_matches_parameter() {
        let p = Problem::Quadratic(make_quadratic(10, 8, 0.5, 0.0, 2.0).unwrap());
        let zero = Weights::zeros(8);
        let gap = p.loss(&zero) - p.known_optimum().unwrap();
        assert!((gap - 2.0).abs() < 1e-12, "gap {gap}");
    }

    #[test]
    fn optimum_is_shared_center() {
        let q = make_quadratic(7, 5, 0.3, 0.0, 1.0).unwrap();
        let p = Problem::Quadratic(q.clone());
        let at_min = p.loss(q.minimizer());
        assert!((at_min - q.optimal_value()).abs() < 1e-12);
        let g = p.full_gradient(q.minimizer());
        assert!(g.norm_sq() < 1e-20, "gradient at minimizer {:?}", g);
    }

    #[test]
    fn heterogeneity_is_exact_for_every_client() {
        let q = make_quadratic(9, 4, 0.7, 0.0, 1.0).unwrap();
        let p = Problem::Quadratic(q.clone());
        let w = Weights::from_vec(vec![0.2, -1.0, 3.0, 0.1]).unwrap();
        let full = p.full_gradient(&w);
        for i in 0..9 {
            let dev = p.client_gradient(i, &w).sub(&full).unwrap().norm_sq().sqrt();
            assert!((dev - 0.7).abs() < 1e-12, "client {i}: deviation {dev}");
        }
    }

    #[test]
    fn offsets_sum_to_zero_even_and_odd() {
        for n in [2usize, 3, 4, 9, 10] {
            let q = make_quadratic(n, 3, 1.0, 0.0, 0.0).unwrap();
            let mut sum = Weights::zeros(3);
            for c in &q.centers {
                sum.add_scaled(c, 1.0).unwrap();
            }
            // centers sum to n * c_bar = 0 here since gap = 0
            assert!(sum.norm_sq() < 1e-24, "n={n}: {:?}", sum);
        }
    }

    #[test]
    fn noise_second_moment_matches_sigma() {
        let q = make_quadratic(3, 6, 0.0, 1.5, 1.0).unwrap();
        let w = Weights::zeros(6);
        let mut stream = RngStream::derive(12, "noise-moment");
        let trials = 50_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let g = q.stochastic_gradient(0, &w, &mut stream);
            acc += g.sub(&q.client_gradient(0, &w)).unwrap().norm_sq();
        }
        let mean = acc / trials as f64;
        // E|noise|^2 = sigma^2 = 2.25; chi-square concentration makes 2% generous.
        assert!((mean - 2.25).abs() < 0.05, "second moment {mean}");
    }

    #[test]
    fn sigma_zero_is_deterministic() {
        let q = make_quadratic(2, 3, 0.0, 0.0, 1.0).unwrap();
        let w = Weights::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let mut stream = RngStream::derive(1, "no-noise");
        let before = stream.clone().next_u64();
        let g = q.stochastic_gradient(1, &w, &mut stream);
        assert_eq!(g, q.client_gradient(1, &w));
        // no RNG consumed when sigma == 0
        assert_eq!(stream.next_u64(), before);
    }

    #[test]
    fn degenerate_configs_error() {
        assert!(make_quadratic(1, 4, 0.5, 0.0, 1.0).is_err());
        assert!(make_quadratic(3, 1, 0.5, 0.0, 1.0).is_err());
        assert!(make_quadratic(0, 4, 0.0, 0.0, 1.0).is_err());
        assert!(make_quadratic(4, 2, -0.1, 0.0, 1.0).is_err());
        assert!(make_quadratic(4, 1, 0.5, 0.0, 1.0).is_ok()); // even n, dim 1
    }
}
