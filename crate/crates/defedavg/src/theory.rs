//! Learning-rate schedules, convergence-bound evaluation, staleness tail
//! bounds, constant estimation, and Monte Carlo checks of the sampling
//! identities behind the delayed-averaging analysis.
//!
//! Two schedules are provided. For label-skewed (non-IID) runs:
//!
//! ```text
//! eta     = sqrt(4 n K gap)
//! eta_bar = 1 / (sqrt((4 sigma^2 L + 2 L K G^2) T) * K)
//! valid when  eta_bar <= 1/(8 L K)  and
//!             eta*eta_bar <= min( 1/(4 L K lambda),
//!                 (2 sigma^2 + K G^2) / (8 sigma^2 L K lambda + 4 L G^2 K^2 lambda^2) )
//! predicted avg |grad F|^2 over T rounds:
//!     sqrt(256 gap (16 sigma^2 L + 8 L G^2 K) / (n K T))
//!     + 8 L^2 (sigma^2 + 8 K nu^2) / ((4 sigma^2 L + 2 L K G^2) K T)
//! ```
//!
//! For IID runs:
//!
//! ```text
//! eta     = sqrt(n K gap / 2)
//! eta_bar = 1 / (sqrt(sigma^2 L T) * K)
//! valid when  eta_bar <= 1/(4 sqrt(3) L K)  and  eta*eta_bar <= 1/(4 L K lambda)
//! predicted avg |grad F|^2:  sqrt(128 gap / (n K T)) + 8 L / (K T)
//! ```
//!
//! The closed-form `eta` values grow with `n K gap` and are often far
//! larger than anything practical; they are offered as an explicit
//! opt-in, while tuned presets remain the default path (see
//! [`crate::harness`]).

use crate::algorithms::sample_with_replacement;
use crate::numerics::{RngStream, Weights};
use crate::problems::Problem;
use crate::{Error, Result};

/// Constants describing a problem instance for the rate formulas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProblemConstants {
    /// Smoothness L of every client objective.
    pub smoothness: f64,
    /// Stochastic-gradient noise level sigma (per-draw RMS deviation).
    pub sigma: f64,
    /// Uniform client gradient-norm bound G (used by the non-IID plan).
    pub grad_bound: f64,
    /// Client heterogeneity nu: max |grad F_i - grad F|.
    pub hetero: f64,
    /// Initial suboptimality F(w^0) - F*.
    pub gap: f64,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("L", self.smoothness),
            ("sigma", self.sigma),
            ("G", self.grad_bound),
            ("nu", self.hetero),
            ("gap", self.gap),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::RatePlan(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.smoothness == 0.0 {
            return Err(Error::RatePlan("smoothness L must be positive".into()));
        }
        Ok(())
    }
}

/// A computed learning-rate schedule with its validity status.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePlan {
    pub eta: f64,
    pub eta_bar: f64,
    /// Whether every step-size condition holds at these rates.
    pub conditions_satisfied: bool,
    /// The violated condition (or, when satisfied, the tightest one),
    /// spelled out with its numeric sides.
    pub binding_constraint: String,
    /// Predicted average squared gradient norm after T rounds.
    pub bound_at_t: f64,
}

fn check_common(n: usize, k: usize, t: usize, lambda: u64, c: &ProblemConstants) -> Result<()> {
    c.validate()?;
    if n == 0 || k == 0 {
        return Err(Error::RatePlan("n and K must be at least 1".into()));
    }
    if t == 0 {
        return Err(Error::RatePlan("T must be at least 1".into()));
    }
    if lambda == 0 {
        return Err(Error::RatePlan("lambda must be at least 1".into()));
    }
    if c.sigma == 0.0 {
        return Err(Error::RatePlan(
            "sigma = 0 makes the closed-form eta_bar divide by zero; \
             use tuned preset rates instead"
                .into(),
        ));
    }
    Ok(())
}

/// Conditions as (description, lhs, rhs) triples for `lhs <= rhs`.
fn resolve_conditions(conditions: &[(String, f64, f64)]) -> (bool, String) {
    let mut satisfied = true;
    // Track the most violated (largest lhs/rhs) and the tightest margin.
    let mut worst: Option<(f64, &(String, f64, f64))> = None;
    for cond in conditions {
        let ratio = cond.1 / cond.2;
        if cond.1 > cond.2 {
            satisfied = false;
        }
        if worst.as_ref().is_none_or(|(r, _)| ratio > *r) {
            worst = Some((ratio, cond));
        }
    }
    let (_, cond) = worst.expect("at least one condition");
    let desc = format!("{} (lhs {:.6e}, rhs {:.6e})", cond.0, cond.1, cond.2);
    let binding = if satisfied {
        format!("none violated; tightest: {desc}")
    } else {
        desc
    };
    (satisfied, binding)
}

/// Learning-rate plan for the sampled (non-IID) algorithm.
pub fn niid_rates(
    n: usize,
    k: usize,
    c: &ProblemConstants,
    t: usize,
    lambda: u64,
) -> Result<RatePlan> {
    check_common(n, k, t, lambda, c)?;
    let (nf, kf, tf, lam) = (n as f64, k as f64, t as f64, lambda as f64);
    let (l, s2, g2) = (c.smoothness, c.sigma * c.sigma, c.grad_bound * c.grad_bound);

    let eta = (4.0 * nf * kf * c.gap).sqrt();
    let eta_bar = 1.0 / (((4.0 * s2 * l + 2.0 * l * kf * g2) * tf).sqrt() * kf);

    let product_cap_a = 1.0 / (4.0 * l * kf * lam);
    let product_cap_b = (2.0 * s2 + kf * g2)
        / (8.0 * s2 * l * kf * lam + 4.0 * l * g2 * kf * kf * lam * lam);
    let conditions = vec![
        (
            format!("eta_bar <= 1/(8 L K) = {:.6e}", 1.0 / (8.0 * l * kf)),
            eta_bar,
            1.0 / (8.0 * l * kf),
        ),
        (
            format!(
                "eta*eta_bar <= min(1/(4 L K lambda) = {product_cap_a:.6e}, \
                 (2 sigma^2 + K G^2)/(8 sigma^2 L K lambda + 4 L G^2 K^2 lambda^2) \
                 = {product_cap_b:.6e})"
            ),
            eta * eta_bar,
            product_cap_a.min(product_cap_b),
        ),
    ];
    let (conditions_satisfied, binding_constraint) = resolve_conditions(&conditions);

    let nu2 = c.hetero * c.hetero;
    let bound_at_t = (256.0 * c.gap * (16.0 * s2 * l + 8.0 * l * g2 * kf) / (nf * kf * tf)).sqrt()
        + 8.0 * l * l * (s2 + 8.0 * kf * nu2) / ((4.0 * s2 * l + 2.0 * l * kf * g2) * kf * tf);

    Ok(RatePlan { eta, eta_bar, conditions_satisfied, binding_constraint, bound_at_t })
}

/// Learning-rate plan for the first-arrivals (IID) algorithm.
pub fn iid_rates(
    n: usize,
    k: usize,
    c: &ProblemConstants,
    t: usize,
    lambda: u64,
) -> Result<RatePlan> {
    check_common(n, k, t, lambda, c)?;
    let (nf, kf, tf, lam) = (n as f64, k as f64, t as f64, lambda as f64);
    let (l, s2) = (c.smoothness, c.sigma * c.sigma);

    let eta = (nf * kf * c.gap / 2.0).sqrt();
    let eta_bar = 1.0 / ((s2 * l * tf).sqrt() * kf);

    let cap = 1.0 / (4.0 * 3.0f64.sqrt() * l * kf);
    let product_cap = 1.0 / (4.0 * l * kf * lam);
    let conditions = vec![
        (format!("eta_bar <= 1/(4 sqrt(3) L K) = {cap:.6e}"), eta_bar, cap),
        (
            format!("eta*eta_bar <= 1/(4 L K lambda) = {product_cap:.6e}"),
            eta * eta_bar,
            product_cap,
        ),
    ];
    let (conditions_satisfied, binding_constraint) = resolve_conditions(&conditions);

    let bound_at_t = (128.0 * c.gap / (nf * kf * tf)).sqrt() + 8.0 * l / (kf * tf);

    Ok(RatePlan { eta, eta_bar, conditions_satisfied, binding_constraint, bound_at_t })
}

/// Heuristic high-probability staleness bound:
/// `ceil((1 + ln(N T / delta)) / p)` with `p = 1 - ((N-1)/N)^n`, the
/// per-round inclusion probability. The hidden constant is taken as 1, so
/// treat the result as a planning figure, not a certificate.
pub fn lambda_bound(big_n: usize, n: usize, t: usize, delta: f64) -> u64 {
    assert!(big_n >= 1 && n >= 1 && t >= 1, "counts must be positive");
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0, 1)");
    let p = 1.0 - ((big_n as f64 - 1.0) / big_n as f64).powi(n as i32);
    let raw = (1.0 + (big_n as f64 * t as f64 / delta).ln()) / p;
    raw.ceil() as u64
}

/// Empirical constants for problems without exact ones. All values are
/// max-over-probe estimates, not certified bounds.
pub fn estimate_constants(
    problem: &Problem,
    probe_points: usize,
    samples_per_point: usize,
    stream: &mut RngStream,
) -> ProblemConstants {
    assert!(probe_points >= 1 && samples_per_point >= 1, "counts must be positive");
    let d = problem.dim();
    let big_n = problem.num_clients();
    let mut sigma_sq: f64 = 0.0;
    let mut grad_sq: f64 = 0.0;
    let mut hetero_sq: f64 = 0.0;
    let mut smooth: f64 = 0.0;
    for _ in 0..probe_points {
        let w = Weights::from_vec(stream.gaussian_vec(d)).expect("gaussians are finite");
        let full = problem.full_gradient(&w);
        for i in 0..big_n {
            let gi = problem.client_gradient(i, &w);
            grad_sq = grad_sq.max(gi.norm_sq());
            hetero_sq = hetero_sq.max(gi.sub(&full).expect("same dim").norm_sq());
        }
        // Noise second moment at this probe, cycling through clients.
        let mut acc = 0.0;
        for s in 0..samples_per_point {
            let i = s % big_n;
            let g = problem.stochastic_gradient(i, &w, 1, stream);
            acc += g.sub(&problem.client_gradient(i, &w)).expect("same dim").norm_sq();
        }
        sigma_sq = sigma_sq.max(acc / samples_per_point as f64);

        // Secant smoothness against a second random point.
        let w2 = Weights::from_vec(stream.gaussian_vec(d)).expect("gaussians are finite");
        let dist = w.sub(&w2).expect("same dim").norm_sq().sqrt().max(1e-12);
        for i in 0..big_n {
            let dg = problem
                .client_gradient(i, &w)
                .sub(&problem.client_gradient(i, &w2))
                .expect("same dim")
                .norm_sq()
                .sqrt();
            smooth = smooth.max(dg / dist);
        }
    }
    let w0 = problem.initial_weights();
    let gap = (problem.loss(&w0) - problem.known_optimum().unwrap_or(0.0)).max(0.0);
    ProblemConstants {
        smoothness: smooth.max(1e-12),
        sigma: sigma_sq.sqrt(),
        grad_bound: grad_sq.sqrt(),
        hetero: hetero_sq.sqrt(),
        gap,
    }
}

/// Outcome of the sampled-aggregate unbiasedness check.
#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub mc_mean: Weights,
    pub exact_mean: Weights,
    /// Worst componentwise deviation measured in standard errors.
    pub max_dev_in_se: f64,
    pub trials: usize,
    pub pass: bool,
}

/// Monte Carlo check that the mean of `(1/n) sum_{i in I} delta_i` over
/// resampled multisets `I` equals the plain average `(1/N) sum_i delta_i`,
/// with the frozen `deltas` as input. Passes when every component of the
/// Monte Carlo mean is within 4 standard errors of the exact mean.
pub fn mc_unbiasedness_check(
    deltas: &[Weights],
    n: usize,
    trials: usize,
    stream: &mut RngStream,
) -> UnbiasednessReport {
    mc_unbiasedness_check_with_sampler(deltas, n, trials, stream, sample_with_replacement)
}

/// Same check with a pluggable sampler — lets tests inject a biased
/// sampler as a negative control.
pub fn mc_unbiasedness_check_with_sampler(
    deltas: &[Weights],
    n: usize,
    trials: usize,
    stream: &mut RngStream,
    mut sampler: impl FnMut(usize, usize, &mut RngStream) -> Vec<usize>,
) -> UnbiasednessReport {
    assert!(trials >= 1000, "need enough trials for the SE band to mean something");
    assert!(!deltas.is_empty() && n >= 1);
    let big_n = deltas.len();
    let d = deltas[0].dim();

    let mut exact_mean = Weights::zeros(d);
    for delta in deltas {
        exact_mean.add_scaled(delta, 1.0 / big_n as f64).expect("same dim");
    }

    // Accumulate componentwise first and second moments of the aggregate.
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut aggregate = Weights::zeros(d);
    for _ in 0..trials {
        aggregate.scale(0.0);
        for i in sampler(big_n, n, stream) {
            aggregate.add_scaled(&deltas[i], 1.0 / n as f64).expect("same dim");
        }
        for (j, v) in aggregate.as_slice().iter().enumerate() {
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let tf = trials as f64;
    let mc_mean = Weights::from_vec(sum.iter().map(|s| s / tf).collect()).expect("finite");
    let mut max_dev_in_se: f64 = 0.0;
    for j in 0..d {
        let mean = mc_mean[j];
        let var = (sum_sq[j] / tf - mean * mean).max(0.0);
        // The SE floor guards the N=1 case, where the aggregate is constant
        // and the only deviation is float accumulation across trials.
        let floor = 1e-12 * (1.0 + exact_mean[j].abs());
        let se = (var / tf).sqrt().max(floor);
        max_dev_in_se = max_dev_in_se.max((mean - exact_mean[j]).abs() / se);
    }
    UnbiasednessReport {
        mc_mean,
        exact_mean,
        max_dev_in_se,
        trials,
        pass: max_dev_in_se <= 4.0,
    }
}

/// Outcome of the multiset noise-variance check.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    /// Empirical mean of `|sum_{i in I} sum_k (g - grad F_i)|^2`.
    pub empirical: f64,
    /// Standard error of that mean.
    pub se: f64,
    /// Independent-noise value `n K sigma^2` (exact for fresh draws).
    pub reference: f64,
    /// The analysis bound `2 n K sigma^2`.
    pub bound: f64,
    /// True when sigma = 0 collapses everything to zero.
    pub trivial: bool,
    pub pass: bool,
}

/// Monte Carlo check of the variance of the summed stochastic-gradient
/// noise over a sampled multiset: with every local step drawing fresh
/// noise, the second moment is exactly `n K sigma^2`, within the
/// analysis bound `2 n K sigma^2`.
///
/// Requires a problem with an exactly known sigma (the quadratic).
pub fn mc_variance_check(
    problem: &Problem,
    n: usize,
    k: usize,
    trials: usize,
    stream: &mut RngStream,
) -> Result<VarianceReport> {
    let sigma = problem.exact_sigma().ok_or_else(|| {
        Error::RatePlan("variance check needs a problem with exact sigma (quadratic)".into())
    })?;
    assert!(n >= 1 && k >= 1 && trials >= 1);
    let big_n = problem.num_clients();
    let d = problem.dim();
    let reference = (n * k) as f64 * sigma * sigma;
    let bound = 2.0 * reference;
    if sigma == 0.0 {
        return Ok(VarianceReport {
            empirical: 0.0,
            se: 0.0,
            reference,
            bound,
            trivial: true,
            pass: true,
        });
    }

    let probe = Weights::zeros(d);
    let exact: Vec<Weights> =
        (0..big_n).map(|i| problem.client_gradient(i, &probe)).collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut noise_total = Weights::zeros(d);
    for _ in 0..trials {
        noise_total.scale(0.0);
        for i in sample_with_replacement(big_n, n, stream) {
            for _ in 0..k {
                let g = problem.stochastic_gradient(i, &probe, 1, stream);
                noise_total.add_scaled(&g, 1.0).expect("same dim");
                noise_total.add_scaled(&exact[i], -1.0).expect("same dim");
            }
        }
        let v = noise_total.norm_sq();
        sum += v;
        sum_sq += v * v;
    }
    let tf = trials as f64;
    let empirical = sum / tf;
    let var = (sum_sq / tf - empirical * empirical).max(0.0);
    let se = (var / tf).sqrt();
    let pass = (empirical - reference).abs() <= 4.0 * se && empirical <= bound + 4.0 * se;
    Ok(VarianceReport { empirical, se, reference, bound, trivial: false, pass })
}
