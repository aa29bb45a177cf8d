//! The built-in invariant suite behind `defedavg verify`.
//!
//! Every check runs on synthetic problems with fixed seeds — no data
//! files, no network — and each reports one pass/fail line. The suite
//! covers analytic-gradient correctness, unbiasedness of stochastic
//! gradients and of client sampling, the multiset noise-variance
//! identity, the two exact algorithm reductions, the compact-form
//! replay oracle, and the staleness planning bound.

use crate::algorithms::{compact_oracle, Policy, PolicyKind};
use crate::fl_core::SendPolicy;
use crate::numerics::{
    finite_difference_gradient, relative_l2_error, RngStream, Weights,
};
use crate::problems::{
    make_logreg, make_mlp, make_quadratic, partition, Dataset, PartitionScheme, Problem,
};
use crate::simulator::{run, staleness_report, RunConfig};
use crate::theory::{lambda_bound, mc_unbiasedness_check, mc_variance_check};

/// Outcome of one invariant check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    /// One-line quantitative summary (shown on failure, logged always).
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name, pass, detail }
}

fn blob_problems() -> (Problem, Problem) {
    let mut stream = RngStream::derive(42, "verify-blobs");
    let train = Dataset::synthetic_blobs(120, 5, 3, 3.0, &mut stream).unwrap();
    let part = partition(&train, PartitionScheme::Iid, 6, &mut stream.child("part")).unwrap();
    let logreg =
        Problem::LogReg(make_logreg(train.clone(), None, part.clone(), 0.01).unwrap());
    let mlp = Problem::Mlp(make_mlp(train, None, part, 6, 42).unwrap());
    (logreg, mlp)
}

fn gradient_check(name: &'static str, problem: &Problem, tol: f64) -> CheckResult {
    let mut stream = RngStream::derive(7, "verify-gradcheck");
    let w = Weights::from_vec(
        stream.gaussian_vec(problem.dim()).iter().map(|v| 0.3 * v).collect(),
    )
    .unwrap();
    let fd = finite_difference_gradient(|x| problem.loss(x), &w, 1e-6).expect("finite loss");
    let exact = problem.full_gradient(&w);
    let err = relative_l2_error(&fd, &exact).expect("same dim");
    check(name, err <= tol, format!("relative error {err:.3e} (tolerance {tol:.0e})"))
}

fn stochastic_unbiasedness(name: &'static str, problem: &Problem, trials: usize) -> CheckResult {
    let mut stream = RngStream::derive(9, "verify-sg-mean");
    let w = Weights::from_vec(
        stream.gaussian_vec(problem.dim()).iter().map(|v| 0.2 * v).collect(),
    )
    .unwrap();
    let client = 0;
    let exact = problem.client_gradient(client, &w);
    let d = problem.dim();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..trials {
        let g = problem.stochastic_gradient(client, &w, 2, &mut stream);
        for (j, v) in g.as_slice().iter().enumerate() {
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let tf = trials as f64;
    let mut worst = 0.0f64;
    for j in 0..d {
        let mean = sum[j] / tf;
        let var = (sum_sq[j] / tf - mean * mean).max(0.0);
        let se = (var / tf).sqrt().max(1e-12 * (1.0 + exact[j].abs()));
        worst = worst.max((mean - exact[j]).abs() / se);
    }
    check(name, worst <= 4.0, format!("worst component deviation {worst:.2} SE (limit 4)"))
}

/// Runs the full suite and returns one result per check.
pub fn run_verification_suite() -> Vec<CheckResult> {
    let mut results = Vec::new();

    let quad = Problem::Quadratic(make_quadratic(6, 5, 0.4, 0.0, 1.0).unwrap());
    results.push(gradient_check("quadratic analytic gradient", &quad, 1e-7));
    let (logreg, mlp) = blob_problems();
    results.push(gradient_check("logistic-regression gradient", &logreg, 1e-6));
    results.push(gradient_check("mlp backprop gradient", &mlp, 1e-5));

    let noisy_quad = Problem::Quadratic(make_quadratic(6, 5, 0.4, 1.0, 1.0).unwrap());
    results.push(stochastic_unbiasedness(
        "quadratic stochastic gradient is unbiased",
        &noisy_quad,
        20_000,
    ));
    results.push(stochastic_unbiasedness(
        "logreg minibatch gradient is unbiased",
        &logreg,
        20_000,
    ));
    results.push(stochastic_unbiasedness("mlp minibatch gradient is unbiased", &mlp, 20_000));

    // Client sampling: the resampled multiset average is an unbiased
    // estimate of the plain average.
    {
        let mut s = RngStream::derive(11, "verify-sampling");
        let deltas: Vec<Weights> =
            (0..20).map(|_| Weights::from_vec(s.gaussian_vec(5)).unwrap()).collect();
        let rep = mc_unbiasedness_check(&deltas, 5, 50_000, &mut s.child("trials"));
        results.push(check(
            "client sampling is unbiased",
            rep.pass,
            format!("worst component deviation {:.2} SE (limit 4)", rep.max_dev_in_se),
        ));
    }

    // Summed local-step noise over a sampled multiset has second moment
    // n*K*sigma^2 when every step draws fresh noise.
    {
        let p = Problem::Quadratic(make_quadratic(12, 6, 0.0, 1.0, 1.0).unwrap());
        let mut s = RngStream::derive(12, "verify-variance");
        let rep = mc_variance_check(&p, 5, 4, 20_000, &mut s).unwrap();
        results.push(check(
            "multiset noise variance matches",
            rep.pass,
            format!(
                "empirical {:.3} vs reference {:.3} (SE {:.3}, bound {:.3})",
                rep.empirical, rep.reference, rep.se, rep.bound
            ),
        ));
    }

    // Reduction 1: with synchronous gating, the buffered sampled
    // algorithm reproduces the synchronous baseline bit for bit.
    {
        let p = Problem::Quadratic(make_quadratic(16, 4, 0.3, 0.7, 1.0).unwrap());
        let policy = |kind| {
            Policy::new(kind, 5, 4, 0.8, 0.05, SendPolicy::default()).unwrap()
        };
        let mut fedavg_cfg = RunConfig::new(policy(PolicyKind::FedAvg), 20, 2, 3141);
        fedavg_cfg.eval_every = 5;
        let mut sync_cfg = RunConfig::new(policy(PolicyKind::DefedavgNiid), 20, 2, 3141);
        sync_cfg.eval_every = 5;
        sync_cfg.sync_mode = true;
        let pass = match (run(&p, &fedavg_cfg), run(&p, &sync_cfg)) {
            (Ok(a), Ok(b)) => {
                a.final_weights == b.final_weights && a.participation_log == b.participation_log
            }
            _ => false,
        };
        results.push(check(
            "sync-gated run equals the synchronous baseline",
            pass,
            "final weights and participation logs compared bitwise".into(),
        ));
    }

    // Reduction 2: the one-step gradient method is the K=1, unit-eta
    // special case of the first-arrivals algorithm.
    {
        let p = Problem::Quadratic(make_quadratic(10, 4, 0.3, 0.7, 1.0).unwrap());
        let mut iid = RunConfig::new(
            Policy::new(PolicyKind::DefedavgIid, 3, 1, 1.0, 0.02, SendPolicy::default())
                .unwrap(),
            20,
            2,
            77,
        );
        iid.eval_every = 5;
        let mut asysg = iid.clone();
        asysg.policy = Policy::asysg(3, 0.02).unwrap();
        let pass = match (run(&p, &iid), run(&p, &asysg)) {
            (Ok(a), Ok(b)) => {
                a.final_weights == b.final_weights && a.participation_log == b.participation_log
            }
            _ => false,
        };
        results.push(check(
            "one-step method is the K=1 special case",
            pass,
            "final weights and participation logs compared bitwise".into(),
        ));
    }

    // The compact double-sum replay reproduces the buffered engine.
    {
        let p = Problem::Quadratic(make_quadratic(10, 4, 0.3, 0.7, 1.0).unwrap());
        let cfg = RunConfig::new(
            Policy::new(PolicyKind::DefedavgNiid, 3, 4, 0.8, 0.05, SendPolicy::default())
                .unwrap(),
            15,
            2,
            5,
        );
        let (pass, detail) = match run(&p, &cfg) {
            Ok(r) => {
                let oracle = compact_oracle(
                    &p,
                    &p.initial_weights(),
                    &r.history,
                    cfg.policy.eta,
                    cfg.policy.eta_bar,
                    cfg.policy.n,
                    cfg.policy.k_local,
                    cfg.batch,
                    cfg.root_seed,
                )
                .unwrap();
                let err = oracle.max_abs_diff(&r.final_weights).unwrap();
                (err < 1e-10, format!("max coordinate deviation {err:.3e} (limit 1e-10)"))
            }
            Err(e) => (false, e.to_string()),
        };
        results.push(check("compact-form oracle matches the engine", pass, detail));
    }

    // Observed staleness stays under the planning bound.
    {
        let p = Problem::Quadratic(make_quadratic(20, 4, 0.3, 0.5, 1.0).unwrap());
        let cfg = RunConfig::new(
            Policy::new(PolicyKind::DefedavgIid, 5, 3, 0.5, 0.02, SendPolicy::default())
                .unwrap(),
            300,
            2,
            13,
        );
        let (pass, detail) = match run(&p, &cfg) {
            Ok(r) => {
                let observed = staleness_report(&r).max;
                let bound = lambda_bound(20, 5, 300, 0.01);
                (
                    (observed as u64) <= bound,
                    format!("observed max staleness {observed}, planning bound {bound}"),
                )
            }
            Err(e) => (false, e.to_string()),
        };
        results.push(check("observed staleness within the planning bound", pass, detail));
    }

    results
}
