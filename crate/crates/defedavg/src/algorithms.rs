//! Participation policies and the compact-recursion replay oracle.
//!
//! Five server policies share the mechanics in [`crate::fl_core`]:
//!
//! * `FedAvg` — synchronous: sample a multiset of clients, broadcast to
//!   them, wait for all their fresh updates.
//! * `DefedavgNiid` — sample a multiset, consume buffered (possibly
//!   stale) updates, blocking only on clients whose buffer is empty.
//! * `DefedavgIid` — no sampling: the first `n` uploads to arrive form
//!   the round.
//! * `FedBuff` — identical first-`n`-arrivals machinery, kept as its own
//!   kind so it can be configured/tabulated separately (notably on
//!   label-skewed data, where arrival order biases participation).
//! * `Asysg` — first-arrivals with `K = 1` and a single learning rate
//!   (the server rate is fixed at 1 and the local rate is the tunable).
//!
//! [`compact_oracle`] recomputes a run's final weights directly from the
//! participation history via the flat recursion
//! `w^{t+1} = w^t - (eta*eta_bar/n) * sum_i sum_k g_ik`, sharing nothing
//! with the buffer/event machinery except the per-training stream labels.
//! Matching the simulator's weights is a strong end-to-end check.

use crate::fl_core::{aggregate, global_step, LocalUpdate, SendPolicy, ServerState};
use crate::numerics::{RngStream, Weights};
use crate::problems::Problem;
use crate::{Error, Result};

/// Which server policy drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    FedAvg,
    DefedavgNiid,
    DefedavgIid,
    FedBuff,
    Asysg,
}

impl PolicyKind {
    /// Whether rounds take the first `n` uploads instead of sampling.
    pub fn first_arrivals(self) -> bool {
        matches!(self, PolicyKind::DefedavgIid | PolicyKind::FedBuff | PolicyKind::Asysg)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FedAvg => "fedavg",
            PolicyKind::DefedavgNiid => "defedavg_niid",
            PolicyKind::DefedavgIid => "defedavg_iid",
            PolicyKind::FedBuff => "fedbuff",
            PolicyKind::Asysg => "asysg",
        }
    }
}

/// A fully parameterized policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Participants aggregated per round.
    pub n: usize,
    pub send_policy: SendPolicy,
    /// Local SGD steps per training (K).
    pub k_local: usize,
    /// Global (server) learning rate.
    pub eta: f64,
    /// Local (client) learning rate.
    pub eta_bar: f64,
}

impl Policy {
    /// Builds a policy, enforcing per-kind structural constraints.
    pub fn new(
        kind: PolicyKind,
        n: usize,
        k_local: usize,
        eta: f64,
        eta_bar: f64,
        send_policy: SendPolicy,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if k_local == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if !(eta.is_finite() && eta_bar.is_finite()) || eta < 0.0 || eta_bar < 0.0 {
            return Err(Error::InvalidConfig("learning rates must be finite and >= 0".into()));
        }
        if kind == PolicyKind::Asysg && (k_local != 1 || eta != 1.0) {
            return Err(Error::InvalidConfig(
                "asysg has no local loop: K must be 1 and the single rate goes in eta_bar \
                 (eta is fixed at 1)"
                    .into(),
            ));
        }
        Ok(Policy { kind, n, send_policy, k_local, eta, eta_bar })
    }

    /// Asynchronous SGD with one tunable step size.
    pub fn asysg(n: usize, rate: f64) -> Result<Self> {
        Policy::new(PolicyKind::Asysg, n, 1, 1.0, rate, SendPolicy::default())
    }
}

/// Round participation: either an explicit sampled multiset or a count to
/// be filled by upload arrival order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParticipantSpec {
    /// Client ids in draw order; duplicates allowed and meaningful.
    Sampled(Vec<usize>),
    /// Take the first `n` uploads ordered by (arrival_time, client_id).
    FirstArrivals(usize),
}

/// `n` independent uniform draws over `[0, num_clients)`, duplicates kept.
pub fn sample_with_replacement(num_clients: usize, n: usize, stream: &mut RngStream) -> Vec<usize> {
    assert!(num_clients >= 1 && n >= 1, "need at least one client and one draw");
    (0..n)
        .map(|_| stream.uniform_int(num_clients as u64) as usize)
        .collect()
}

/// Participation for one round. Sampling policies consume `n` draws from
/// `stream` (the caller derives it per round); first-arrivals policies
/// leave the stream untouched.
pub fn select_participants(
    policy: &Policy,
    num_clients: usize,
    stream: &mut RngStream,
) -> ParticipantSpec {
    if policy.kind.first_arrivals() {
        ParticipantSpec::FirstArrivals(policy.n)
    } else {
        ParticipantSpec::Sampled(sample_with_replacement(num_clients, policy.n, stream))
    }
}

/// Completes one global round: validates causality, aggregates the `n`
/// updates (multiset order), applies the global step, and logs
/// `(client_id, base_round)` pairs.
pub fn server_round(
    policy: &Policy,
    server: &mut ServerState,
    updates: &[&LocalUpdate],
) -> Result<()> {
    if updates.len() != policy.n {
        return Err(Error::InvalidConfig(format!(
            "round {} collected {} updates for n = {}",
            server.round,
            updates.len(),
            policy.n
        )));
    }
    for u in updates {
        if u.base_round > server.round {
            return Err(Error::InvalidConfig(format!(
                "causality violation: client {} update based on round {} consumed in round {}",
                u.client_id, u.base_round, server.round
            )));
        }
    }
    let mean = aggregate(updates, policy.n)?;
    let entry: Vec<(usize, usize)> = updates.iter().map(|u| (u.client_id, u.base_round)).collect();
    global_step(server, &mean)?;
    server.participation_log.push(entry);
    Ok(())
}

/// One asynchronous-SGD server step: `w <- w - rate * gradient`, where
/// the single rate lives in `server.eta`.
pub fn asysg_step(server: &mut ServerState, gradient: &Weights) -> Result<()> {
    global_step(server, gradient)
}

/// One training instance in a run's history: which client trained, from
/// which round's model, and its repetition index (how many trainings that
/// client had already started from that same base round). The triple
/// determines the training's RNG stream label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainRef {
    pub client: usize,
    pub base_round: usize,
    pub rep: usize,
}

/// Stream label for one training instance; shared by the simulator and
/// the replay oracle so both draw identical stochastic gradients.
pub fn train_label(r: &TrainRef) -> String {
    format!("train/{}/{}/{}", r.client, r.base_round, r.rep)
}

/// Recomputes `w^T` from a run's participation history via the compact
/// recursion, independent of buffers, events, and deltas.
///
/// `history[t]` lists the round-`t` participants in aggregation order;
/// each participant's K local iterates are replayed from this function's
/// own reconstruction of `w^{base_round}`.
#[allow(clippy::too_many_arguments)]
pub fn compact_oracle(
    problem: &Problem,
    w0: &Weights,
    history: &[Vec<TrainRef>],
    eta: f64,
    eta_bar: f64,
    n: usize,
    k_local: usize,
    batch: usize,
    root_seed: u64,
) -> Result<Weights> {
    let mut trajectory: Vec<Weights> = vec![w0.clone()];
    for (t, round) in history.iter().enumerate() {
        if round.len() != n {
            return Err(Error::InvalidConfig(format!(
                "replay divergence: history round {t} lists {} participants for n = {n}",
                round.len()
            )));
        }
        let mut grad_sum = Weights::zeros(w0.dim());
        for r in round {
            if r.base_round > t {
                return Err(Error::InvalidConfig(format!(
                    "replay divergence: round {t} references future base {}",
                    r.base_round
                )));
            }
            let mut local = trajectory[r.base_round].clone();
            let mut stream = RngStream::derive(root_seed, &train_label(r));
            for _ in 0..k_local {
                let g = problem.stochastic_gradient(r.client, &local, batch, &mut stream);
                grad_sum.add_scaled(&g, 1.0)?;
                local.add_scaled(&g, -eta_bar)?;
            }
        }
        let mut next = trajectory[t].clone();
        next.add_scaled(&grad_sum, -eta * eta_bar / n as f64)?;
        next.ensure_finite(&format!("oracle weights after round {t}"))?;
        trajectory.push(next);
    }
    Ok(trajectory.pop().expect("trajectory starts nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_quadratic;

    fn policy(kind: PolicyKind, n: usize) -> Policy {
        Policy::new(kind, n, 5, 1.0, 0.1, SendPolicy::default()).unwrap()
    }

    #[test]
    fn single_client_sampling_is_constant() {
        let mut s = RngStream::derive(0, "sample/0");
        assert_eq!(sample_with_replacement(1, 5, &mut s), vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn inclusion_frequency_matches_closed_form() {
        // P(client included in a round) = 1 - (1 - 1/N)^n.
        let (big_n, n, rounds) = (100usize, 10usize, 100_000usize);
        let p = 1.0 - (1.0 - 1.0 / big_n as f64).powi(n as i32);
        let mut included = vec![0usize; big_n];
        for t in 0..rounds {
            let mut s = RngStream::derive(17, &format!("sample/{t}"));
            let mut multiset = sample_with_replacement(big_n, n, &mut s);
            multiset.sort_unstable();
            multiset.dedup();
            for c in multiset {
                included[c] += 1;
            }
        }
        let se = (p * (1.0 - p) / rounds as f64).sqrt();
        for (c, &count) in included.iter().enumerate() {
            let freq = count as f64 / rounds as f64;
            assert!(
                (freq - p).abs() <= 4.0 * se,
                "client {c}: inclusion {freq} vs {p} (4 SE = {})",
                4.0 * se
            );
        }
    }

    #[test]
    fn two_by_two_ordered_outcomes_are_uniform() {
        // N=2, n=2: four ordered outcomes, each probability 1/4.
        let trials = 100_000usize;
        let mut counts = [0usize; 4];
        for t in 0..trials {
            let mut s = RngStream::derive(23, &format!("sample/{t}"));
            let draw = sample_with_replacement(2, 2, &mut s);
            counts[draw[0] * 2 + draw[1]] += 1;
        }
        let expected = trials as f64 / 4.0;
        let chi_sq: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 0.999 quantile of chi-square with 3 degrees of freedom.
        assert!(chi_sq < 16.266, "chi-square {chi_sq}, counts {counts:?}");
    }

    #[test]
    fn selection_counts_pass_goodness_of_fit() {
        // Each client's selection count over the run is Binomial(nT, 1/N);
        // jointly the counts are multinomial, so Pearson's statistic is
        // chi-square with N-1 degrees of freedom.
        let (big_n, n, rounds) = (50usize, 5usize, 2000usize);
        let mut counts = vec![0usize; big_n];
        for t in 0..rounds {
            let mut s = RngStream::derive(31, &format!("sample/{t}"));
            for c in sample_with_replacement(big_n, n, &mut s) {
                counts[c] += 1;
            }
        }
        let expected = (n * rounds) as f64 / big_n as f64;
        let chi_sq: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 0.999 quantile of chi-square with 49 degrees of freedom.
        assert!(chi_sq < 85.351, "chi-square {chi_sq}");
    }

    #[test]
    fn first_arrivals_policies_consume_no_rng() {
        for kind in [PolicyKind::DefedavgIid, PolicyKind::FedBuff] {
            let pol = policy(kind, 4);
            let mut stream = RngStream::derive(3, "sample/0");
            let probe = stream.clone().next_u64();
            let spec = select_participants(&pol, 20, &mut stream);
            assert_eq!(spec, ParticipantSpec::FirstArrivals(4));
            assert_eq!(stream.next_u64(), probe, "stream position moved");
        }
    }

    #[test]
    fn sampled_policies_draw_fresh_multisets_per_round() {
        let pol = policy(PolicyKind::FedAvg, 8);
        let mut s0 = RngStream::derive(5, "sample/0");
        let mut s1 = RngStream::derive(5, "sample/1");
        let a = select_participants(&pol, 100, &mut s0);
        let b = select_participants(&pol, 100, &mut s1);
        match (&a, &b) {
            (ParticipantSpec::Sampled(x), ParticipantSpec::Sampled(y)) => {
                assert_eq!(x.len(), 8);
                assert_ne!(x, y, "distinct round labels must give distinct draws");
            }
            _ => panic!("sampled policies must return multisets"),
        }
    }

    #[test]
    fn policy_validation() {
        assert!(Policy::new(PolicyKind::FedAvg, 0, 5, 1.0, 0.1, SendPolicy::default()).is_err());
        assert!(Policy::new(PolicyKind::FedAvg, 5, 0, 1.0, 0.1, SendPolicy::default()).is_err());
        assert!(
            Policy::new(PolicyKind::Asysg, 5, 2, 1.0, 0.1, SendPolicy::default()).is_err(),
            "asysg must reject K > 1"
        );
        assert!(
            Policy::new(PolicyKind::Asysg, 5, 1, 0.5, 0.1, SendPolicy::default()).is_err(),
            "asysg must pin eta at 1"
        );
        let p = Policy::asysg(5, 0.1).unwrap();
        assert_eq!((p.k_local, p.eta, p.eta_bar), (1, 1.0, 0.1));
    }

    fn update(id: usize, base: usize, vals: Vec<f64>) -> LocalUpdate {
        LocalUpdate {
            client_id: id,
            base_round: base,
            delta: Weights::from_vec(vals).unwrap(),
            steps: 1,
        }
    }

    #[test]
    fn server_round_zero_deltas_only_advance_the_round() {
        let pol = policy(PolicyKind::DefedavgNiid, 3);
        let mut server = ServerState::new(Weights::from_vec(vec![1.0, 2.0]).unwrap(), 1.0);
        let ups = [
            update(0, 0, vec![0.0, 0.0]),
            update(1, 0, vec![0.0, 0.0]),
            update(0, 0, vec![0.0, 0.0]),
        ];
        let refs: Vec<&LocalUpdate> = ups.iter().collect();
        server_round(&pol, &mut server, &refs).unwrap();
        assert_eq!(server.round, 1);
        assert_eq!(server.weights.as_slice(), &[1.0, 2.0]);
        assert_eq!(server.participation_log, vec![vec![(0, 0), (1, 0), (0, 0)]]);
    }

    #[test]
    fn server_round_accepts_delayed_rejects_future() {
        let pol = policy(PolicyKind::DefedavgNiid, 2);
        let mut server = ServerState::new(Weights::zeros(1), 1.0);
        server.round = 5;
        let old = [update(0, 3, vec![0.0]), update(1, 5, vec![0.0])];
        let refs: Vec<&LocalUpdate> = old.iter().collect();
        server_round(&pol, &mut server, &refs).unwrap();
        assert_eq!(server.participation_log[0], vec![(0, 3), (1, 5)]);

        let future = [update(0, 9, vec![0.0]), update(1, 5, vec![0.0])];
        let refs: Vec<&LocalUpdate> = future.iter().collect();
        let err = server_round(&pol, &mut server, &refs).unwrap_err();
        assert!(err.to_string().contains("causality"), "{err}");
    }

    #[test]
    fn server_round_enforces_update_count() {
        let pol = policy(PolicyKind::FedAvg, 3);
        let mut server = ServerState::new(Weights::zeros(1), 1.0);
        let ups = [update(0, 0, vec![0.0])];
        let refs: Vec<&LocalUpdate> = ups.iter().collect();
        assert!(server_round(&pol, &mut server, &refs).is_err());
    }

    #[test]
    fn asysg_step_applies_single_rate() {
        let mut server = ServerState::new(Weights::from_vec(vec![1.0, 0.0]).unwrap(), 0.1);
        asysg_step(&mut server, &Weights::from_vec(vec![1.0, 0.0]).unwrap()).unwrap();
        assert!((server.weights[0] - 0.9).abs() < 1e-15);
        assert_eq!(server.weights[1], 0.0);

        asysg_step(&mut server, &Weights::zeros(2)).unwrap();
        assert!((server.weights[0] - 0.9).abs() < 1e-15);
        assert_eq!(server.round, 2);
    }

    #[test]
    fn oracle_trivial_cases() {
        let p = Problem::Quadratic(make_quadratic(4, 3, 0.0, 0.5, 1.0).unwrap());
        let w0 = Weights::from_vec(vec![0.1, 0.2, 0.3]).unwrap();
        // No rounds: w^0 unchanged.
        let w = compact_oracle(&p, &w0, &[], 1.0, 0.1, 2, 3, 1, 7).unwrap();
        assert_eq!(w, w0);
        // eta_bar = 0: gradients are drawn but never applied.
        let history = vec![vec![
            TrainRef { client: 0, base_round: 0, rep: 0 },
            TrainRef { client: 2, base_round: 0, rep: 0 },
        ]];
        let w = compact_oracle(&p, &w0, &history, 1.0, 0.0, 2, 3, 1, 7).unwrap();
        assert_eq!(w, w0);
    }

    #[test]
    fn oracle_rejects_malformed_history() {
        let p = Problem::Quadratic(make_quadratic(4, 3, 0.0, 0.0, 1.0).unwrap());
        let w0 = Weights::zeros(3);
        let short = vec![vec![TrainRef { client: 0, base_round: 0, rep: 0 }]];
        assert!(compact_oracle(&p, &w0, &short, 1.0, 0.1, 2, 1, 1, 0).is_err());
        let future = vec![vec![
            TrainRef { client: 0, base_round: 1, rep: 0 },
            TrainRef { client: 1, base_round: 0, rep: 0 },
        ]];
        assert!(compact_oracle(&p, &w0, &future, 1.0, 0.1, 2, 1, 1, 0).is_err());
    }

    #[test]
    fn oracle_matches_explicit_synchronous_recursion() {
        // Synchronous full participation: the oracle must equal a direct
        // implementation of K-step local SGD plus averaging.
        let p = Problem::Quadratic(make_quadratic(3, 2, 0.3, 0.4, 1.0).unwrap());
        let w0 = Weights::from_vec(vec![0.5, -0.5]).unwrap();
        let (eta, eta_bar, k, seed) = (0.8, 0.05, 4, 99);
        let history: Vec<Vec<TrainRef>> = (0..6)
            .map(|t| {
                (0..3)
                    .map(|c| TrainRef { client: c, base_round: t, rep: 0 })
                    .collect()
            })
            .collect();
        let oracle = compact_oracle(&p, &w0, &history, eta, eta_bar, 3, k, 1, seed).unwrap();

        let mut w = w0.clone();
        for t in 0..6 {
            let mut mean_delta = Weights::zeros(2);
            for c in 0..3 {
                let label = train_label(&TrainRef { client: c, base_round: t, rep: 0 });
                let mut stream = RngStream::derive(seed, &label);
                let mut local = w.clone();
                for _ in 0..k {
                    let g = p.stochastic_gradient(c, &local, 1, &mut stream);
                    local.add_scaled(&g, -eta_bar).unwrap();
                }
                mean_delta.add_scaled(&w.sub(&local).unwrap(), 1.0 / 3.0).unwrap();
            }
            w.add_scaled(&mean_delta, -eta).unwrap();
        }
        assert!(oracle.max_abs_diff(&w).unwrap() < 1e-12);
    }
}
