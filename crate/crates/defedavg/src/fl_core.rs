//! Algorithm-agnostic federated mechanics: K-step local SGD, update
//! deltas, client buffers, aggregation, and the global model step.
//!
//! A local update carries `delta = w_start - w_end` of the client's K-step
//! SGD pass, so the server's `w - eta * mean(delta)` moves along the
//! accumulated stochastic gradients. Clients own two single-slot buffers:
//! a receive buffer holding the freshest broadcast model (overwrite always
//! permitted) and a send buffer holding at most one unsent update
//! (overwrite governed by [`SendPolicy`]).

use crate::numerics::{RngStream, Weights};
use crate::problems::Problem;
use crate::{Error, Result};

/// A global model tagged with the round that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct StampedModel {
    pub round: usize,
    pub weights: Weights,
}

/// Result of one K-step local training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    /// Round stamp of the model this training started from.
    pub base_round: usize,
    /// `base_weights - final_local_iterate`.
    pub delta: Weights,
    pub steps: usize,
}

/// How `deposit_send` treats an occupied send buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SendPolicy {
    /// Newest update always replaces the buffered one.
    #[default]
    AlwaysOverwrite,
    /// The buffered update is kept until the client is selected (the
    /// buffer empties on upload); newer updates are dropped meanwhile.
    OverwriteOnSelect,
}

/// One client's buffers and bookkeeping.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Slowdown multiplier relative to the fastest hardware.
    pub speed_factor: f64,
    pub receive_buffer: Option<StampedModel>,
    pub send_buffer: Option<LocalUpdate>,
    /// Simulated time at which the current training finishes.
    pub busy_until: f64,
    /// Snapshot of the model the in-flight training started from.
    pub training_base: Option<StampedModel>,
    /// Broadcasts ignored because their round was older than the buffer.
    pub stale_broadcasts: usize,
    /// Updates discarded by [`SendPolicy::OverwriteOnSelect`].
    pub dropped_updates: usize,
}

impl ClientState {
    pub fn new(id: usize, speed_factor: f64) -> Self {
        ClientState {
            id,
            speed_factor,
            receive_buffer: None,
            send_buffer: None,
            busy_until: 0.0,
            training_base: None,
            stale_broadcasts: 0,
            dropped_updates: 0,
        }
    }

    /// Stores a broadcast model, ignoring stale rounds (monotonicity guard).
    pub fn deposit_receive(&mut self, model: StampedModel) {
        match &self.receive_buffer {
            Some(held) if model.round < held.round => self.stale_broadcasts += 1,
            _ => self.receive_buffer = Some(model),
        }
    }

    /// Stores a finished update per the send policy.
    pub fn deposit_send(&mut self, update: LocalUpdate, policy: SendPolicy) {
        match policy {
            SendPolicy::AlwaysOverwrite => self.send_buffer = Some(update),
            SendPolicy::OverwriteOnSelect => {
                if self.send_buffer.is_none() {
                    self.send_buffer = Some(update);
                } else {
                    self.dropped_updates += 1;
                }
            }
        }
    }

    /// Empties the send buffer (the client was selected and uploads).
    pub fn take_send(&mut self) -> Option<LocalUpdate> {
        self.send_buffer.take()
    }
}

/// Server round counter, model, and participation history.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub weights: Weights,
    /// Global learning rate applied to the aggregated delta.
    pub eta: f64,
    /// Per round: each participant as `(client_id, base_round)`, in
    /// aggregation order (multiset order for sampled policies).
    pub participation_log: Vec<Vec<(usize, usize)>>,
}

impl ServerState {
    pub fn new(weights: Weights, eta: f64) -> Self {
        ServerState { round: 0, weights, eta, participation_log: Vec::new() }
    }
}

/// Runs `w <- w - eta_bar * stoch_grad` for `steps` iterations from
/// `base.weights` and returns the resulting update delta.
///
/// All stochastic draws come from `stream`, so a training instance is
/// fully determined by its stream label.
pub fn local_train(
    base: &StampedModel,
    steps: usize,
    eta_bar: f64,
    problem: &Problem,
    client: usize,
    batch: usize,
    stream: &mut RngStream,
) -> Result<LocalUpdate> {
    assert!(steps >= 1, "local training needs at least one step");
    assert!(eta_bar >= 0.0, "local learning rate must be nonnegative");
    let mut w = base.weights.clone();
    for k in 0..steps {
        let g = problem.stochastic_gradient(client, &w, batch, stream);
        w.add_scaled(&g, -eta_bar)?;
        w.ensure_finite(&format!("client {client} local iterate after step {k}"))
            .map_err(|e| Error::Divergence(e.to_string()))?;
    }
    Ok(LocalUpdate {
        client_id: client,
        base_round: base.round,
        delta: base.weights.sub(&w)?,
        steps,
    })
}

/// Componentwise mean of exactly `n` update deltas (multiset semantics:
/// a client sampled twice contributes its delta twice).
pub fn aggregate(updates: &[&LocalUpdate], n: usize) -> Result<Weights> {
    if updates.is_empty() || updates.len() != n {
        return Err(Error::InvalidConfig(format!(
            "aggregate expects exactly n = {n} updates, got {}",
            updates.len()
        )));
    }
    let dim = updates[0].delta.dim();
    let mut mean = Weights::zeros(dim);
    for u in updates {
        mean.add_scaled(&u.delta, 1.0 / n as f64)?;
    }
    Ok(mean)
}

/// Applies `w^{t+1} = w^t - eta * delta_mean` and advances the round.
pub fn global_step(server: &mut ServerState, delta_mean: &Weights) -> Result<()> {
    server.weights.add_scaled(delta_mean, -server.eta)?;
    server
        .weights
        .ensure_finite(&format!("global model after round {}", server.round))
        .map_err(|e| Error::Divergence(e.to_string()))?;
    server.round += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::make_quadratic;

    fn centered_quadratic() -> Problem {
        // Single client, center at the origin: F_0(w) = 0.5 |w|^2.
        Problem::Quadratic(make_quadratic(1, 2, 0.0, 0.0, 0.0).unwrap())
    }

    fn stamped(round: usize, values: Vec<f64>) -> StampedModel {
        StampedModel { round, weights: Weights::from_vec(values).unwrap() }
    }

    #[test]
    fn one_step_delta_matches_hand_computation() {
        let p = centered_quadratic();
        let mut s = RngStream::derive(0, "t");
        let base = stamped(4, vec![1.0, 0.0]);
        let u = local_train(&base, 1, 0.1, &p, 0, 1, &mut s).unwrap();
        assert_eq!(u.base_round, 4);
        assert_eq!(u.steps, 1);
        assert!((u.delta[0] - 0.1).abs() < 1e-15);
        assert_eq!(u.delta[1], 0.0);
    }

    #[test]
    fn two_step_delta_contracts_geometrically() {
        let p = centered_quadratic();
        let mut s = RngStream::derive(0, "t");
        let base = stamped(0, vec![1.0, 0.0]);
        let u = local_train(&base, 2, 0.1, &p, 0, 1, &mut s).unwrap();
        // w^2 = 0.81 w^0, so delta = 0.19 in the first coordinate.
        assert!((u.delta[0] - 0.19).abs() < 1e-15);
        assert_eq!(u.delta[1], 0.0);
    }

    #[test]
    fn zero_rate_gives_zero_delta() {
        let p = centered_quadratic();
        let mut s = RngStream::derive(0, "t");
        let base = stamped(0, vec![3.0, -2.0]);
        let u = local_train(&base, 5, 0.0, &p, 0, 1, &mut s).unwrap();
        assert_eq!(u.delta.norm_sq(), 0.0);
    }

    #[test]
    fn divergent_training_reports_step() {
        let p = centered_quadratic();
        let mut s = RngStream::derive(0, "t");
        let base = stamped(0, vec![1e300, 0.0]);
        // Step size 3 on a 1-smooth quadratic doubles the distance each
        // step; from 1e300 this overflows within a few steps.
        let err = local_train(&base, 40, 3.0, &p, 0, 1, &mut s).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step"), "{msg}");
    }

    #[test]
    fn aggregate_means_with_multiplicity() {
        let mk = |vals: Vec<f64>, id: usize| LocalUpdate {
            client_id: id,
            base_round: 0,
            delta: Weights::from_vec(vals).unwrap(),
            steps: 1,
        };
        let a = mk(vec![1.0, 0.0], 0);
        let b = mk(vec![0.0, 1.0], 1);
        let m = aggregate(&[&a, &b], 2).unwrap();
        assert_eq!(m.as_slice(), &[0.5, 0.5]);

        // One client sampled twice with delta v plus one with delta u.
        let m = aggregate(&[&a, &a, &b], 3).unwrap();
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m[1] - 1.0 / 3.0).abs() < 1e-15);

        // Idempotence on identical deltas.
        let m = aggregate(&[&b, &b, &b], 3).unwrap();
        assert_eq!(m.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn aggregate_rejects_wrong_counts_and_dims() {
        let a = LocalUpdate {
            client_id: 0,
            base_round: 0,
            delta: Weights::zeros(2),
            steps: 1,
        };
        let b = LocalUpdate {
            client_id: 1,
            base_round: 0,
            delta: Weights::zeros(3),
            steps: 1,
        };
        assert!(aggregate(&[], 0).is_err());
        assert!(aggregate(&[&a], 2).is_err());
        assert!(aggregate(&[&a, &b], 2).is_err());
    }

    #[test]
    fn global_step_arithmetic() {
        let mut server = ServerState::new(Weights::zeros(2), 2.0);
        let d = Weights::from_vec(vec![1.0, -1.0]).unwrap();
        global_step(&mut server, &d).unwrap();
        assert_eq!(server.weights.as_slice(), &[-2.0, 2.0]);
        assert_eq!(server.round, 1);

        let mut server = ServerState::new(Weights::from_vec(vec![5.0]).unwrap(), 1.0);
        global_step(&mut server, &Weights::zeros(1)).unwrap();
        assert_eq!(server.weights.as_slice(), &[5.0]);
        assert_eq!(server.round, 1);
    }

    #[test]
    fn full_participation_k1_is_one_sgd_step_on_global_objective() {
        // With K = 1, eta = 1, and every client contributing once, the
        // composed update is exactly w - eta_bar * grad F(w).
        let p = Problem::Quadratic(make_quadratic(6, 3, 0.4, 0.0, 1.0).unwrap());
        let w0 = Weights::from_vec(vec![0.5, -0.3, 1.2]).unwrap();
        let eta_bar = 0.2;
        let base = StampedModel { round: 0, weights: w0.clone() };
        let updates: Vec<LocalUpdate> = (0..6)
            .map(|i| {
                let mut s = RngStream::derive(1, &format!("train/{i}/0/0"));
                local_train(&base, 1, eta_bar, &p, i, 1, &mut s).unwrap()
            })
            .collect();
        let refs: Vec<&LocalUpdate> = updates.iter().collect();
        let mut server = ServerState::new(w0.clone(), 1.0);
        let mean = aggregate(&refs, 6).unwrap();
        global_step(&mut server, &mean).unwrap();

        let mut expect = w0.clone();
        expect.add_scaled(&p.full_gradient(&w0), -eta_bar).unwrap();
        assert!(server.weights.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn receive_buffer_keeps_newest_round() {
        let mut c = ClientState::new(0, 1.0);
        c.deposit_receive(stamped(3, vec![0.0]));
        assert_eq!(c.receive_buffer.as_ref().unwrap().round, 3);
        c.deposit_receive(stamped(5, vec![1.0]));
        assert_eq!(c.receive_buffer.as_ref().unwrap().round, 5);
        c.deposit_receive(stamped(4, vec![2.0]));
        assert_eq!(c.receive_buffer.as_ref().unwrap().round, 5);
        assert_eq!(c.stale_broadcasts, 1);
    }

    #[test]
    fn send_policies_differ_on_full_buffer() {
        let upd = |v: f64| LocalUpdate {
            client_id: 0,
            base_round: 0,
            delta: Weights::from_vec(vec![v]).unwrap(),
            steps: 1,
        };
        let mut c = ClientState::new(0, 1.0);
        c.deposit_send(upd(1.0), SendPolicy::AlwaysOverwrite);
        c.deposit_send(upd(2.0), SendPolicy::AlwaysOverwrite);
        assert_eq!(c.send_buffer.as_ref().unwrap().delta[0], 2.0);

        let mut c = ClientState::new(0, 1.0);
        c.deposit_send(upd(1.0), SendPolicy::OverwriteOnSelect);
        c.deposit_send(upd(2.0), SendPolicy::OverwriteOnSelect);
        assert_eq!(c.send_buffer.as_ref().unwrap().delta[0], 1.0);
        assert_eq!(c.dropped_updates, 1);

        // Upload empties the buffer, after which deposits land again.
        assert!(c.take_send().is_some());
        c.deposit_send(upd(3.0), SendPolicy::OverwriteOnSelect);
        assert_eq!(c.send_buffer.as_ref().unwrap().delta[0], 3.0);
    }

    #[test]
    fn delta_reconstructs_final_iterate() {
        // Replaying the same stream label reproduces the trajectory, so
        // base - delta must equal the final iterate of the replay.
        let p = Problem::Quadratic(make_quadratic(4, 3, 0.2, 0.7, 1.0).unwrap());
        let base = stamped(2, vec![0.4, 0.4, 0.4]);
        let mut s1 = RngStream::derive(9, "train/1/2/0");
        let u = local_train(&base, 6, 0.05, &p, 1, 1, &mut s1).unwrap();
        let reconstructed = base.weights.sub(&u.delta).unwrap();

        let mut s2 = RngStream::derive(9, "train/1/2/0");
        let mut w = base.weights.clone();
        for _ in 0..6 {
            let g = p.stochastic_gradient(1, &w, 1, &mut s2);
            w.add_scaled(&g, -0.05).unwrap();
        }
        assert!(reconstructed.max_abs_diff(&w).unwrap() < 1e-15);
    }

    #[test]
    fn synchronous_descent_on_noiseless_quadratic() {
        // Small-rate sanity: full participation on a noiseless quadratic
        // must not increase the objective.
        let p = Problem::Quadratic(make_quadratic(5, 4, 0.3, 0.0, 2.0).unwrap());
        let mut server = ServerState::new(Weights::zeros(4), 1.5);
        let k = 5;
        let eta_bar = 0.02;
        let mut last = p.loss(&server.weights);
        for t in 0..30 {
            let base = StampedModel { round: t, weights: server.weights.clone() };
            let updates: Vec<LocalUpdate> = (0..5)
                .map(|i| {
                    let mut s = RngStream::derive(2, &format!("train/{i}/{t}/0"));
                    local_train(&base, k, eta_bar, &p, i, 1, &mut s).unwrap()
                })
                .collect();
            let refs: Vec<&LocalUpdate> = updates.iter().collect();
            let mean = aggregate(&refs, 5).unwrap();
            global_step(&mut server, &mean).unwrap();
            let now = p.loss(&server.weights);
            assert!(now <= last + 1e-12, "round {t}: {last} -> {now}");
            last = now;
        }
    }
}
