//! Deterministic discrete-event engine over simulated wall-clock time.
//!
//! The engine drives one federated run: broadcasts travel down a modelled
//! downlink, clients train for a compute time proportional to their speed
//! factor, finished updates travel up an uplink, and the server closes a
//! round per its policy. Aggregation and sampling take zero simulated
//! time; only client compute and transfers advance the clock.
//!
//! Determinism contract: a run is a pure function of `(problem, config)`.
//! Events are processed in `(time, kind priority, client, sequence)`
//! order, every stochastic draw comes from a labelled stream, and no
//! iteration touches hash-map order, so identical configs give identical
//! results bit for bit.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use crate::algorithms::{
    select_participants, server_round, train_label, ParticipantSpec, Policy, PolicyKind, TrainRef,
};
use crate::fl_core::{local_train, ClientState, LocalUpdate, StampedModel};
use crate::fl_core::ServerState;
use crate::numerics::{RngStream, Weights};
use crate::problems::Problem;
use crate::{Error, Result};

/// Wall-clock model: compute speeds and link transfer times.
#[derive(Debug, Clone)]
pub struct SystemModel {
    /// FLOPS of the fastest client hardware.
    pub c_mac: f64,
    /// Floating-point cost of one local SGD iteration.
    pub flops_per_iter: f64,
    /// Downlink bandwidth in bits/s.
    pub bandwidth_down: f64,
    /// Uplink bandwidth in bits/s.
    pub bandwidth_up: f64,
    /// Serialized model payload in bytes.
    pub model_bytes: f64,
    /// Per-client slowdown factors are drawn uniformly from this interval.
    pub speed_min: f64,
    pub speed_max: f64,
}

impl Default for SystemModel {
    fn default() -> Self {
        SystemModel {
            c_mac: 10e9,
            flops_per_iter: 17.0e6,
            bandwidth_down: 400e6,
            bandwidth_up: 400e6,
            model_bytes: 2.2e6,
            speed_min: 1.0,
            speed_max: 5.0,
        }
    }
}

impl SystemModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_mac", self.c_mac),
            ("flops_per_iter", self.flops_per_iter),
            ("bandwidth_down", self.bandwidth_down),
            ("bandwidth_up", self.bandwidth_up),
            ("model_bytes", self.model_bytes),
            ("speed_min", self.speed_min),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("system.{name} must be positive")));
            }
        }
        if !(self.speed_max.is_finite() && self.speed_max >= self.speed_min) {
            return Err(Error::InvalidConfig("system speed interval is empty".into()));
        }
        Ok(())
    }
}

/// Seconds for `k` local iterations on hardware `speed_factor` times
/// slower than the reference: `k * flops_per_iter * speed_factor / c_mac`.
pub fn compute_time(speed_factor: f64, k: usize, flops_per_iter: f64, c_mac: f64) -> f64 {
    k as f64 * flops_per_iter * speed_factor / c_mac
}

/// Seconds to move `model_bytes` over a `bandwidth` bits/s link.
pub fn comm_time(model_bytes: f64, bandwidth: f64) -> f64 {
    8.0 * model_bytes / bandwidth
}

/// Everything one run needs beyond the problem itself.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub policy: Policy,
    /// Global rounds to simulate (T).
    pub t_max: usize,
    pub batch: usize,
    pub root_seed: u64,
    pub system: SystemModel,
    /// Record a metrics row every this many rounds (the final round is
    /// always recorded).
    pub eval_every: usize,
    /// Degenerate synchronous mode: clients train exactly once per
    /// broadcast, and each new broadcast cancels in-flight trainings and
    /// invalidates unsent buffered updates, so every consumed update is
    /// computed from the current round's model.
    pub sync_mode: bool,
}

impl RunConfig {
    pub fn new(policy: Policy, t_max: usize, batch: usize, root_seed: u64) -> Self {
        RunConfig {
            policy,
            t_max,
            batch,
            root_seed,
            system: SystemModel::default(),
            eval_every: 1,
            sync_mode: false,
        }
    }
}

/// One evaluation snapshot; `round` counts completed global iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub wall_clock_s: f64,
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_acc: Option<f64>,
    /// Mean/max of `t - base_round` over the updates the round consumed.
    pub mean_staleness: f64,
    pub max_staleness: usize,
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<MetricsRow>,
    /// Per round: `(client_id, base_round)` in aggregation order.
    pub participation_log: Vec<Vec<(usize, usize)>>,
    /// Per round: the consumed training instances, aggregation order;
    /// feeds [`crate::algorithms::compact_oracle`].
    pub history: Vec<Vec<TrainRef>>,
    /// `staleness_hist[s]` counts consumed updates with staleness `s`.
    pub staleness_hist: Vec<u64>,
    pub final_weights: Weights,
    /// Simulated seconds when round T completed.
    pub final_time: f64,
    pub speed_factors: Vec<f64>,
    pub stale_broadcasts: usize,
    pub dropped_updates: usize,
    /// Trainings started per client (includes cancelled ones).
    pub trainings_started: Vec<usize>,
}

/// Aggregate staleness view of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct StalenessReport {
    /// Largest observed `t - base_round` (the empirical delay bound).
    pub max: usize,
    pub mean: f64,
    pub histogram: Vec<u64>,
    pub per_client_max: Vec<usize>,
}

/// Summarizes staleness from the participation log; also re-checks that
/// every consumed update respects causality (`base_round <= t`).
pub fn staleness_report(result: &RunResult) -> StalenessReport {
    let n_clients = result.speed_factors.len();
    let mut histogram = Vec::new();
    let mut per_client_max = vec![0usize; n_clients];
    let mut total = 0u64;
    let mut sum = 0u64;
    let mut max = 0usize;
    for (t, entries) in result.participation_log.iter().enumerate() {
        for &(client, base) in entries {
            assert!(base <= t, "causality: round {t} consumed future base {base}");
            let s = t - base;
            if histogram.len() <= s {
                histogram.resize(s + 1, 0);
            }
            histogram[s] += 1;
            per_client_max[client] = per_client_max[client].max(s);
            max = max.max(s);
            sum += s as u64;
            total += 1;
        }
    }
    StalenessReport {
        max,
        mean: if total == 0 { 0.0 } else { sum as f64 / total as f64 },
        histogram,
        per_client_max,
    }
}

// ---------------------------------------------------------------------------
// Event machinery
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum EventKind {
    UploadArrive { update: SimUpdate },
    RoundTrigger,
    BroadcastArrive { model: StampedModel },
    TrainingDone { generation: u64 },
}

impl EventKind {
    /// Tie-break priority at equal times: uploads complete rounds before
    /// new broadcasts are sequenced.
    fn priority(&self) -> u8 {
        match self {
            EventKind::UploadArrive { .. } => 0,
            EventKind::RoundTrigger => 1,
            EventKind::BroadcastArrive { .. } => 2,
            EventKind::TrainingDone { .. } => 3,
        }
    }
}

/// A scheduled event; ordered by `(time, priority, client, seq)`.
#[derive(Debug)]
struct Event {
    time: f64,
    prio: u8,
    client: usize,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, u8, usize, u64) {
        (self.time, self.prio, self.client, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so the BinaryHeap pops the earliest event first.
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0)
            .then_with(|| b.1.cmp(&a.1))
            .then_with(|| b.2.cmp(&a.2))
            .then_with(|| b.3.cmp(&a.3))
    }
}

/// An update travelling through the system together with the identity of
/// the training that produced it.
#[derive(Debug, Clone)]
struct SimUpdate {
    update: LocalUpdate,
    train_ref: TrainRef,
}

/// Per-client simulation state on top of the protocol-level buffers.
struct SimClient {
    state: ClientState,
    /// Identity of the in-flight training, if any.
    current_ref: Option<TrainRef>,
    /// Bumped when an in-flight training is cancelled; stale
    /// `TrainingDone` events carry an older generation and are dropped.
    generation: u64,
    /// The training-instance identity of the update sitting in the send
    /// buffer (kept in lockstep with `state.send_buffer`).
    buffered_ref: Option<TrainRef>,
    /// Server is waiting on this client's next finished update.
    upload_requested: bool,
    /// Trainings started per base round, for repetition indices. Keyed
    /// access only (never iterated), so hash order cannot leak.
    reps: HashMap<usize, usize>,
    /// Base round of the most recently started training; gates
    /// once-per-round training for FedAvg and sync mode.
    last_started_base: Option<usize>,
    trainings_started: usize,
}

/// How the server gathers a round's updates.
enum Collector {
    /// Sampled policies: waiting on each distinct selected client.
    Sampled {
        multiset: Vec<usize>,
        arrived: BTreeMap<usize, Option<SimUpdate>>,
        outstanding: usize,
    },
    /// First-arrivals policies: a continuously filling pool.
    Arrivals { pool: Vec<SimUpdate> },
    /// Between sampled rounds.
    Idle,
}

struct Engine<'a> {
    problem: &'a Problem,
    cfg: &'a RunConfig,
    clients: Vec<SimClient>,
    server: ServerState,
    queue: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    down_time: f64,
    up_time: f64,
    collector: Collector,
    history: Vec<Vec<TrainRef>>,
    staleness_hist: Vec<u64>,
    rows: Vec<MetricsRow>,
    finished: bool,
}

/// Executes one run to completion.
pub fn run(problem: &Problem, cfg: &RunConfig) -> Result<RunResult> {
    let n_clients = problem.num_clients();
    if cfg.t_max == 0 {
        return Err(Error::InvalidConfig("T must be at least 1".into()));
    }
    if cfg.eval_every == 0 {
        return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    if cfg.policy.n > n_clients {
        return Err(Error::InvalidConfig(format!(
            "n = {} exceeds the {} available clients",
            cfg.policy.n, n_clients
        )));
    }
    cfg.system.validate()?;

    let mut speed_stream = RngStream::derive(cfg.root_seed, "speeds");
    let speeds: Vec<f64> = (0..n_clients)
        .map(|_| {
            cfg.system.speed_min
                + (cfg.system.speed_max - cfg.system.speed_min) * speed_stream.uniform_f64()
        })
        .collect();

    let clients = speeds
        .iter()
        .enumerate()
        .map(|(id, &speed)| SimClient {
            state: ClientState::new(id, speed),
            current_ref: None,
            generation: 0,
            buffered_ref: None,
            upload_requested: false,
            reps: HashMap::new(),
            last_started_base: None,
            trainings_started: 0,
        })
        .collect();

    let collector = if cfg.policy.kind.first_arrivals() {
        Collector::Arrivals { pool: Vec::new() }
    } else {
        Collector::Idle
    };

    let mut engine = Engine {
        problem,
        cfg,
        clients,
        server: ServerState::new(problem.initial_weights(), cfg.policy.eta),
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        down_time: comm_time(cfg.system.model_bytes, cfg.system.bandwidth_down),
        up_time: comm_time(cfg.system.model_bytes, cfg.system.bandwidth_up),
        collector,
        history: Vec::new(),
        staleness_hist: Vec::new(),
        rows: Vec::new(),
        finished: false,
    };
    engine.start()?;
    engine.event_loop()?;

    let stale_broadcasts = engine.clients.iter().map(|c| c.state.stale_broadcasts).sum();
    let dropped_updates = engine.clients.iter().map(|c| c.state.dropped_updates).sum();
    Ok(RunResult {
        rows: engine.rows,
        participation_log: engine.server.participation_log,
        history: engine.history,
        staleness_hist: engine.staleness_hist,
        final_weights: engine.server.weights,
        final_time: engine.now,
        speed_factors: speeds,
        stale_broadcasts,
        dropped_updates,
        trainings_started: engine.clients.iter().map(|c| c.trainings_started).collect(),
    })
}

impl<'a> Engine<'a> {
    fn schedule(&mut self, time: f64, client: usize, kind: EventKind) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        let prio = kind.priority();
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Event { time, prio, client, seq, kind });
    }

    /// Warm-up: delayed policies broadcast `w^0` to everyone; sampled
    /// policies additionally arm the first round trigger. FedAvg skips the
    /// all-client broadcast since only sampled clients would consume it.
    fn start(&mut self) -> Result<()> {
        if self.cfg.policy.kind != PolicyKind::FedAvg {
            let model = StampedModel { round: 0, weights: self.server.weights.clone() };
            for c in 0..self.clients.len() {
                self.schedule(
                    self.down_time,
                    c,
                    EventKind::BroadcastArrive { model: model.clone() },
                );
            }
        }
        if !self.cfg.policy.kind.first_arrivals() {
            self.schedule(0.0, usize::MAX, EventKind::RoundTrigger);
        }
        Ok(())
    }

    fn event_loop(&mut self) -> Result<()> {
        while !self.finished {
            let ev = match self.queue.pop() {
                Some(ev) => ev,
                None => {
                    return Err(Error::Deadlock(format!(
                        "event queue drained after {} of {} rounds at t = {:.6}s ({})",
                        self.server.round,
                        self.cfg.t_max,
                        self.now,
                        self.stuck_state()
                    )))
                }
            };
            debug_assert!(ev.time >= self.now, "event time went backwards");
            self.now = ev.time;
            match ev.kind {
                EventKind::BroadcastArrive { model } => {
                    self.clients[ev.client].state.deposit_receive(model);
                    self.maybe_start_training(ev.client);
                }
                EventKind::TrainingDone { generation } => {
                    self.on_training_done(ev.client, generation)?;
                }
                EventKind::UploadArrive { update } => {
                    self.on_upload(update)?;
                }
                EventKind::RoundTrigger => {
                    self.start_round();
                }
            }
        }
        Ok(())
    }

    fn stuck_state(&self) -> String {
        match &self.collector {
            Collector::Sampled { arrived, .. } => {
                let waiting: Vec<usize> = arrived
                    .iter()
                    .filter_map(|(c, u)| u.is_none().then_some(*c))
                    .collect();
                format!("still waiting on clients {waiting:?}")
            }
            Collector::Arrivals { pool } => {
                format!("{} of {} uploads pooled", pool.len(), self.cfg.policy.n)
            }
            Collector::Idle => "no round in progress".to_string(),
        }
    }

    /// Starts a training if the client is idle, has a model, and (for
    /// once-per-round protocols) has not already trained on it.
    fn maybe_start_training(&mut self, client: usize) {
        let k = self.cfg.policy.k_local;
        let (flops, c_mac) = (self.cfg.system.flops_per_iter, self.cfg.system.c_mac);
        let once_per_round =
            self.cfg.sync_mode || self.cfg.policy.kind == PolicyKind::FedAvg;
        let c = &mut self.clients[client];
        if c.current_ref.is_some() {
            return;
        }
        let Some(base) = c.state.receive_buffer.clone() else {
            return;
        };
        if once_per_round && c.last_started_base >= Some(base.round) {
            return;
        }
        let rep_slot = c.reps.entry(base.round).or_insert(0);
        let train_ref = TrainRef { client, base_round: base.round, rep: *rep_slot };
        *rep_slot += 1;
        c.last_started_base = Some(base.round);
        c.current_ref = Some(train_ref);
        c.state.training_base = Some(base);
        c.trainings_started += 1;
        let duration = compute_time(c.state.speed_factor, k, flops, c_mac);
        c.state.busy_until = self.now + duration;
        let generation = c.generation;
        self.schedule(self.now + duration, client, EventKind::TrainingDone { generation });
    }

    /// Completes a training: materializes the update by replaying its
    /// labelled stream, then routes it per policy.
    fn on_training_done(&mut self, client: usize, generation: u64) -> Result<()> {
        if self.clients[client].generation != generation {
            return Ok(()); // cancelled by a sync-mode broadcast
        }
        let (base, train_ref) = {
            let c = &mut self.clients[client];
            (
                c.state.training_base.take().expect("training had a base snapshot"),
                c.current_ref.take().expect("training had an identity"),
            )
        };
        let mut stream = RngStream::derive(self.cfg.root_seed, &train_label(&train_ref));
        let update = local_train(
            &base,
            self.cfg.policy.k_local,
            self.cfg.policy.eta_bar,
            self.problem,
            client,
            self.cfg.batch,
            &mut stream,
        )?;
        let sim_update = SimUpdate { update, train_ref };

        match self.cfg.policy.kind {
            PolicyKind::FedAvg => {
                // Sampled clients upload straight away and go idle.
                self.schedule(
                    self.now + self.up_time,
                    client,
                    EventKind::UploadArrive { update: sim_update },
                );
            }
            PolicyKind::DefedavgIid | PolicyKind::FedBuff | PolicyKind::Asysg => {
                // Uploads start immediately and run concurrently with the
                // next training.
                self.schedule(
                    self.now + self.up_time,
                    client,
                    EventKind::UploadArrive { update: sim_update },
                );
                self.maybe_start_training(client);
            }
            PolicyKind::DefedavgNiid => {
                let policy = self.cfg.policy.send_policy;
                let c = &mut self.clients[client];
                let will_store = policy == crate::fl_core::SendPolicy::AlwaysOverwrite
                    || c.state.send_buffer.is_none();
                c.state.deposit_send(sim_update.update, policy);
                if will_store {
                    c.buffered_ref = Some(sim_update.train_ref);
                }
                if c.upload_requested {
                    let update = c.state.take_send().expect("deposit just filled the buffer");
                    let train_ref = c.buffered_ref.take().expect("ref tracks the buffer");
                    c.upload_requested = false;
                    self.schedule(
                        self.now + self.up_time,
                        client,
                        EventKind::UploadArrive { update: SimUpdate { update, train_ref } },
                    );
                }
                self.maybe_start_training(client);
            }
        }
        Ok(())
    }

    fn on_upload(&mut self, update: SimUpdate) -> Result<()> {
        match &mut self.collector {
            Collector::Sampled { arrived, outstanding, .. } => {
                let client = update.update.client_id;
                let slot = arrived
                    .get_mut(&client)
                    .expect("uploads only requested from selected clients");
                assert!(slot.is_none(), "client {client} uploaded twice in one round");
                *slot = Some(update);
                *outstanding -= 1;
                if *outstanding == 0 {
                    let Collector::Sampled { multiset, arrived, .. } =
                        std::mem::replace(&mut self.collector, Collector::Idle)
                    else {
                        unreachable!()
                    };
                    // Aggregation order is multiset draw order; a client
                    // sampled twice contributes its one update twice.
                    let updates: Vec<SimUpdate> = multiset
                        .iter()
                        .map(|c| arrived[c].clone().expect("all arrived"))
                        .collect();
                    self.complete_round(updates)?;
                }
            }
            Collector::Arrivals { pool } => {
                pool.push(update);
                if pool.len() == self.cfg.policy.n {
                    let updates = std::mem::take(pool);
                    self.complete_round(updates)?;
                }
            }
            Collector::Idle => unreachable!("upload outside any collection phase"),
        }
        Ok(())
    }

    /// Samples the round's participants and requests their updates
    /// (sampled policies only; first-arrival rounds fill passively).
    fn start_round(&mut self) {
        let t = self.server.round;
        let mut stream = RngStream::derive(self.cfg.root_seed, &format!("sample/{t}"));
        let spec = select_participants(&self.cfg.policy, self.clients.len(), &mut stream);
        let ParticipantSpec::Sampled(multiset) = spec else {
            return; // first-arrivals policies never trigger rounds
        };
        let mut arrived: BTreeMap<usize, Option<SimUpdate>> = BTreeMap::new();
        for &c in &multiset {
            arrived.insert(c, None);
        }
        let distinct: Vec<usize> = arrived.keys().copied().collect();
        self.collector = Collector::Sampled {
            multiset,
            outstanding: distinct.len(),
            arrived,
        };
        match self.cfg.policy.kind {
            PolicyKind::FedAvg => {
                // Broadcast the current model to the sampled set only;
                // their fresh updates form the round.
                let model = StampedModel { round: t, weights: self.server.weights.clone() };
                for c in distinct {
                    self.schedule(
                        self.now + self.down_time,
                        c,
                        EventKind::BroadcastArrive { model: model.clone() },
                    );
                }
            }
            PolicyKind::DefedavgNiid => {
                // Take buffered updates; block on clients with nothing
                // buffered until their in-flight training lands.
                for client in distinct {
                    let c = &mut self.clients[client];
                    if let Some(update) = c.state.take_send() {
                        let train_ref = c.buffered_ref.take().expect("ref tracks the buffer");
                        self.schedule(
                            self.now + self.up_time,
                            client,
                            EventKind::UploadArrive { update: SimUpdate { update, train_ref } },
                        );
                    } else {
                        c.upload_requested = true;
                    }
                }
            }
            _ => unreachable!("first-arrivals policies are filtered above"),
        }
    }

    /// Applies the global step for a full round and sequences the next
    /// one: metrics, broadcasts, trigger.
    fn complete_round(&mut self, updates: Vec<SimUpdate>) -> Result<()> {
        let t = self.server.round;
        let refs: Vec<&LocalUpdate> = updates.iter().map(|u| &u.update).collect();
        server_round(&self.cfg.policy, &mut self.server, &refs)?;

        let mut max_staleness = 0usize;
        let mut staleness_sum = 0usize;
        for u in &updates {
            let s = t - u.update.base_round;
            if self.staleness_hist.len() <= s {
                self.staleness_hist.resize(s + 1, 0);
            }
            self.staleness_hist[s] += 1;
            max_staleness = max_staleness.max(s);
            staleness_sum += s;
        }
        self.history.push(updates.iter().map(|u| u.train_ref).collect());

        let completed = t + 1;
        if completed.is_multiple_of(self.cfg.eval_every) || completed == self.cfg.t_max {
            let w = &self.server.weights;
            self.rows.push(MetricsRow {
                round: completed,
                wall_clock_s: self.now,
                train_loss: self.problem.loss(w),
                grad_norm_sq: self.problem.full_gradient(w).norm_sq(),
                test_acc: self.problem.accuracy(w),
                mean_staleness: staleness_sum as f64 / updates.len() as f64,
                max_staleness,
            });
        }

        if completed == self.cfg.t_max {
            self.finished = true;
            return Ok(());
        }

        if self.cfg.sync_mode {
            // A new global round invalidates all unfinished and unsent
            // work so the next round's updates are computed from w^{t+1}.
            for c in &mut self.clients {
                if c.current_ref.is_some() {
                    c.generation += 1;
                    c.current_ref = None;
                    c.state.training_base = None;
                }
                c.state.send_buffer = None;
                c.buffered_ref = None;
            }
        }
        if self.cfg.policy.kind != PolicyKind::FedAvg {
            let model = StampedModel { round: completed, weights: self.server.weights.clone() };
            for c in 0..self.clients.len() {
                self.schedule(
                    self.now + self.down_time,
                    c,
                    EventKind::BroadcastArrive { model: model.clone() },
                );
            }
        }
        if !self.cfg.policy.kind.first_arrivals() {
            self.schedule(self.now, usize::MAX, EventKind::RoundTrigger);
        }
        Ok(())
    }
}
