//! Experiment configuration: a flat sectioned key-value format.
//!
//! Grammar: `[section]` headers, `key = value` lines, `#` comment lines,
//! blank lines. Sections are `[problem]`, `[algorithm]`, `[system]`, and
//! `[run]`; all may be omitted except that `run.T` must be set somewhere.
//! Unknown sections or keys are errors (typo protection), reported with
//! their 1-based line number.
//!
//! Key reference (defaults in parentheses):
//!
//! ```text
//! [problem]  kind (quadratic) | clients (100) | dim (10) | nu (0.5)
//!            sigma (1.0) | gap (1.0) | dataset (blobs) | partition (iid)
//!            l2 (0.0) | hidden (32) | samples (2000) | features (20)
//!            classes (10) | separation (3.0) | data_seed (0)
//! [algorithm] kind (defedavg_niid) | n (10) | k_local (50) | eta | eta_bar
//!             send_policy (overwrite) | preset
//! [system]   c_mac (10e9) | bandwidth (400e6) | bandwidth_down | bandwidth_up
//!            speed_min (1.0) | speed_max (5.0) | flops | bytes | workload
//! [run]      T (required) | batch (10) | seed (0) | eval_every (1)
//!            sync (false) | target_grad | target_acc
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use super::presets;
use crate::algorithms::{Policy, PolicyKind};
use crate::fl_core::SendPolicy;
use crate::numerics::RngStream;
use crate::problems::{
    make_logreg, make_mlp, make_quadratic, partition, Dataset, PartitionScheme, Problem,
};
use crate::simulator::{RunConfig, SystemModel};
use crate::{Error, Result};

/// Environment variable naming the directory that holds IDX datasets.
pub const DATA_DIR_ENV: &str = "DEFEDAVG_DATA_DIR";

const SECTIONS: [&str; 4] = ["problem", "algorithm", "system", "run"];

/// A parsed key-value document, before semantic resolution.
#[derive(Debug, Clone)]
pub struct ConfigFile {
    /// `section.key` → (value, 1-based line).
    entries: BTreeMap<String, (String, usize)>,
    used: std::collections::BTreeSet<String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = match SECTIONS.iter().find(|s| **s == name) {
                    Some(s) => Some(s),
                    None => {
                        return Err(Error::Config {
                            line,
                            reason: format!("unknown section [{name}]"),
                        })
                    }
                };
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::Config {
                    line,
                    reason: "expected '[section]' or 'key = value'".into(),
                });
            };
            let Some(section) = section else {
                return Err(Error::Config {
                    line,
                    reason: "key before any [section] header".into(),
                });
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config { line, reason: "empty key".into() });
            }
            let full = format!("{section}.{key}");
            if entries.contains_key(&full) {
                return Err(Error::Config { line, reason: format!("duplicate key {full}") });
            }
            entries.insert(full, (value.trim().to_string(), line));
        }
        Ok(ConfigFile { entries, used: Default::default() })
    }

    /// Raw string value, marking the key as consumed.
    pub fn get_str(&mut self, key: &str) -> Option<String> {
        let hit = self.entries.get(key).map(|(v, _)| v.clone());
        if hit.is_some() {
            self.used.insert(key.to_string());
        }
        hit
    }

    /// Line a key appeared on (for constraint diagnostics).
    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|(_, l)| *l).unwrap_or(0)
    }

    /// Typed value, with a line-numbered error on parse failure.
    pub fn get<T: FromStr>(&mut self, key: &str, type_name: &str) -> Result<Option<T>> {
        let Some(value) = self.get_str(key) else { return Ok(None) };
        match value.parse() {
            Ok(v) => Ok(Some(v)),
            Err(_) => Err(Error::Config {
                line: self.line_of(key),
                reason: format!("key {key}: expected {type_name}, got '{value}'"),
            }),
        }
    }

    fn get_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.get(key, "a number")
    }

    fn get_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.get(key, "a nonnegative integer")
    }

    fn get_bool(&mut self, key: &str) -> Result<Option<bool>> {
        self.get(key, "true or false")
    }

    /// Errors on the first key never consumed by resolution.
    pub fn finish(&self) -> Result<()> {
        for (key, (_, line)) in &self.entries {
            if !self.used.contains(key) {
                return Err(Error::Config { line: *line, reason: format!("unknown key {key}") });
            }
        }
        Ok(())
    }
}

/// Stopping rule for sweeps and reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Reached when `grad_norm_sq` falls to or below the threshold.
    GradNorm(f64),
    /// Reached when test accuracy meets or exceeds the threshold.
    Accuracy(f64),
}

/// A fully resolved experiment: the problem plus the run configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub problem: Problem,
    pub config: RunConfig,
    pub target: Target,
}

impl Experiment {
    /// Replaces the root seed (the `--seed` CLI override).
    pub fn set_seed(&mut self, seed: u64) {
        self.config.root_seed = seed;
    }

    /// Swaps in a preset's policy kind, cohort size, and rates
    /// (the `--preset` CLI override).
    pub fn apply_preset(&mut self, key: &str) -> Result<()> {
        let preset = presets::lookup(key)
            .ok_or_else(|| Error::UnknownPreset(key.to_string()))?;
        let kind = preset.policy_kind().ok_or_else(|| {
            Error::InvalidConfig(format!("preset {key} has no runnable algorithm here"))
        })?;
        let old = &self.config.policy;
        self.config.policy = if kind == PolicyKind::Asysg {
            Policy::asysg(preset.n, preset.eta_bar.expect("asysg rows carry a rate"))?
        } else {
            Policy::new(
                kind,
                preset.n,
                old.k_local,
                preset.eta.expect("two-rate rows carry eta"),
                preset.eta_bar.expect("two-rate rows carry eta_bar"),
                old.send_policy,
            )?
        };
        if self.config.policy.n > self.problem.num_clients() {
            return Err(Error::InvalidConfig(format!(
                "preset {key}: n = {} exceeds the client count N = {}",
                self.config.policy.n,
                self.problem.num_clients()
            )));
        }
        Ok(())
    }
}

/// Parses and resolves a config document into a runnable experiment.
pub fn parse_config(text: &str) -> Result<Experiment> {
    let mut cf = ConfigFile::parse(text)?;

    // [run]
    let t_max = cf
        .get_usize("run.T")?
        .ok_or_else(|| Error::InvalidConfig("missing key run.T".into()))?;
    if t_max == 0 {
        return Err(Error::Config {
            line: cf.line_of("run.T"),
            reason: "run.T must be at least 1".into(),
        });
    }
    let batch = cf.get_usize("run.batch")?.unwrap_or(10);
    let seed = cf.get::<u64>("run.seed", "an unsigned integer")?.unwrap_or(0);
    let eval_every = cf.get_usize("run.eval_every")?.unwrap_or(1);
    let sync = cf.get_bool("run.sync")?.unwrap_or(false);
    let target_grad = cf.get_f64("run.target_grad")?;
    let target_acc = cf.get_f64("run.target_acc")?;
    if target_grad.is_some() && target_acc.is_some() {
        return Err(Error::Config {
            line: cf.line_of("run.target_acc"),
            reason: "set only one of run.target_grad and run.target_acc".into(),
        });
    }

    // [problem]
    let scheme = match cf.get_str("problem.partition").as_deref().unwrap_or("iid") {
        "iid" => PartitionScheme::Iid,
        "two_class" => PartitionScheme::TwoClass,
        other => {
            return Err(Error::Config {
                line: cf.line_of("problem.partition"),
                reason: format!("unknown partition '{other}' (iid, two_class)"),
            })
        }
    };
    let clients = cf.get_usize("problem.clients")?.unwrap_or(100);
    let kind = cf.get_str("problem.kind").unwrap_or_else(|| "quadratic".into());
    let dataset_name = cf.get_str("problem.dataset").unwrap_or_else(|| "blobs".into());
    let problem = match kind.as_str() {
        "quadratic" => {
            let dim = cf.get_usize("problem.dim")?.unwrap_or(10);
            let nu = cf.get_f64("problem.nu")?.unwrap_or(0.5);
            let sigma = cf.get_f64("problem.sigma")?.unwrap_or(1.0);
            let gap = cf.get_f64("problem.gap")?.unwrap_or(1.0);
            Problem::Quadratic(make_quadratic(clients, dim, nu, sigma, gap)?)
        }
        "logreg" | "mlp" => {
            let data_seed = cf.get::<u64>("problem.data_seed", "an unsigned integer")?.unwrap_or(0);
            let (train, test) = load_dataset(&dataset_name, &mut cf, data_seed)?;
            let mut pstream = RngStream::derive(data_seed, "partition");
            let part = partition(&train, scheme, clients, &mut pstream)?;
            if kind == "logreg" {
                let l2 = cf.get_f64("problem.l2")?.unwrap_or(0.0);
                Problem::LogReg(make_logreg(train, test, part, l2)?)
            } else {
                let hidden = cf.get_usize("problem.hidden")?.unwrap_or(32);
                Problem::Mlp(make_mlp(train, test, part, hidden, data_seed)?)
            }
        }
        other => {
            return Err(Error::Config {
                line: cf.line_of("problem.kind"),
                reason: format!("unknown problem kind '{other}' (quadratic, logreg, mlp)"),
            })
        }
    };

    // [algorithm] — a preset supplies kind, n, and rates as defaults;
    // explicit keys override n and the rates but must not contradict
    // the preset's algorithm.
    let preset = match cf.get_str("algorithm.preset") {
        Some(key) => Some(
            presets::lookup(&key).ok_or_else(|| Error::UnknownPreset(key.clone()))?,
        ),
        None => None,
    };
    let preset_kind = match preset {
        Some(p) => Some(p.policy_kind().ok_or_else(|| {
            Error::Config {
                line: cf.line_of("algorithm.preset"),
                reason: format!("preset {} has no runnable algorithm here", p.key()),
            }
        })?),
        None => None,
    };
    let algo_kind = match cf.get_str("algorithm.kind") {
        Some(name) => {
            let parsed = parse_policy_kind(&name).ok_or_else(|| Error::Config {
                line: cf.line_of("algorithm.kind"),
                reason: format!("unknown algorithm '{name}'"),
            })?;
            if let Some(pk) = preset_kind {
                if pk != parsed {
                    return Err(Error::Config {
                        line: cf.line_of("algorithm.kind"),
                        reason: format!(
                            "algorithm.kind = {name} contradicts preset {}",
                            preset.expect("checked").key()
                        ),
                    });
                }
            }
            parsed
        }
        None => preset_kind.unwrap_or(PolicyKind::DefedavgNiid),
    };
    let n = cf
        .get_usize("algorithm.n")?
        .or(preset.map(|p| p.n))
        .unwrap_or(10);
    if n > clients {
        return Err(Error::Config {
            line: cf.line_of("algorithm.n").max(1),
            reason: format!("n = {n} exceeds the client count N = {clients}"),
        });
    }
    let k_local = cf.get_usize("algorithm.k_local")?.unwrap_or(50);
    let eta = cf.get_f64("algorithm.eta")?.or(preset.and_then(|p| p.eta));
    let eta_bar = cf.get_f64("algorithm.eta_bar")?.or(preset.and_then(|p| p.eta_bar));
    let send_policy = match cf.get_str("algorithm.send_policy").as_deref().unwrap_or("overwrite") {
        "overwrite" => SendPolicy::AlwaysOverwrite,
        "on_select" => SendPolicy::OverwriteOnSelect,
        other => {
            return Err(Error::Config {
                line: cf.line_of("algorithm.send_policy"),
                reason: format!("unknown send_policy '{other}' (overwrite, on_select)"),
            })
        }
    };
    let policy = if algo_kind == PolicyKind::Asysg {
        if eta.is_some() {
            return Err(Error::Config {
                line: cf.line_of("algorithm.eta"),
                reason: "asysg has a single rate; set eta_bar only".into(),
            });
        }
        let rate = eta_bar
            .ok_or_else(|| Error::InvalidConfig("missing key algorithm.eta_bar".into()))?;
        Policy::asysg(n, rate)?
    } else {
        let eta = eta.ok_or_else(|| Error::InvalidConfig("missing key algorithm.eta".into()))?;
        let eta_bar =
            eta_bar.ok_or_else(|| Error::InvalidConfig("missing key algorithm.eta_bar".into()))?;
        Policy::new(algo_kind, n, k_local, eta, eta_bar, send_policy)?
    };

    // [system] — workload costs default to the problem's own figures;
    // `workload` swaps in a named benchmark's constants, and explicit
    // flops/bytes keys trump both.
    let bandwidth = cf.get_f64("system.bandwidth")?.unwrap_or(400e6);
    let mut system = SystemModel {
        c_mac: cf.get_f64("system.c_mac")?.unwrap_or(10e9),
        bandwidth_down: cf.get_f64("system.bandwidth_down")?.unwrap_or(bandwidth),
        bandwidth_up: cf.get_f64("system.bandwidth_up")?.unwrap_or(bandwidth),
        speed_min: cf.get_f64("system.speed_min")?.unwrap_or(1.0),
        speed_max: cf.get_f64("system.speed_max")?.unwrap_or(5.0),
        ..SystemModel::default()
    };
    let (wl_flops, wl_bytes) = match cf.get_str("system.workload").as_deref() {
        None => (problem.flops_per_iter(batch), problem.model_bytes()),
        Some("fashionmnist") => (17.0e6, 2.2e6),
        Some("cifar10") => (31.4e6, 3.53e6),
        Some(other) => {
            return Err(Error::Config {
                line: cf.line_of("system.workload"),
                reason: format!("unknown workload '{other}' (fashionmnist, cifar10)"),
            })
        }
    };
    system.flops_per_iter = cf.get_f64("system.flops")?.unwrap_or(wl_flops);
    system.model_bytes = cf.get_f64("system.bytes")?.unwrap_or(wl_bytes);
    system.validate()?;

    let target = match (target_grad, target_acc) {
        (Some(g), _) => Target::GradNorm(g),
        (_, Some(a)) => Target::Accuracy(a),
        _ => default_target(&problem, &dataset_name, scheme),
    };

    cf.finish()?;

    let mut config = RunConfig::new(policy, t_max, batch, seed);
    config.system = system;
    config.eval_every = eval_every;
    config.sync_mode = sync;
    Ok(Experiment { problem, config, target })
}

fn parse_policy_kind(name: &str) -> Option<PolicyKind> {
    Some(match name {
        "fedavg" => PolicyKind::FedAvg,
        "defedavg_niid" => PolicyKind::DefedavgNiid,
        "defedavg_iid" => PolicyKind::DefedavgIid,
        "fedbuff" => PolicyKind::FedBuff,
        "asysg" => PolicyKind::Asysg,
        _ => return None,
    })
}

/// Benchmark accuracy targets; synthetic problems default to a gradient
/// norm threshold instead.
fn default_target(problem: &Problem, dataset: &str, scheme: PartitionScheme) -> Target {
    if matches!(problem, Problem::Quadratic(_)) {
        return Target::GradNorm(0.01);
    }
    let iid = scheme == PartitionScheme::Iid;
    match dataset {
        "cifar10" => Target::Accuracy(if iid { 0.70 } else { 0.60 }),
        _ => Target::Accuracy(if iid { 0.90 } else { 0.80 }),
    }
}

fn load_dataset(name: &str, cf: &mut ConfigFile, data_seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    match name {
        "blobs" => {
            let samples = cf.get_usize("problem.samples")?.unwrap_or(2000);
            let features = cf.get_usize("problem.features")?.unwrap_or(20);
            let classes = cf.get_usize("problem.classes")?.unwrap_or(10);
            let separation = cf.get_f64("problem.separation")?.unwrap_or(3.0);
            let mut stream = RngStream::derive(data_seed, "blobs");
            // One generation, split train/test, so both halves share
            // the same class centers.
            let test_samples = (samples / 5).max(classes);
            let all = Dataset::synthetic_blobs(
                samples + test_samples,
                features,
                classes,
                separation,
                &mut stream,
            )?;
            let (train, test) = all.split_at(samples)?;
            Ok((train, Some(test)))
        }
        "fashionmnist" | "cifar10" => {
            let dir = std::env::var(DATA_DIR_ENV).map_err(|_| {
                Error::InvalidConfig(format!(
                    "dataset '{name}' needs IDX files; set {DATA_DIR_ENV} to their directory"
                ))
            })?;
            let root = PathBuf::from(dir).join(name);
            let train = Dataset::from_idx_pair(
                &root.join("train-images-idx3-ubyte"),
                &root.join("train-labels-idx1-ubyte"),
            )?;
            let test = Dataset::from_idx_pair(
                &root.join("t10k-images-idx3-ubyte"),
                &root.join("t10k-labels-idx1-ubyte"),
            )?;
            Ok((train, Some(test)))
        }
        other => Err(Error::Config {
            line: cf.line_of("problem.dataset"),
            reason: format!("unknown dataset '{other}' (blobs, fashionmnist, cifar10)"),
        }),
    }
}
