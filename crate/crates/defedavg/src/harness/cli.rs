//! Command-line interface.
//!
//! Subcommands: `run` (one experiment → metrics CSV), `sweep` (cohort ×
//! seed grid → speedup CSV), `verify` (built-in invariant suite),
//! `rates` (learning-rate plans for a config), `gradcheck`
//! (finite-difference audit of the configured problem).
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 verification
//! failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{parse_config, Experiment};
use super::metrics::{metrics_to_string, write_metrics_csv};
use super::sweep::{sweep, sweep_to_string};
use super::verify::run_verification_suite;
use crate::numerics::{finite_difference_gradient, relative_l2_error, RngStream, Weights};
use crate::simulator::run;
use crate::theory::{estimate_constants, iid_rates, lambda_bound, niid_rates, RatePlan};
use crate::Result;

#[derive(Parser)]
#[command(
    name = "defedavg",
    about = "Deterministic simulator for buffered asynchronous federated averaging",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment and emit its metrics as CSV.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Override the root seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Swap in a tuned preset (algorithm/dataset/n<cohort>).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Sweep cohort sizes and seeds; emit rounds/time-to-target CSV.
    Sweep {
        config: PathBuf,
        /// Cohort sizes, e.g. `2,4,8` or `2..8`.
        #[arg(long)]
        n: String,
        /// Seeds, e.g. `1..10` (inclusive) or `1,5,9`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run cells one at a time instead of in parallel.
        #[arg(long)]
        serial: bool,
        #[arg(long)]
        preset: Option<String>,
    },
    /// Run the built-in invariant suite (synthetic problems only).
    Verify,
    /// Print the learning-rate plans implied by a config.
    Rates { config: PathBuf },
    /// Finite-difference audit of the configured problem's gradient.
    Gradcheck {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses a comma-separated list of integers with inclusive `a..b`
/// ranges, e.g. `1..4,9` → `[1, 2, 3, 4, 9]`.
fn parse_int_list(text: &str) -> std::result::Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for item in text.split(',') {
        let item = item.trim();
        if item.is_empty() {
            return Err(format!("empty item in list '{text}'"));
        }
        if let Some((lo, hi)) = item.split_once("..") {
            let lo: u64 = lo.trim().parse().map_err(|_| format!("bad range start '{item}'"))?;
            let hi: u64 = hi.trim().parse().map_err(|_| format!("bad range end '{item}'"))?;
            if hi < lo {
                return Err(format!("range '{item}' is empty"));
            }
            out.extend(lo..=hi);
        } else {
            out.push(item.parse().map_err(|_| format!("bad integer '{item}'"))?);
        }
    }
    Ok(out)
}

fn load_experiment(
    path: &Path,
    seed: Option<u64>,
    preset: Option<&str>,
) -> std::result::Result<Experiment, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut exp = parse_config(&text).map_err(|e| e.to_string())?;
    if let Some(key) = preset {
        exp.apply_preset(key).map_err(|e| e.to_string())?;
    }
    if let Some(s) = seed {
        exp.set_seed(s);
    }
    Ok(exp)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn print_plan(label: &str, plan: &Result<RatePlan>) {
    match plan {
        Ok(p) => {
            println!(
                "{label}: eta = {:.6e}  eta_bar = {:.6e}  conditions_satisfied = {}",
                p.eta, p.eta_bar, p.conditions_satisfied
            );
            println!("{label}: binding constraint: {}", p.binding_constraint);
            println!("{label}: predicted avg grad-norm^2 at T: {:.6e}", p.bound_at_t);
        }
        Err(e) => println!("{label}: unavailable ({e})"),
    }
}

fn cmd_rates(exp: &Experiment) -> i32 {
    let problem = &exp.problem;
    let constants = match (
        problem.exact_smoothness(),
        problem.exact_sigma(),
        problem.exact_nu(),
        problem.known_optimum(),
    ) {
        (Some(smoothness), Some(sigma), Some(hetero), Some(f_star)) => {
            let w0 = problem.initial_weights();
            let g_bound = problem.full_gradient(&w0).norm_sq().sqrt() + hetero;
            crate::theory::ProblemConstants {
                smoothness,
                sigma,
                grad_bound: g_bound,
                hetero,
                gap: (problem.loss(&w0) - f_star).max(0.0),
            }
        }
        _ => {
            let mut stream = RngStream::derive(exp.config.root_seed, "rates-estimate");
            estimate_constants(problem, 3, 2000, &mut stream)
        }
    };
    println!(
        "constants: L = {:.6e}  sigma = {:.6e}  G = {:.6e}  nu = {:.6e}  gap = {:.6e}",
        constants.smoothness,
        constants.sigma,
        constants.grad_bound,
        constants.hetero,
        constants.gap
    );
    let policy = &exp.config.policy;
    let (big_n, t) = (problem.num_clients(), exp.config.t_max);
    let lambda = lambda_bound(big_n, policy.n, t, 0.01);
    println!(
        "staleness bound (N = {big_n}, n = {}, T = {t}, delta = 0.01): lambda <= {lambda}",
        policy.n
    );
    print_plan("niid", &niid_rates(policy.n, policy.k_local, &constants, t, lambda));
    print_plan("iid", &iid_rates(policy.n, policy.k_local, &constants, t, lambda));
    0
}

fn cmd_gradcheck(exp: &Experiment, seed: Option<u64>) -> i32 {
    let problem = &exp.problem;
    let mut stream = RngStream::derive(seed.unwrap_or(exp.config.root_seed), "gradcheck");
    let w = Weights::from_vec(
        stream.gaussian_vec(problem.dim()).iter().map(|v| 0.3 * v).collect(),
    )
    .expect("gaussians are finite");
    let fd = match finite_difference_gradient(|x| problem.loss(x), &w, 1e-6) {
        Ok(fd) => fd,
        Err(e) => {
            println!("gradcheck: FAIL ({e})");
            return 2;
        }
    };
    let exact = problem.full_gradient(&w);
    let err = relative_l2_error(&fd, &exact).expect("same dim");
    println!("gradcheck: relative L2 error {err:.6e} over {} coordinates", problem.dim());
    if err <= 1e-5 {
        println!("gradcheck: ok");
        0
    } else {
        println!("gradcheck: FAIL (tolerance 1e-5)");
        2
    }
}

/// Entry point; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.cmd {
        Cmd::Run { config, seed, out, preset } => {
            let exp = match load_experiment(&config, seed, preset.as_deref()) {
                Ok(exp) => exp,
                Err(msg) => return fail(&msg),
            };
            let result = match run(&exp.problem, &exp.config) {
                Ok(r) => r,
                Err(e) => return fail(&e.to_string()),
            };
            eprintln!(
                "run: {} rounds in {:.3} simulated seconds; final loss {:.6e}",
                exp.config.t_max,
                result.final_time,
                result.rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN)
            );
            let status = match out {
                Some(path) => write_metrics_csv(&result, &path),
                None => emit(&metrics_to_string(&result), None),
            };
            match status {
                Ok(()) => 0,
                Err(e) => fail(&e.to_string()),
            }
        }
        Cmd::Sweep { config, n, seeds, out, serial, preset } => {
            let exp = match load_experiment(&config, None, preset.as_deref()) {
                Ok(exp) => exp,
                Err(msg) => return fail(&msg),
            };
            let n_values = match parse_int_list(&n) {
                Ok(v) => v.into_iter().map(|x| x as usize).collect::<Vec<_>>(),
                Err(msg) => return fail(&format!("--n: {msg}")),
            };
            let seed_values = match parse_int_list(&seeds) {
                Ok(v) => v,
                Err(msg) => return fail(&format!("--seeds: {msg}")),
            };
            let table = match sweep(&exp, &n_values, &seed_values, !serial) {
                Ok(t) => t,
                Err(e) => return fail(&e.to_string()),
            };
            if table.unreached() > 0 {
                eprintln!(
                    "warning: {} of {} cells missed the target within T = {}",
                    table.unreached(),
                    table.cells.len(),
                    exp.config.t_max
                );
            }
            match emit(&sweep_to_string(&table), out.as_deref()) {
                Ok(()) => 0,
                Err(e) => fail(&e.to_string()),
            }
        }
        Cmd::Verify => {
            let results = run_verification_suite();
            let mut failures = 0;
            for r in &results {
                if r.pass {
                    println!("ok   - {} ({})", r.name, r.detail);
                } else {
                    failures += 1;
                    println!("FAIL - {} ({})", r.name, r.detail);
                }
            }
            println!("verify: {} checks, {failures} failures", results.len());
            if failures == 0 {
                0
            } else {
                2
            }
        }
        Cmd::Rates { config } => match load_experiment(&config, None, None) {
            Ok(exp) => cmd_rates(&exp),
            Err(msg) => fail(&msg),
        },
        Cmd::Gradcheck { config, seed } => match load_experiment(&config, None, None) {
            Ok(exp) => cmd_gradcheck(&exp, seed),
            Err(msg) => fail(&msg),
        },
    }
}

fn fail(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int_lists_support_ranges_and_commas() {
        assert_eq!(parse_int_list("2,4,8").unwrap(), vec![2, 4, 8]);
        assert_eq!(parse_int_list("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_int_list("1..3,9").unwrap(), vec![1, 2, 3, 9]);
        assert_eq!(parse_int_list("7").unwrap(), vec![7]);
        assert!(parse_int_list("4..1").is_err());
        assert!(parse_int_list("a").is_err());
        assert!(parse_int_list("1,,2").is_err());
    }
}
