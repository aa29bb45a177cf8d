use std::process::exit;

fn main() {
    exit(defedavg::harness::cli::run_cli(std::env::args_os()))
}
