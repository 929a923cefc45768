//! Runs the full property suite: symmetry contracts of the network,
//! score and posterior oracles, gradient checks, mirage mechanics, and
//! schedule invariants. One line per property, nonzero exit on any
//! failure.
//!
//! ```text
//! cargo run --release --example verify_properties -- [seed]
//! ```

use mirage::verify::{all_passed, render, run_all};
use std::process::ExitCode;

fn main() -> ExitCode {
    let seed: u64 = std::env::args()
        .nth(1)
        .map_or(0, |s| s.parse().expect("seed is an integer"));
    let reports = run_all(seed);
    print!("{}", render(&reports));
    if all_passed(&reports) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
