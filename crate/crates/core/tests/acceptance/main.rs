//! Acceptance gate: prints one PASS/FAIL line per criterion with the
//! measured values and wall time.
//!
//! cargo test --release -p coral --test acceptance           all criteria
//! cargo test --release -p coral --test acceptance -- 3 4    a subset

#[path = "../common/mod.rs"]
mod common;

mod audit;
mod determinism;
mod grads;
mod learning;
mod mapping;
mod oracles;

use std::process::ExitCode;
use std::time::Instant;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

struct Criterion {
    id: u32,
    name: &'static str,
    /// Wall-time limit in seconds; `None` when unbounded.
    budget: Option<f64>,
    run: fn() -> Outcome,
}

const CRITERIA: [Criterion; 8] = [
    Criterion { id: 1, name: "oracle suites", budget: Some(120.0), run: oracles::run },
    Criterion { id: 2, name: "gradient checks", budget: Some(300.0), run: grads::run },
    Criterion { id: 3, name: "geometric round trip", budget: Some(120.0), run: mapping::round_trip },
    Criterion { id: 4, name: "dynamic clearing", budget: None, run: mapping::clearing },
    Criterion { id: 5, name: "overfit and retrieval", budget: Some(600.0), run: learning::overfit },
    Criterion { id: 6, name: "illumination ablation", budget: Some(1800.0), run: learning::ablation },
    Criterion { id: 7, name: "architecture audit", budget: None, run: audit::run },
    Criterion { id: 8, name: "determinism", budget: None, run: determinism::run },
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let out = (c.run)();
        let secs = start.elapsed().as_secs_f64();
        let in_time = c.budget.is_none_or(|b| secs <= b);
        let pass = out.pass && in_time;
        let budget = c.budget.map_or(String::new(), |b| format!(" / {b:.0}s"));
        println!(
            "criterion {} {} {}: {} [{secs:.1}s{budget}]",
            c.id,
            if pass { "PASS" } else { "FAIL" },
            c.name,
            out.detail
        );
        if !pass {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
