//! Acceptance suite: one PASS/FAIL line per criterion, followed by the
//! measured tables. Failing criteria are reported, not hidden. The process
//! exits nonzero on a failure only when `HSB_ACCEPTANCE_STRICT=1`, so that
//! `cargo test` stays usable while a known failure is documented.

use hsbnet::checks::{self, CheckOutcome};

fn main() {
    let runs: [fn() -> CheckOutcome; 11] = [
        checks::adjoint_identity,
        checks::polar_equals_direct,
        checks::angular_rate,
        checks::low_rank_bound,
        checks::symbol_determinant,
        checks::tikhonov_round_trip,
        checks::residual_layers_rate,
        checks::gradient_check,
        checks::lipschitz_inequality,
        checks::training_smoke,
        checks::baseline_monotone,
    ];
    let mut outcomes = Vec::new();
    for run in runs {
        let out = run();
        println!("{}", out.line());
        outcomes.push(out);
    }
    for out in &outcomes {
        if let Some(t) = &out.table {
            println!();
            println!("criterion {} table: {}", out.id, t.header.join(", "));
            for row in &t.rows {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
                println!("    {}", cells.join(", "));
            }
        }
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!();
    println!("acceptance: {} of {} criteria pass; failing: {:?}", outcomes.len() - failed.len(), outcomes.len(), failed);
    let strict = std::env::var("HSB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
