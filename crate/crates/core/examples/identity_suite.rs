//! Every enumeration identity over the three schemes on quadratic and logistic problems.
//!
//! cargo run --example identity_suite

use eslab::cli::{identity_table, IdentitySection};

fn main() -> eslab::Result<()> {
    let rows = identity_table(
        &IdentitySection {
            n: 5,
            d: 3,
            tau: 2,
            points: 30,
        },
        11,
    )?;
    for r in &rows {
        println!(
            "{:<18} {:<22} {:<10} {:>4} checks  {} failures  max {:+.2e}",
            r.identity, r.scheme, r.problem, r.checks, r.failures, r.max_error
        );
    }
    let failures: usize = rows.iter().map(|r| r.failures).sum();
    println!("{} failures", failures);
    Ok(())
}
