//! Closed-form ES constants for each sampling scheme, checked against brute-force enumeration.
//!
//! cargo run --example sampling_constants

use eslab::problems::{make_random_quadratic, QuadraticSpec};
use eslab::sampling::{
    closed_form_es, enumerate_second_moment, exact_second_moment, verify_es_pointwise,
    SamplingScheme,
};

fn main() -> eslab::Result<()> {
    let n = 6;
    let problem = make_random_quadratic(&QuadraticSpec::new(n, 4, (0.2, 3.0), 1.0, 17).rotated())?;
    println!(
        "n = {n}, L_bar = {:.4}, L_max = {:.4}, delta_inf = {:.4}",
        problem.l_bar(),
        problem.l_max(),
        problem.delta_inf()
    );

    let schemes = [
        SamplingScheme::uniform_with_replacement(n, 2)?,
        SamplingScheme::with_replacement(2, vec![0.05, 0.1, 0.15, 0.2, 0.2, 0.3])?,
        SamplingScheme::independent(vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8])?,
        SamplingScheme::tau_nice(n, 1)?,
        SamplingScheme::tau_nice(n, 3)?,
        SamplingScheme::tau_nice(n, n)?,
    ];
    let points = problem.sample_points(200, 2.0, 1);
    println!(
        "{:<18}{:>10}{:>10}{:>10}{:>12}{:>12}",
        "scheme", "A", "B", "C", "enum diff", "min slack"
    );
    for s in &schemes {
        let es = closed_form_es(s, &problem)?;
        let mut max_diff: f64 = 0.0;
        let mut min_slack = f64::INFINITY;
        for x in &points {
            let exact = exact_second_moment(&problem, s, x)?;
            let brute = enumerate_second_moment(&problem, s, x)?;
            max_diff = max_diff.max((exact - brute).abs());
            let c = verify_es_pointwise(&problem, s, x)?;
            assert!(c.holds);
            min_slack = min_slack.min(c.rhs - c.lhs);
        }
        let label = match s {
            SamplingScheme::TauNice { tau, .. } => format!("tau_nice(tau={tau})"),
            SamplingScheme::WithReplacement { tau, .. } => format!("with_repl(tau={tau})"),
            SamplingScheme::IndependentBernoulli { .. } => "independent".to_owned(),
        };
        println!(
            "{label:<18}{:>10.4}{:>10.4}{:>10.4}{:>12.2e}{:>12.3e}",
            es.a, es.b, es.c, max_diff, min_slack
        );
    }
    Ok(())
}
