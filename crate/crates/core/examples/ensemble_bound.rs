//! Seed-ensemble check of the min-gradient bound for every schedule, including a step size
//! just below the admissibility ceiling.
//!
//! cargo run --release --example ensemble_bound

use eslab::bounds::check_bound;
use eslab::optimizer::{run_ensemble, RunConfig};
use eslab::problems::{make_random_quadratic, QuadraticSpec};
use eslab::sampling::{closed_form_es, SamplingScheme};
use eslab::schedules::{step_ceiling, StepSchedule};

fn main() -> eslab::Result<()> {
    let problem = make_random_quadratic(&QuadraticSpec::new(12, 6, (0.3, 2.0), 1.0, 8).rotated())?;
    let scheme = SamplingScheme::tau_nice(12, 3)?;
    let es = closed_form_es(&scheme, &problem)?;
    let l = problem.l_bar();
    let horizon = 1000;
    println!(
        "A = {:.4}, B = {:.4}, C = {:.4}, ceiling 2/(LB) = {:.4}",
        es.a,
        es.b,
        es.c,
        step_ceiling(l, es.b)
    );

    for frac in [0.5, 0.99] {
        let eta = frac * step_ceiling(l, es.b.max(1.0));
        let schedules = [
            StepSchedule::constant(eta)?,
            StepSchedule::harmonic(eta)?,
            StepSchedule::polynomial(eta, 0.5)?,
            StepSchedule::cosine(eta, horizon)?,
        ];
        println!("\neta = {frac} x ceiling");
        for schedule in &schedules {
            let ens = run_ensemble(
                &problem,
                &scheme,
                schedule,
                &RunConfig::new(horizon, 5),
                200,
            )?;
            let r = check_bound(&ens, &es, l, schedule, horizon, problem.infimum_slack())?;
            println!(
                "  {:<10} lhs {:.3e}  rhs {:.3e} = {:.2e} + {:.2e} + {:.2e}  {}",
                schedule.kind().name(),
                r.lhs,
                r.rhs_total,
                r.terms.term1,
                r.terms.term2,
                r.terms.term3,
                if r.holds { "ok" } else { "VIOLATED" }
            );
        }
    }
    Ok(())
}
