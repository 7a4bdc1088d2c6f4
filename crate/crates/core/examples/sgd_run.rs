//! A single probed SGD run on a logistic regression problem, written as CSV to stdout.
//!
//! cargo run --example sgd_run > trajectory.csv

use std::io::stdout;

use eslab::optimizer::{run_sgd, RunConfig};
use eslab::problems::make_logistic;
use eslab::sampling::{closed_form_es, SamplingScheme};
use eslab::schedules::{step_ceiling, StepSchedule};

fn main() -> eslab::Result<()> {
    let problem = make_logistic(20, 5, 0.05, 4)?;
    let scheme = SamplingScheme::tau_nice(20, 4)?;
    let es = closed_form_es(&scheme, &problem)?;
    let eta = 0.5 * step_ceiling(problem.l_bar(), es.b.max(1.0));
    let schedule = StepSchedule::polynomial(eta, 0.6)?;

    let cfg = RunConfig::new(500, 99).with_probes(25, 400);
    let traj = run_sgd(&problem, &scheme, &schedule, &cfg)?;
    eprintln!(
        "eta = {eta:.4}, f* = {:.6}, final gap = {:.3e}, min |grad|^2 = {:.3e}",
        problem.f_star(),
        traj.steps.last().unwrap().f - problem.f_star(),
        traj.min_grad_norm_sq()
    );
    traj.write_csv(stdout().lock())?;
    Ok(())
}
