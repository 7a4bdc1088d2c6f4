//! Recovering (A, B, C) by nonnegative least squares: a switching synthetic model, then probe
//! data from a real SGD run.
//!
//! cargo run --example es_fit

use eslab::es_model::{
    detect_crossover, fit_es, samples_from_trajectory, windowed_fit, ForwardModel,
};
use eslab::optimizer::{read_trajectory_csv, run_sgd, RunConfig};
use eslab::problems::{make_random_quadratic, QuadraticSpec};
use eslab::sampling::{closed_form_es, EsConstants, SamplingScheme};
use eslab::schedules::StepSchedule;

fn main() -> eslab::Result<()> {
    let model = ForwardModel {
        before: EsConstants::new(5.0, 0.2, 0.1),
        after: EsConstants::new(0.5, 2.0, 0.1),
        switch_step: 300,
        length: 600,
        noise: 0.02,
        seed: 1,
    };
    let fits = windowed_fit(&model.samples(), 40, 40)?;
    for w in &fits {
        println!(
            "window {:>3}: A {:6.3}  B {:6.3}  C {:6.3}  r2 {:.3}",
            w.start, w.fit.a_hat, w.fit.b_hat, w.fit.c_hat, w.fit.r_squared
        );
    }
    if let Some(c) = detect_crossover(&fits, 40) {
        println!("crossover near sample {:.0}", c.center);
    }

    // Fitted constants describe one trajectory; they need not match the closed form.
    let problem = make_random_quadratic(&QuadraticSpec::new(8, 4, (0.5, 2.0), 1.0, 2).rotated())?;
    let scheme = SamplingScheme::tau_nice(8, 2)?;
    let traj = run_sgd(
        &problem,
        &scheme,
        &StepSchedule::harmonic(0.5)?,
        &RunConfig::new(400, 3).with_probes(4, 500),
    )?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    let rows = read_trajectory_csv(csv.as_slice())?;
    let closed = closed_form_es(&scheme, &problem)?;
    for exact in [false, true] {
        let fit = fit_es(&samples_from_trajectory(&rows, problem.f_star(), exact))?;
        println!(
            "{} probes: A {:.3} B {:.3} C {:.3} r2 {:.4} (closed form {:.3} {:.3} {:.3})",
            if exact { "exact" } else { "sampled" },
            fit.a_hat,
            fit.b_hat,
            fit.c_hat,
            fit.r_squared,
            closed.a,
            closed.b,
            closed.c
        );
    }
    Ok(())
}
