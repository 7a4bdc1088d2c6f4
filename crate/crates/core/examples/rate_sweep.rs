//! Empirical min-gradient rates against horizon K, with the partial-sum asymptotics that
//! drive them.
//!
//! cargo run --release --example rate_sweep

use eslab::bounds::{corollary_rate, fit_rate, sum_asymptotics_check, FloorMode};
use eslab::optimizer::{run_ensemble, RunConfig};
use eslab::problems::{make_random_quadratic, QuadraticSpec, SpectrumLayout};
use eslab::sampling::{closed_form_es, SamplingScheme};
use eslab::schedules::{step_ceiling, ScheduleKind, StepSchedule};

const GRID: [usize; 5] = [100, 316, 1000, 3162, 10_000];

fn main() -> eslab::Result<()> {
    let problem = make_random_quadratic(
        &QuadraticSpec::new(10, 40, (1e-7, 1.0), 0.0, 6).with_layout(SpectrumLayout::LogStratified),
    )?;
    let scheme = SamplingScheme::tau_nice(10, 1)?;
    let es = closed_form_es(&scheme, &problem)?;
    let eta = 0.5 * step_ceiling(problem.l_bar(), es.b.max(1.0));
    let x0 = problem.balanced_start().expect("quadratic");
    let runs = 50;

    for kind in ScheduleKind::ALL {
        let build = |k: usize| match kind {
            ScheduleKind::Constant => StepSchedule::constant(eta),
            ScheduleKind::Harmonic => StepSchedule::harmonic(eta),
            ScheduleKind::Polynomial => StepSchedule::polynomial(eta, 0.75),
            ScheduleKind::Cosine => StepSchedule::cosine(eta, k),
        };
        let mut curve = Vec::new();
        if kind == ScheduleKind::Cosine {
            for k in GRID {
                let ens = run_ensemble(
                    &problem,
                    &scheme,
                    &build(k)?,
                    &RunConfig::new(k, 1).with_start(x0.clone()),
                    runs,
                )?;
                curve.push((k as f64, ens.min_grad_mean(k)));
            }
        } else {
            let k_max = GRID[GRID.len() - 1];
            let ens = run_ensemble(
                &problem,
                &scheme,
                &build(k_max)?,
                &RunConfig::new(k_max, 1).with_start(x0.clone()),
                runs,
            )?;
            curve.extend(GRID.iter().map(|&k| (k as f64, ens.min_grad_mean(k))));
        }
        let prediction = corollary_rate(kind, Some(0.75))?;
        let mode = if prediction.floor {
            FloorMode::TailMean
        } else {
            FloorMode::None
        };
        let fit = fit_rate(&curve, mode)?;
        let predicted: Vec<String> = prediction
            .forms
            .iter()
            .map(|f| {
                format!(
                    "{} ~ {:.3}",
                    f.label(),
                    f.local_slope(GRID[0] as f64, GRID[4] as f64)
                )
            })
            .collect();
        println!(
            "{:<10} slope {:>7.3}   predicted {}",
            kind.name(),
            fit.slope,
            predicted.join(" | ")
        );
    }

    println!("\npartial sums at large K (exact / asymptotic)");
    for (kind, k) in [
        (ScheduleKind::Cosine, 10_000),
        (ScheduleKind::Polynomial, 1_000_000),
        (ScheduleKind::Harmonic, 1_000_000),
    ] {
        let row = sum_asymptotics_check(kind, 1.0, Some(0.5), &[k])?[0];
        println!(
            "{:<10} K={k:<8} sum {:.6}  sum_sq {:.6}",
            kind.name(),
            row.ratio(),
            row.ratio_sq()
        );
    }
    Ok(())
}
