//! `fedsim verify`: run the numerical verification suite and gate the exit
//! code on every report holding.

use std::io::Write as _;
use std::path::Path;

use fedsim::analysis::{run_verification_suite, SuiteOptions, SuiteScale};

use crate::failure::{CliResult, Failure};

pub fn execute(scale: &str, seed: u64, out: Option<&Path>, tamper: Option<f64>) -> CliResult {
    let scale = match scale {
        "quick" => SuiteScale::Quick,
        "full" => SuiteScale::Full,
        other => {
            return Err(Failure::invalid(format!(
                "unknown scale {other:?}; expected quick or full"
            )))
        }
    };
    let grad_bound_scale = match tamper {
        Some(f) if f > 0.0 => {
            eprintln!("warning: tampered constants (gradient bound divided by {f})");
            1.0 / f
        }
        Some(f) => {
            return Err(Failure::invalid(format!(
                "tamper factor must be > 0, got {f}"
            )))
        }
        None => 1.0,
    };
    let report = run_verification_suite(&SuiteOptions {
        scale,
        seed,
        grad_bound_scale,
    })?;

    println!(
        "{:<38} {:>13} {:>13} {:>13}  holds",
        "check", "lhs", "rhs", "slack"
    );
    for r in &report.reports {
        println!(
            "{:<38} {:>13.6e} {:>13.6e} {:>13.4e}  {}",
            r.name, r.lhs, r.rhs, r.slack, r.holds
        );
    }
    if let Some(fit) = &report.rate_fit {
        println!(
            "{:<38} slope {:.4} (band [{}, {}]), r^2 {:.5} (min {}) -> {}",
            "rate-horizon-sweep",
            fit.slope,
            report.rate_slope_band.0,
            report.rate_slope_band.1,
            fit.r_squared,
            report.rate_min_r_squared,
            if report.rate_ok == Some(true) {
                "ok"
            } else {
                "FAIL"
            }
        );
    }
    if let Some(path) = out {
        let mut file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut file, &report).map_err(fedsim::Error::from)?;
        file.write_all(b"\n")?;
    }
    if report.all_hold {
        println!("all checks hold");
        Ok(0)
    } else {
        let failing: Vec<&str> = report
            .reports
            .iter()
            .filter(|r| !r.holds)
            .map(|r| r.name.as_str())
            .chain((report.rate_ok == Some(false)).then_some("rate-horizon-sweep"))
            .collect();
        eprintln!("FAILING: {}", failing.join(", "));
        Ok(4)
    }
}
