//! `fedsim sweep-skew`: vary the exponential participation bias, run both
//! aggregation rules per (beta, seed), and correlate the final loss gap with
//! the participation skew.

use std::fs;
use std::io::Write as _;

use serde_json::json;

use fedsim::analysis::{compare_rules, pearson_correlation};
use fedsim::availability::ParticipationSampler;

use crate::failure::{CliResult, Failure};
use crate::manifest::{config_hash, version_tag};
use crate::spec::{exp_weights, ExperimentSpec, SamplerSpec};
use crate::RunOverrides;

fn parse_beta(raw: &str) -> Result<Option<f64>, Failure> {
    let trimmed = raw.trim();
    if trimmed.eq_ignore_ascii_case("inf") || trimmed.eq_ignore_ascii_case("uniform") {
        return Ok(None);
    }
    let beta: f64 = trimmed
        .parse()
        .map_err(|_| Failure::invalid(format!("beta {trimmed:?} is neither a number nor `inf`")))?;
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Failure::invalid(format!(
            "beta must be positive, got {beta}"
        )));
    }
    Ok(Some(beta))
}

fn beta_label(beta: Option<f64>) -> String {
    match beta {
        Some(b) => format!("{b}"),
        None => "inf".to_string(),
    }
}

pub fn execute(overrides: &RunOverrides, betas_raw: &[String]) -> CliResult {
    let spec = ExperimentSpec::load(&overrides.config, overrides)?;
    let out_dir = spec.out_dir()?.to_path_buf();
    let betas: Vec<Option<f64>> = betas_raw
        .iter()
        .map(|b| parse_beta(b))
        .collect::<Result<_, _>>()?;
    if betas.len() * spec.seeds.len() < 2 {
        return Err(Failure::invalid(
            "sweep-skew needs at least two (beta, seed) points",
        ));
    }
    let size = match &spec.sampler {
        SamplerSpec::FixedSizeWeighted { size, .. } | SamplerSpec::FixedSizeExp { size, .. } => {
            *size
        }
        _ => {
            return Err(Failure::invalid(
                "sweep-skew varies a fixed-size weighted sampler: the spec's sampler must be fixed-size-weighted or fixed-size-exp",
            ))
        }
    };
    let n = spec.task.n_clients();
    let data = spec.task.build()?;
    let config = spec.run_config(0)?;

    fs::create_dir_all(&out_dir)?;
    let mut csv = String::from("beta,seed,skew,agnostic_final,weighted_final,diff\n");
    let mut skews = Vec::new();
    let mut diffs = Vec::new();
    for &beta in &betas {
        let sampler = ParticipationSampler::fixed_size_weighted(exp_weights(n, beta), size)
            .map_err(Failure::from)?;
        let rows = compare_rules(&config, &sampler, &data, &spec.seeds, spec.marginal_draws)?;
        for row in rows {
            use std::fmt::Write as _;
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                beta_label(beta),
                row.seed,
                row.skew,
                row.agnostic_final,
                row.weighted_final,
                row.difference()
            );
            skews.push(row.skew);
            diffs.push(row.difference());
        }
    }
    fs::write(out_dir.join("sweep.csv"), &csv)?;

    let correlation = pearson_correlation(&skews, &diffs);
    match correlation {
        Some(r) => println!("skew/difference Pearson correlation: {r:.6}"),
        None => println!("skew/difference Pearson correlation: undefined (degenerate sweep)"),
    }

    let manifest = json!({
        "version": version_tag(),
        "command": "sweep-skew",
        "config_hash": config_hash(&spec),
        "spec": &spec,
        "betas": betas_raw,
        "points": skews.len(),
        "correlation": correlation,
    });
    let mut out = fs::File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut out, &manifest).map_err(fedsim::Error::from)?;
    out.write_all(b"\n")?;
    Ok(0)
}
