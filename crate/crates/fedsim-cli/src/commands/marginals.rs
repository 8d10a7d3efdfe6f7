//! `fedsim marginals`: print a sampler's marginal survival weights and skew.

use serde_json::json;

use fedsim::availability::{
    compute_marginals_exact, enumerate_sampler_distribution, estimate_marginals,
    participation_skew, MarginalWeights, ParticipationSampler,
};
use fedsim::rng::{derive_stream, domain};
use fedsim::Error;

use crate::failure::{CliResult, Failure};
use crate::spec::SamplerSpec;

pub fn execute(sampler_arg: &str, mode: &str, draws: u64, seed: u64) -> CliResult {
    let text = if std::path::Path::new(sampler_arg).exists() {
        std::fs::read_to_string(sampler_arg)?
    } else {
        sampler_arg.to_string()
    };
    let spec: SamplerSpec = serde_json::from_str(&text).map_err(|e| {
        Failure::invalid(format!(
            "sampler descriptor {}:{}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    let sampler = spec.build()?;

    let weights = match mode {
        "exact" => exact_marginals(&sampler)?,
        "estimate" => {
            if draws == 0 {
                return Err(Failure::invalid("estimate mode needs --draws >= 1"));
            }
            let mut rng = derive_stream(seed, domain::MARGINAL_EST, 0);
            estimate_marginals(&sampler, draws, &mut rng)?
        }
        other => {
            return Err(Failure::invalid(format!(
                "unknown mode {other:?}; expected exact or estimate"
            )))
        }
    };
    let skew = participation_skew(&weights);
    let out = json!({
        "p": weights.p,
        "stderr": weights.stderr,
        "skew": skew,
    });
    println!("{out}");
    Ok(0)
}

fn exact_marginals(sampler: &ParticipationSampler) -> Result<MarginalWeights, Failure> {
    if let ParticipationSampler::FixedSizeWeighted { weights, .. } = sampler {
        if weights.iter().all(|&w| w == weights[0]) {
            return Ok(MarginalWeights::uniform(weights.len()));
        }
    }
    match enumerate_sampler_distribution(sampler) {
        Ok(dist) => Ok(compute_marginals_exact(&dist)?),
        Err(Error::Capacity(msg)) => Err(Failure::new(
            3,
            format!("{msg}; rerun with --mode estimate --draws <n>"),
        )),
        Err(e) => Err(e.into()),
    }
}
