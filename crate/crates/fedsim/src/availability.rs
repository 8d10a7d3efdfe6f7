//! Stochastic client participation.
//!
//! At every communication round a random subset of the `N` clients is
//! available. The process is described either explicitly, as a finite
//! distribution `q` over nonempty subsets, or generatively, as a sampler
//! (fixed-size weighted draws without replacement, or independent Bernoulli
//! availability conditioned on a nonempty outcome). The marginal survival
//! weight of client `i` is
//!
//! ```text
//! p_i = sum_j q(A_j) / |A_j| * [i in A_j]
//! ```
//!
//! the probability that `i` is the effectively selected client when a subset
//! is drawn first and a member then picked uniformly from it. The `p_i`
//! always form a probability distribution over clients; that normalization
//! and the agreement between exact enumeration and Monte-Carlo estimation
//! are the first things the verification suite checks.
//!
//! Client ids are 0-based in code and 1-based in every serialized or printed
//! form.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, domain, Stream};

/// Sum-to-one tolerance for exactly computed distributions.
pub const EXACT_TOL: f64 = 1e-12;
/// Sum-to-one tolerance for Monte-Carlo estimates.
pub const ESTIMATE_TOL: f64 = 1e-9;

/// Largest `N` for which Bernoulli samplers are enumerated exactly.
pub const BERNOULLI_ENUM_LIMIT: usize = 12;
/// Largest number of ordered draw sequences enumerated for fixed-size samplers.
pub const SEQUENCE_ENUM_LIMIT: u128 = 1_000_000;

/// Index of a client, strictly less than the federation size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub usize);

impl ClientId {
    /// 0-based index.
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ClientId {
    /// Prints the 1-based id used in all user-facing output.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0 + 1)
    }
}

/// One atom of a subset distribution: a nonempty client subset and its mass.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    /// Sorted, distinct member ids.
    pub subset: Vec<ClientId>,
    pub prob: f64,
}

/// An explicit finite distribution over nonempty client subsets.
///
/// Invariants, enforced at construction and deserialization:
/// - every probability is finite and nonnegative, and they sum to one
///   within [`EXACT_TOL`];
/// - no atom is empty (the empty set has probability zero by convention);
/// - subsets are distinct and every member id is `< n_clients`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetDistribution {
    n_clients: usize,
    atoms: Vec<Atom>,
}

impl SubsetDistribution {
    /// Build from `(members, prob)` pairs with 0-based member ids.
    pub fn new(n_clients: usize, atoms: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        if n_clients == 0 {
            return Err(Error::validation("n_clients must be at least 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(atoms.len());
        let mut total = 0.0_f64;
        for (members, prob) in atoms {
            if !prob.is_finite() || prob < 0.0 {
                return Err(Error::validation(format!(
                    "atom probability {prob} is not a finite nonnegative number"
                )));
            }
            let mut subset: Vec<usize> = members;
            subset.sort_unstable();
            subset.dedup();
            if subset.is_empty() {
                return Err(Error::validation(
                    "empty subsets are not allowed: q(empty) = 0 by convention",
                ));
            }
            if let Some(&max) = subset.last() {
                if max >= n_clients {
                    return Err(Error::validation(format!(
                        "client id {} out of range for n_clients = {n_clients}",
                        max + 1
                    )));
                }
            }
            if !seen.insert(subset.clone()) {
                return Err(Error::validation(format!(
                    "duplicate subset {:?} (ids shown 1-based)",
                    subset.iter().map(|i| i + 1).collect::<Vec<_>>()
                )));
            }
            total += prob;
            out.push(Atom {
                subset: subset.into_iter().map(ClientId).collect(),
                prob,
            });
        }
        if (total - 1.0).abs() > EXACT_TOL {
            return Err(Error::validation(format!(
                "atom probabilities sum to {total}, expected 1 within {EXACT_TOL:e}"
            )));
        }
        Ok(Self {
            n_clients,
            atoms: out,
        })
    }

    /// The degenerate distribution putting all mass on one subset.
    pub fn singleton_atom(n_clients: usize, members: Vec<usize>) -> Result<Self> {
        Self::new(n_clients, vec![(members, 1.0)])
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }
}

#[derive(Serialize, Deserialize)]
struct AtomWire {
    subset: Vec<usize>,
    prob: f64,
}

#[derive(Serialize, Deserialize)]
struct SubsetDistributionWire {
    n_clients: usize,
    atoms: Vec<AtomWire>,
}

impl Serialize for SubsetDistribution {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = SubsetDistributionWire {
            n_clients: self.n_clients,
            atoms: self
                .atoms
                .iter()
                .map(|a| AtomWire {
                    subset: a.subset.iter().map(|c| c.index() + 1).collect(),
                    prob: a.prob,
                })
                .collect(),
        };
        wire.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SubsetDistribution {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let wire = SubsetDistributionWire::deserialize(deserializer)?;
        let atoms = wire
            .atoms
            .into_iter()
            .map(|a| {
                let members = a
                    .subset
                    .into_iter()
                    .map(|id| {
                        if id == 0 {
                            Err(D::Error::custom("client ids are 1-based in JSON"))
                        } else {
                            Ok(id - 1)
                        }
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok((members, a.prob))
            })
            .collect::<std::result::Result<Vec<_>, D::Error>>()?;
        SubsetDistribution::new(wire.n_clients, atoms).map_err(D::Error::custom)
    }
}

/// Generative model of the round-wise available subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParticipationSampler {
    /// Draw an atom of an explicit distribution.
    Explicit { dist: SubsetDistribution },
    /// Draw exactly `size` distinct clients by successive weighted draws
    /// without replacement, each proportional to the remaining weights.
    FixedSizeWeighted { weights: Vec<f64>, size: usize },
    /// Include each client independently with its probability; an empty
    /// outcome is rejected and the whole round redrawn.
    BernoulliIndependent { probs: Vec<f64> },
}

impl ParticipationSampler {
    pub fn explicit(dist: SubsetDistribution) -> Self {
        Self::Explicit { dist }
    }

    pub fn fixed_size_weighted(weights: Vec<f64>, size: usize) -> Result<Self> {
        let s = Self::FixedSizeWeighted { weights, size };
        s.validate()?;
        Ok(s)
    }

    pub fn bernoulli(probs: Vec<f64>) -> Result<Self> {
        let s = Self::BernoulliIndependent { probs };
        s.validate()?;
        Ok(s)
    }

    pub fn n_clients(&self) -> usize {
        match self {
            Self::Explicit { dist } => dist.n_clients(),
            Self::FixedSizeWeighted { weights, .. } => weights.len(),
            Self::BernoulliIndependent { probs } => probs.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Explicit { .. } => Ok(()),
            Self::FixedSizeWeighted { weights, size } => {
                if weights.is_empty() {
                    return Err(Error::validation("weights must be nonempty"));
                }
                if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
                    return Err(Error::validation("all weights must be finite and > 0"));
                }
                if *size < 1 || *size > weights.len() {
                    return Err(Error::validation(format!(
                        "size {} must satisfy 1 <= size <= {}",
                        size,
                        weights.len()
                    )));
                }
                Ok(())
            }
            Self::BernoulliIndependent { probs } => {
                if probs.is_empty() {
                    return Err(Error::validation("probs must be nonempty"));
                }
                if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                    return Err(Error::validation("probs must lie in [0, 1]"));
                }
                if !probs.iter().any(|p| *p > 0.0) {
                    return Err(Error::validation(
                        "at least one prob must be > 0 so a nonempty draw is reachable",
                    ));
                }
                Ok(())
            }
        }
    }
}

/// The marginal survival weights `p` induced by a participation process.
///
/// `stderr` is present only on Monte-Carlo estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalWeights {
    pub p: Vec<f64>,
    pub stderr: Option<Vec<f64>>,
}

impl MarginalWeights {
    /// Exact weights: must sum to one within [`EXACT_TOL`].
    pub fn exact(p: Vec<f64>) -> Result<Self> {
        let w = Self { p, stderr: None };
        w.validate(EXACT_TOL)?;
        Ok(w)
    }

    /// Estimated weights with per-component standard errors.
    pub fn estimated(p: Vec<f64>, stderr: Vec<f64>) -> Result<Self> {
        if p.len() != stderr.len() {
            return Err(Error::dimension(format!(
                "p has {} entries but stderr has {}",
                p.len(),
                stderr.len()
            )));
        }
        let w = Self {
            p,
            stderr: Some(stderr),
        };
        w.validate(ESTIMATE_TOL)?;
        Ok(w)
    }

    /// The uniform distribution over `n` clients.
    pub fn uniform(n: usize) -> Self {
        Self {
            p: vec![1.0 / n as f64; n],
            stderr: None,
        }
    }

    pub fn n_clients(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self, sum_tol: f64) -> Result<()> {
        if self.p.is_empty() {
            return Err(Error::validation("p must be nonempty"));
        }
        if self.p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::validation("all p_i must be finite and >= 0"));
        }
        let total: f64 = self.p.iter().sum();
        if (total - 1.0).abs() > sum_tol {
            return Err(Error::validation(format!(
                "p sums to {total}, expected 1 within {sum_tol:e}"
            )));
        }
        Ok(())
    }
}

/// Exact marginal survival weights of an explicit subset distribution.
pub fn compute_marginals_exact(dist: &SubsetDistribution) -> Result<MarginalWeights> {
    let mut p = vec![0.0_f64; dist.n_clients()];
    for atom in dist.atoms() {
        let share = atom.prob / atom.subset.len() as f64;
        for &c in &atom.subset {
            p[c.index()] += share;
        }
    }
    MarginalWeights::exact(p)
}

/// Draw one round's available subset. Never returns the empty set.
pub fn sample_subset<R: Rng + ?Sized>(
    sampler: &ParticipationSampler,
    rng: &mut R,
) -> Vec<ClientId> {
    match sampler {
        ParticipationSampler::Explicit { dist } => {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = None;
            for atom in dist.atoms() {
                cum += atom.prob;
                if u < cum {
                    chosen = Some(atom);
                    break;
                }
            }
            let atom = chosen.unwrap_or_else(|| {
                // u landed past the cumulative sum by rounding: take the last
                // atom with positive mass.
                dist.atoms()
                    .iter()
                    .rev()
                    .find(|a| a.prob > 0.0)
                    .expect("a valid distribution has positive mass")
            });
            atom.subset.clone()
        }
        ParticipationSampler::FixedSizeWeighted { weights, size } => {
            let mut remaining: Vec<(usize, f64)> = weights.iter().copied().enumerate().collect();
            let mut total: f64 = weights.iter().sum();
            let mut picked = Vec::with_capacity(*size);
            for _ in 0..*size {
                let u: f64 = rng.gen::<f64>() * total;
                let mut cum = 0.0;
                let mut at = remaining.len() - 1;
                for (k, &(_, w)) in remaining.iter().enumerate() {
                    cum += w;
                    if u < cum {
                        at = k;
                        break;
                    }
                }
                let (idx, w) = remaining.remove(at);
                picked.push(ClientId(idx));
                total -= w;
            }
            picked.sort_unstable();
            picked
        }
        ParticipationSampler::BernoulliIndependent { probs } => loop {
            let subset: Vec<ClientId> = probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| rng.gen::<f64>() < p)
                .map(|(i, _)| ClientId(i))
                .collect();
            if !subset.is_empty() {
                return subset;
            }
        },
    }
}

/// Brute-force the exact subset distribution a sampler induces.
///
/// Fixed-size samplers are enumerated over every ordered draw sequence;
/// Bernoulli samplers over all nonempty outcomes, renormalized for the
/// rejected empty set. Capacity limits: [`SEQUENCE_ENUM_LIMIT`] ordered
/// sequences and [`BERNOULLI_ENUM_LIMIT`] clients respectively.
pub fn enumerate_sampler_distribution(
    sampler: &ParticipationSampler,
) -> Result<SubsetDistribution> {
    sampler.validate()?;
    match sampler {
        ParticipationSampler::Explicit { dist } => Ok(dist.clone()),
        ParticipationSampler::FixedSizeWeighted { weights, size } => {
            let n = weights.len();
            let mut sequences: u128 = 1;
            for k in 0..*size {
                sequences = sequences.saturating_mul((n - k) as u128);
                if sequences > SEQUENCE_ENUM_LIMIT {
                    return Err(Error::capacity(format!(
                        "fixed-size enumeration needs more than {SEQUENCE_ENUM_LIMIT} ordered sequences"
                    )));
                }
            }
            let total: f64 = weights.iter().sum();
            let mut acc: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
            let mut chosen: Vec<usize> = Vec::with_capacity(*size);
            let mut taken = vec![false; n];
            enumerate_sequences(
                weights,
                *size,
                total,
                1.0,
                &mut chosen,
                &mut taken,
                &mut acc,
            );
            SubsetDistribution::new(n, acc.into_iter().collect())
        }
        ParticipationSampler::BernoulliIndependent { probs } => {
            let n = probs.len();
            if n > BERNOULLI_ENUM_LIMIT {
                return Err(Error::capacity(format!(
                    "Bernoulli enumeration supports at most {BERNOULLI_ENUM_LIMIT} clients, got {n}"
                )));
            }
            let mut atoms: Vec<(Vec<usize>, f64)> = Vec::new();
            let mut kept_mass = 0.0_f64;
            for mask in 1_u64..(1 << n) {
                let mut prob = 1.0_f64;
                let mut members = Vec::new();
                for (i, &pi) in probs.iter().enumerate() {
                    if mask & (1 << i) != 0 {
                        prob *= pi;
                        members.push(i);
                    } else {
                        prob *= 1.0 - pi;
                    }
                }
                if prob > 0.0 {
                    kept_mass += prob;
                    atoms.push((members, prob));
                }
            }
            for (_, prob) in &mut atoms {
                *prob /= kept_mass;
            }
            SubsetDistribution::new(n, atoms)
        }
    }
}

fn enumerate_sequences(
    weights: &[f64],
    remaining_draws: usize,
    remaining_weight: f64,
    prob: f64,
    chosen: &mut Vec<usize>,
    taken: &mut [bool],
    acc: &mut BTreeMap<Vec<usize>, f64>,
) {
    if remaining_draws == 0 {
        let mut key = chosen.clone();
        key.sort_unstable();
        *acc.entry(key).or_insert(0.0) += prob;
        return;
    }
    for i in 0..weights.len() {
        if taken[i] {
            continue;
        }
        taken[i] = true;
        chosen.push(i);
        enumerate_sequences(
            weights,
            remaining_draws - 1,
            remaining_weight - weights[i],
            prob * weights[i] / remaining_weight,
            chosen,
            taken,
            acc,
        );
        chosen.pop();
        taken[i] = false;
    }
}

const ESTIMATE_CHUNK: u64 = 4096;

/// Monte-Carlo estimate of the marginal survival weights.
///
/// Each draw contributes `1/|S|` to every member of the drawn subset, so a
/// draw's total mass is exactly one. Work is split into fixed-size chunks,
/// each with its own stream seeded from `rng`, so the result is identical
/// whether the chunks run sequentially or in parallel.
pub fn estimate_marginals<R: Rng + ?Sized>(
    sampler: &ParticipationSampler,
    draws: u64,
    rng: &mut R,
) -> Result<MarginalWeights> {
    sampler.validate()?;
    if draws == 0 {
        return Err(Error::validation("draws must be at least 1"));
    }
    let n = sampler.n_clients();
    let n_chunks = draws.div_ceil(ESTIMATE_CHUNK);
    let chunks: Vec<(u64, u64)> = (0..n_chunks)
        .map(|c| {
            let len = ESTIMATE_CHUNK.min(draws - c * ESTIMATE_CHUNK);
            (rng.gen::<u64>(), len)
        })
        .collect();

    let partials: Vec<(Vec<f64>, Vec<f64>)> = par::map(&chunks, |&(seed, len)| {
        let mut stream: Stream = rng::derive_stream(seed, domain::CHUNK, 0);
        let mut sum = vec![0.0_f64; n];
        let mut sum_sq = vec![0.0_f64; n];
        for _ in 0..len {
            let subset = sample_subset(sampler, &mut stream);
            let share = 1.0 / subset.len() as f64;
            for &c in &subset {
                sum[c.index()] += share;
                sum_sq[c.index()] += share * share;
            }
        }
        (sum, sum_sq)
    });

    let mut sum = vec![0.0_f64; n];
    let mut sum_sq = vec![0.0_f64; n];
    for (s, s2) in partials {
        for i in 0..n {
            sum[i] += s[i];
            sum_sq[i] += s2[i];
        }
    }
    let d = draws as f64;
    let p: Vec<f64> = sum.iter().map(|s| s / d).collect();
    let stderr: Vec<f64> = if draws >= 2 {
        (0..n)
            .map(|i| {
                let var = ((sum_sq[i] - d * p[i] * p[i]) / (d - 1.0)).max(0.0);
                (var / d).sqrt()
            })
            .collect()
    } else {
        vec![0.0; n]
    };
    MarginalWeights::estimated(p, stderr)
}

/// Total-variation-style distance from uniform availability:
/// `sum_i |p_i - 1/N|`. Zero exactly when `p` is uniform; at most
/// `2 (1 - 1/N)`.
pub fn participation_skew(weights: &MarginalWeights) -> f64 {
    let n = weights.n_clients() as f64;
    weights.p.iter().map(|pi| (pi - 1.0 / n).abs()).sum()
}

/// A random valid subset distribution: up to `max_atoms` distinct nonempty
/// subsets of `n_clients <= 16` clients with normalized random masses.
/// Fuzzing helper for the verification suite and tests.
pub fn random_subset_distribution<R: Rng + ?Sized>(
    rng: &mut R,
    n_clients: usize,
    max_atoms: usize,
) -> SubsetDistribution {
    assert!((1..=16).contains(&n_clients), "supported range is 1..=16");
    let max_mask: u64 = (1 << n_clients) - 1;
    let k = rng.gen_range(1..=max_atoms.min(max_mask as usize));
    let mut masks = std::collections::BTreeSet::new();
    while masks.len() < k {
        masks.insert(rng.gen_range(1..=max_mask));
    }
    let raw: Vec<f64> = (0..masks.len()).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let atoms = masks
        .into_iter()
        .zip(raw)
        .map(|(mask, w)| {
            let members: Vec<usize> = (0..n_clients).filter(|i| mask & (1 << i) != 0).collect();
            (members, w / total)
        })
        .collect();
    SubsetDistribution::new(n_clients, atoms).expect("generated distribution is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dist(n: usize, atoms: &[(&[usize], f64)]) -> SubsetDistribution {
        SubsetDistribution::new(n, atoms.iter().map(|(s, p)| (s.to_vec(), *p)).collect()).unwrap()
    }

    #[test]
    fn marginals_match_hand_evaluation() {
        // q({1}) = 0.2, q({1,2}) = 0.4, q({1,2,3}) = 0.4 (1-based labels)
        let d = dist(3, &[(&[0], 0.2), (&[0, 1], 0.4), (&[0, 1, 2], 0.4)]);
        let m = compute_marginals_exact(&d).unwrap();
        assert_relative_eq!(m.p[0], 0.2 + 0.2 + 0.4 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(m.p[1], 0.2 + 0.4 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(m.p[2], 0.4 / 3.0, epsilon = 1e-15);
        assert!(m.stderr.is_none());
    }

    #[test]
    fn full_participation_is_uniform() {
        let d = dist(4, &[(&[0, 1, 2, 3], 1.0)]);
        let m = compute_marginals_exact(&d).unwrap();
        assert_eq!(m.p, vec![0.25; 4]);
    }

    #[test]
    fn single_always_available_client() {
        let d = dist(2, &[(&[0], 1.0)]);
        let m = compute_marginals_exact(&d).unwrap();
        assert_eq!(m.p, vec![1.0, 0.0]);
    }

    #[test]
    fn explicit_atom_frequencies_match_their_masses() {
        let d = dist(3, &[(&[0], 0.25), (&[1, 2], 0.75)]);
        let sampler = ParticipationSampler::explicit(d.clone());
        let exact = compute_marginals_exact(&d).unwrap();
        let mut rng = rng::derive_stream(9, domain::MARGINAL_EST, 0);
        let est = estimate_marginals(&sampler, 50_000, &mut rng).unwrap();
        let stderr = est.stderr.as_ref().unwrap();
        for (i, se) in stderr.iter().enumerate() {
            assert!(
                (est.p[i] - exact.p[i]).abs() <= 3.0 * se + 1e-12,
                "component {i}: est {} exact {}",
                est.p[i],
                exact.p[i]
            );
        }
    }

    #[test]
    fn rejects_empty_atom_and_bad_mass() {
        assert!(SubsetDistribution::new(2, vec![(vec![], 1.0)]).is_err());
        assert!(SubsetDistribution::new(2, vec![(vec![0], 0.5)]).is_err());
        assert!(SubsetDistribution::new(2, vec![(vec![0], 0.5), (vec![0], 0.5)]).is_err());
        assert!(SubsetDistribution::new(2, vec![(vec![2], 1.0)]).is_err());
    }

    #[test]
    fn explicit_single_atom_always_drawn() {
        let d = dist(6, &[(&[1, 4], 1.0)]);
        let sampler = ParticipationSampler::explicit(d);
        let mut rng = rng::derive_stream(0, domain::PARTICIPATION, 0);
        for _ in 0..50 {
            let s = sample_subset(&sampler, &mut rng);
            assert_eq!(s, vec![ClientId(1), ClientId(4)]);
        }
    }

    #[test]
    fn fixed_size_single_draw_frequency() {
        // N=2, M=1, weights (2,1): P({1}) = 2/3.
        let sampler = ParticipationSampler::fixed_size_weighted(vec![2.0, 1.0], 1).unwrap();
        let mut rng = rng::derive_stream(1, domain::PARTICIPATION, 0);
        let draws = 100_000;
        let mut hits = 0u64;
        for _ in 0..draws {
            if sample_subset(&sampler, &mut rng) == vec![ClientId(0)] {
                hits += 1;
            }
        }
        let freq = hits as f64 / draws as f64;
        let sigma = (2.0 / 3.0 * (1.0 / 3.0) / draws as f64).sqrt();
        assert!(
            (freq - 2.0 / 3.0).abs() <= 3.0 * sigma,
            "freq {freq} outside 3 sigma of 2/3"
        );
    }

    #[test]
    fn fixed_size_full_draw_is_everyone() {
        let sampler = ParticipationSampler::fixed_size_weighted(vec![5.0, 1.0, 0.25], 3).unwrap();
        let mut rng = rng::derive_stream(2, domain::PARTICIPATION, 0);
        for _ in 0..20 {
            let s = sample_subset(&sampler, &mut rng);
            assert_eq!(s, vec![ClientId(0), ClientId(1), ClientId(2)]);
        }
    }

    #[test]
    fn enumeration_single_draw() {
        let sampler = ParticipationSampler::fixed_size_weighted(vec![2.0, 1.0], 1).unwrap();
        let d = enumerate_sampler_distribution(&sampler).unwrap();
        let atoms = d.atoms();
        assert_eq!(atoms.len(), 2);
        assert_relative_eq!(atoms[0].prob, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(atoms[1].prob, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn enumeration_equal_weights_symmetry() {
        let sampler = ParticipationSampler::fixed_size_weighted(vec![1.0, 1.0, 1.0], 2).unwrap();
        let d = enumerate_sampler_distribution(&sampler).unwrap();
        assert_eq!(d.atoms().len(), 3);
        for atom in d.atoms() {
            assert_relative_eq!(atom.prob, 1.0 / 3.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn enumeration_bernoulli_conditioned_on_nonempty() {
        let sampler = ParticipationSampler::bernoulli(vec![0.5, 0.5]).unwrap();
        let d = enumerate_sampler_distribution(&sampler).unwrap();
        assert_eq!(d.atoms().len(), 3);
        for atom in d.atoms() {
            assert_relative_eq!(atom.prob, 1.0 / 3.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn enumeration_capacity_errors() {
        let sampler = ParticipationSampler::fixed_size_weighted(vec![1.0; 100], 10).unwrap();
        assert!(matches!(
            enumerate_sampler_distribution(&sampler),
            Err(Error::Capacity(_))
        ));
        let sampler = ParticipationSampler::bernoulli(vec![0.5; 13]).unwrap();
        assert!(matches!(
            enumerate_sampler_distribution(&sampler),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn estimate_deterministic_subset() {
        let d = dist(2, &[(&[0, 1], 1.0)]);
        let sampler = ParticipationSampler::explicit(d);
        let mut rng = rng::derive_stream(3, domain::MARGINAL_EST, 0);
        let m = estimate_marginals(&sampler, 1000, &mut rng).unwrap();
        assert_eq!(m.p, vec![0.5, 0.5]);
        assert_eq!(m.stderr.unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn estimate_single_draw_is_uniform_on_subset() {
        let sampler = ParticipationSampler::bernoulli(vec![0.7, 0.7, 0.7]).unwrap();
        let mut rng = rng::derive_stream(4, domain::MARGINAL_EST, 0);
        let m = estimate_marginals(&sampler, 1, &mut rng).unwrap();
        let support: Vec<usize> = (0..3).filter(|&i| m.p[i] > 0.0).collect();
        assert!(!support.is_empty());
        for &i in &support {
            assert_relative_eq!(m.p[i], 1.0 / support.len() as f64, epsilon = 1e-15);
        }
    }

    #[test]
    fn estimate_agrees_with_enumeration_oracle() {
        let weights: Vec<f64> = (0..6).map(|i| (-(i as f64) / 10.0).exp()).collect();
        let sampler = ParticipationSampler::fixed_size_weighted(weights, 2).unwrap();
        let exact =
            compute_marginals_exact(&enumerate_sampler_distribution(&sampler).unwrap()).unwrap();
        let mut rng = rng::derive_stream(5, domain::MARGINAL_EST, 0);
        let est = estimate_marginals(&sampler, 100_000, &mut rng).unwrap();
        let stderr = est.stderr.as_ref().unwrap();
        for (i, se) in stderr.iter().enumerate() {
            assert!(
                (est.p[i] - exact.p[i]).abs() <= 3.0 * se + 1e-12,
                "component {i}: est {} exact {} stderr {se}",
                est.p[i],
                exact.p[i],
            );
        }
    }

    #[test]
    fn estimate_is_reproducible_and_mode_independent() {
        let sampler = ParticipationSampler::bernoulli(vec![0.9, 0.4, 0.2]).unwrap();
        let run = || {
            let mut rng = rng::derive_stream(6, domain::MARGINAL_EST, 0);
            estimate_marginals(&sampler, 20_000, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        #[cfg(feature = "parallel")]
        {
            let _guard = par::TEST_OVERRIDE_LOCK.lock().unwrap();
            par::set_force_sequential(true);
            let c = run();
            par::set_force_sequential(false);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn skew_examples() {
        assert_eq!(participation_skew(&MarginalWeights::uniform(4)), 0.0);
        let m = MarginalWeights::exact(vec![0.75, 0.25]).unwrap();
        assert_relative_eq!(participation_skew(&m), 0.5, epsilon = 1e-15);
        let m = MarginalWeights::exact(vec![1.0, 0.0]).unwrap();
        assert_relative_eq!(participation_skew(&m), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn subset_distribution_json_round_trip_is_one_based() {
        let d = dist(3, &[(&[0, 2], 0.25), (&[1], 0.75)]);
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"subset\":[1,3]"), "json: {json}");
        assert!(json.contains("\"subset\":[2]"), "json: {json}");
        let back: SubsetDistribution = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn marginals_json_shape() {
        let m = MarginalWeights::exact(vec![0.5, 0.5]).unwrap();
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"p":[0.5,0.5],"stderr":null}"#
        );
    }

    #[test]
    fn dilution_shrinks_member_shares() {
        // One atom with q = 1: adding a member shrinks every incumbent's share.
        let before = compute_marginals_exact(&dist(4, &[(&[0, 1], 1.0)])).unwrap();
        let after = compute_marginals_exact(&dist(4, &[(&[0, 1, 2], 1.0)])).unwrap();
        for i in 0..2 {
            assert!(after.p[i] < before.p[i]);
        }
    }

    prop_compose! {
        fn arb_distribution()(n in 1_usize..=10)(
            n in Just(n),
            picks in proptest::collection::btree_set(1_u64..(1 << n), 1..=12),
            raw in proptest::collection::vec(0.01_f64..1.0, 12),
        ) -> SubsetDistribution {
            let masks: Vec<u64> = picks.into_iter().collect();
            let total: f64 = raw.iter().take(masks.len()).sum();
            let atoms = masks
                .iter()
                .zip(&raw)
                .map(|(&mask, &w)| {
                    let members: Vec<usize> =
                        (0..n).filter(|i| mask & (1 << i) != 0).collect();
                    (members, w / total)
                })
                .collect();
            SubsetDistribution::new(n, atoms).expect("generated distribution is valid")
        }
    }

    fn arb_sampler() -> impl Strategy<Value = ParticipationSampler> {
        prop_oneof![
            arb_distribution().prop_map(ParticipationSampler::explicit),
            (1_usize..=8).prop_flat_map(|n| {
                (proptest::collection::vec(0.05_f64..5.0, n), 1..=n)
                    .prop_map(|(w, m)| ParticipationSampler::fixed_size_weighted(w, m).unwrap())
            }),
            proptest::collection::vec(0.1_f64..=1.0, 1..=8)
                .prop_map(|p| ParticipationSampler::bernoulli(p).unwrap()),
        ]
    }

    proptest! {
        // Normalization: the marginals of any valid subset distribution form
        // a probability distribution.
        #[test]
        fn marginals_normalize(d in arb_distribution()) {
            let m = compute_marginals_exact(&d).unwrap();
            let total: f64 = m.p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn skew_is_bounded(d in arb_distribution()) {
            let m = compute_marginals_exact(&d).unwrap();
            let s = participation_skew(&m);
            let n = d.n_clients() as f64;
            prop_assert!(s >= 0.0);
            prop_assert!(s <= 2.0 * (1.0 - 1.0 / n) + 1e-12);
        }

        #[test]
        fn sampled_subsets_are_never_empty(
            sampler in arb_sampler(),
            seed in 0_u64..1000,
        ) {
            let mut rng = rng::derive_stream(seed, domain::PARTICIPATION, 0);
            for _ in 0..16 {
                let s = sample_subset(&sampler, &mut rng);
                prop_assert!(!s.is_empty());
                prop_assert!(s.iter().all(|c| c.index() < sampler.n_clients()));
                prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            }
        }

        // Enumerated sampler distributions are valid and their marginals
        // normalize, so the enumeration oracle meets the same contract.
        #[test]
        fn enumeration_yields_valid_distribution(sampler in arb_sampler()) {
            if let Ok(d) = enumerate_sampler_distribution(&sampler) {
                let m = compute_marginals_exact(&d).unwrap();
                let total: f64 = m.p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
