//! Adaptive random-walk Metropolis reference sampler for tiny instances,
//! used to validate SVI output distributionally.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BprError, Result};
use crate::svi::Target;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    /// Per-coordinate proposal scale, or a single shared value.
    pub proposal_scale: ProposalScale,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ProposalScale {
    Scalar(f64),
    PerCoord(Vec<f64>),
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_chains: 2,
            n_warmup: 5_000,
            n_samples: 10_000,
            proposal_scale: ProposalScale::Scalar(0.1),
            seed: 0,
        }
    }
}

/// Unconstrained posterior draws, chain by chain.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    /// chain-major storage: chains x samples x d
    pub draws: Vec<f64>,
    pub n_chains: usize,
    pub n_samples: usize,
    pub d: usize,
    pub acceptance_rate: Vec<f64>,
}

impl PosteriorDraws {
    #[inline]
    pub fn sample(&self, chain: usize, s: usize) -> &[f64] {
        let start = (chain * self.n_samples + s) * self.d;
        &self.draws[start..start + self.d]
    }

    /// Iterate draws of one coordinate within one chain.
    pub fn coord(&self, chain: usize, coord: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_samples).map(move |s| self.sample(chain, s)[coord])
    }
}

/// Copy of `cfg` with the seed replaced; used to derive per-replicate runs.
pub fn mcmc_seeded_config(cfg: &McmcConfig, seed: u64) -> McmcConfig {
    McmcConfig {
        seed,
        ..cfg.clone()
    }
}

/// Adaptive random-walk Metropolis on an unconstrained target.
///
/// A global multiplier on the proposal scale is adapted during warmup via
/// Robbins-Monro toward acceptance rate 0.234 and frozen afterwards.
pub fn rwm_sample<T: Target>(target: &T, cfg: &McmcConfig) -> Result<PosteriorDraws> {
    rwm_sample_from(target, cfg, None)
}

/// Like [`rwm_sample`], but starts every chain near `init` (with per-chain
/// jitter at the proposal scale) instead of an overdispersed draw.
///
/// Useful on label-symmetric posteriors, where chains started at random end
/// up in different permutation modes and raw-coordinate diagnostics are
/// meaningless.
pub fn rwm_sample_from<T: Target>(
    target: &T,
    cfg: &McmcConfig,
    init: Option<&[f64]>,
) -> Result<PosteriorDraws> {
    let d = target.dim();
    if let Some(init) = init {
        if init.len() != d {
            return Err(BprError::InvalidInput(format!(
                "initial point length {} != dimension {d}",
                init.len()
            )));
        }
    }
    if cfg.n_chains < 1 || cfg.n_samples == 0 {
        return Err(BprError::InvalidInput(
            "need at least one chain and one sample".into(),
        ));
    }
    if d > 100 {
        eprintln!("warning: random-walk Metropolis on d = {d} > 100; expect poor mixing");
    }
    let base_scale: Vec<f64> = match &cfg.proposal_scale {
        ProposalScale::Scalar(s) => vec![*s; d],
        ProposalScale::PerCoord(v) => {
            if v.len() != d {
                return Err(BprError::InvalidInput(format!(
                    "proposal scale length {} != dimension {d}",
                    v.len()
                )));
            }
            v.clone()
        }
    };

    let mut draws = vec![0.0; cfg.n_chains * cfg.n_samples * d];
    let mut acceptance = Vec::with_capacity(cfg.n_chains);

    for chain in 0..cfg.n_chains {
        // each chain owns an RNG stream derived from (seed, chain index)
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(cfg.seed);
        rng.set_stream(chain as u64 + 1);

        // overdispersed start, or jittered copies of the caller's point
        let mut current: Vec<f64> = match init {
            Some(init) => (0..d)
                .map(|i| init[i] + base_scale[i] * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            None => (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0)
                .collect(),
        };
        let mut current_lp = target.log_density(&current);
        let mut tries = 0;
        while !current_lp.is_finite() {
            tries += 1;
            if tries > 100 {
                return Err(BprError::Numerical(
                    "could not find a finite-density starting point".into(),
                ));
            }
            for c in current.iter_mut() {
                *c = rng.sample::<f64, _>(StandardNormal) * 0.5;
            }
            current_lp = target.log_density(&current);
        }

        let mut log_mult = 0.0f64;
        let mut proposal = vec![0.0; d];
        let mut accepted_post = 0usize;

        for iter in 0..cfg.n_warmup + cfg.n_samples {
            let mult = log_mult.exp();
            for i in 0..d {
                proposal[i] =
                    current[i] + base_scale[i] * mult * rng.sample::<f64, _>(StandardNormal);
            }
            let prop_lp = target.log_density(&proposal);
            let log_ratio = prop_lp - current_lp;
            let accept_prob = if log_ratio >= 0.0 {
                1.0
            } else {
                log_ratio.exp()
            };
            let accept = prop_lp.is_finite() && rng.gen::<f64>() < accept_prob;
            if accept {
                current.copy_from_slice(&proposal);
                current_lp = prop_lp;
            }

            if iter < cfg.n_warmup {
                let gamma = (iter as f64 + 1.0).powf(-0.6);
                let ap = if prop_lp.is_finite() {
                    accept_prob
                } else {
                    0.0
                };
                log_mult += gamma * (ap - 0.234);
            } else {
                let s = iter - cfg.n_warmup;
                let start = (chain * cfg.n_samples + s) * d;
                draws[start..start + d].copy_from_slice(&current);
                if accept {
                    accepted_post += 1;
                }
            }
        }

        let rate = accepted_post as f64 / cfg.n_samples as f64;
        if rate < 0.01 {
            return Err(BprError::Numerical(format!(
                "chain {chain} acceptance rate {rate:.4} below 0.01 after warmup"
            )));
        }
        acceptance.push(rate);
    }

    Ok(PosteriorDraws {
        draws,
        n_chains: cfg.n_chains,
        n_samples: cfg.n_samples,
        d,
        acceptance_rate: acceptance,
    })
}

/// Split-Rhat per coordinate. Each chain is halved, then the usual
/// between/within variance ratio is computed over the 2C half-chains.
pub fn rhat(draws: &PosteriorDraws) -> Result<Vec<f64>> {
    if draws.n_chains < 2 {
        return Err(BprError::Domain(
            "split-Rhat needs at least 2 chains".into(),
        ));
    }
    let half = draws.n_samples / 2;
    if half < 2 {
        return Err(BprError::Domain("too few samples for split-Rhat".into()));
    }
    let m = draws.n_chains * 2;
    let mut out = Vec::with_capacity(draws.d);
    for coord in 0..draws.d {
        let mut means = Vec::with_capacity(m);
        let mut vars = Vec::with_capacity(m);
        for chain in 0..draws.n_chains {
            for part in 0..2 {
                let seq: Vec<f64> = (part * half..(part + 1) * half)
                    .map(|s| draws.sample(chain, s)[coord])
                    .collect();
                let mean = seq.iter().sum::<f64>() / half as f64;
                let var = seq.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (half as f64 - 1.0);
                means.push(mean);
                vars.push(var);
            }
        }
        let grand = means.iter().sum::<f64>() / m as f64;
        let b =
            half as f64 / (m as f64 - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
        let w = vars.iter().sum::<f64>() / m as f64;
        if w <= 0.0 {
            out.push(1.0);
            continue;
        }
        let var_plus = (half as f64 - 1.0) / half as f64 * w + b / half as f64;
        out.push((var_plus / w).sqrt());
    }
    Ok(out)
}
