//! Posterior post-processing: draws, HDIs, relabeling, responsibilities,
//! odds ratios and per-cluster outcome probabilities.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CohortData;
use crate::error::{BprError, Result};
use crate::math::{logit, logsumexp, sigmoid};
use crate::mcmc::PosteriorDraws;
use crate::model::{log_mixture_lik_row, log_response_lik_row, stick_break, ModelConfig};
use crate::svi::VariationalState;
use crate::transforms::{to_constrained, ParamLayout, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Svi,
    /// MCMC draws carry their chain structure so relabeling can align
    /// labels per chain.
    Mcmc {
        n_chains: usize,
    },
}

/// Constrained-space posterior draws: `s` rows of (pi, alpha, phi, beta0, beta).
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub s: usize,
    pub k: usize,
    pub p: usize,
    pub a: usize,
    /// s x k mixture weights derived from the stick fractions per draw.
    pub pi: Vec<f64>,
    pub alpha: Vec<f64>,
    /// s x k x p
    pub phi: Vec<f64>,
    /// s x k
    pub beta0: Vec<f64>,
    /// s x a
    pub beta: Vec<f64>,
    pub provenance: Provenance,
}

impl PosteriorSamples {
    #[inline]
    pub fn pi_row(&self, s: usize) -> &[f64] {
        &self.pi[s * self.k..(s + 1) * self.k]
    }

    #[inline]
    pub fn phi_row(&self, s: usize, cluster: usize) -> &[f64] {
        let start = (s * self.k + cluster) * self.p;
        &self.phi[start..start + self.p]
    }

    #[inline]
    pub fn beta0_row(&self, s: usize) -> &[f64] {
        &self.beta0[s * self.k..(s + 1) * self.k]
    }

    #[inline]
    pub fn beta_row(&self, s: usize) -> &[f64] {
        &self.beta[s * self.a..(s + 1) * self.a]
    }

    fn from_raw_draws(
        raw_draws: impl Iterator<Item = Vec<f64>>,
        layout: ParamLayout,
        cfg: &ModelConfig,
        provenance: Provenance,
    ) -> Result<Self> {
        let k = layout.k_max;
        let p = layout.p;
        let a = layout.a;
        let mut out = Self {
            s: 0,
            k,
            p,
            a,
            pi: Vec::new(),
            alpha: Vec::new(),
            phi: Vec::new(),
            beta0: Vec::new(),
            beta: Vec::new(),
            provenance,
        };
        for raw in raw_draws {
            let pv = ParamVector { raw, layout };
            let c = to_constrained(&pv, cfg);
            out.pi.extend(stick_break(&c.v)?);
            out.alpha.push(c.alpha);
            out.phi.extend_from_slice(&c.phi);
            out.beta0.extend_from_slice(&c.beta0);
            out.beta.extend_from_slice(&c.beta);
            out.s += 1;
        }
        Ok(out)
    }

    /// Posterior-mean mixture weight per cluster.
    pub fn mean_pi(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for s in 0..self.s {
            for (o, &w) in out.iter_mut().zip(self.pi_row(s)) {
                *o += w;
            }
        }
        for o in out.iter_mut() {
            *o /= self.s as f64;
        }
        out
    }
}

/// Sample `n_draws` points from the variational Gaussian and map them to
/// constrained space.
pub fn draw_posterior(
    state: &VariationalState,
    layout: ParamLayout,
    cfg: &ModelConfig,
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PosteriorSamples> {
    if n_draws == 0 {
        return Err(BprError::InvalidInput("n_draws must be >= 1".into()));
    }
    let d = state.dim();
    if d != layout.dim() {
        return Err(BprError::InvalidInput(format!(
            "state dimension {d} does not match layout dimension {}",
            layout.dim()
        )));
    }
    let mut raws = Vec::with_capacity(n_draws);
    let mut eps = vec![0.0; d];
    for _ in 0..n_draws {
        let mut theta = vec![0.0; d];
        state.draw(rng, &mut eps, &mut theta);
        raws.push(theta);
    }
    PosteriorSamples::from_raw_draws(raws.into_iter(), layout, cfg, Provenance::Svi)
}

/// Convert MCMC draws (all chains concatenated, chain-major) to
/// constrained-space samples.
pub fn mcmc_posterior(
    draws: &PosteriorDraws,
    layout: ParamLayout,
    cfg: &ModelConfig,
) -> Result<PosteriorSamples> {
    let iter = (0..draws.n_chains)
        .flat_map(|chain| (0..draws.n_samples).map(move |s| draws.sample(chain, s).to_vec()));
    PosteriorSamples::from_raw_draws(
        iter,
        layout,
        cfg,
        Provenance::Mcmc {
            n_chains: draws.n_chains,
        },
    )
}

/// Shortest interval containing ceil(mass * n) of the samples, located by a
/// sliding window over the order statistics. Assumes a unimodal sample.
/// Ties are broken toward the lowest lower bound.
pub fn hdi(samples: &[f64], mass: f64) -> Result<(f64, f64)> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(BprError::Domain("mass must be in (0, 1)".into()));
    }
    let n = samples.len();
    let window = (mass * n as f64).ceil() as usize;
    if n < 100 || window > n {
        return Err(BprError::Domain(format!(
            "need at least 100 samples (and window <= n), got n = {n}"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample in hdi"));
    let mut best = (sorted[0], sorted[window - 1]);
    let mut best_width = best.1 - best.0;
    for start in 1..=n - window {
        let width = sorted[start + window - 1] - sorted[start];
        if width < best_width {
            best_width = width;
            best = (sorted[start], sorted[start + window - 1]);
        }
    }
    Ok(best)
}

/// Canonical relabeling: one permutation per chain (a single one for SVI),
/// ordering clusters by descending posterior-mean membership probability,
/// ties broken by original index. Applied jointly to pi, phi and beta0.
pub fn relabel(samples: &PosteriorSamples) -> PosteriorSamples {
    let mut out = samples.clone();
    let chains = match samples.provenance {
        Provenance::Svi => 1,
        Provenance::Mcmc { n_chains } => n_chains,
    };
    let per_chain = samples.s / chains.max(1);
    for chain in 0..chains {
        let range = chain * per_chain..(chain + 1) * per_chain;
        // chain-local mean pi
        let mut mean = vec![0.0; samples.k];
        for s in range.clone() {
            for (m, &w) in mean.iter_mut().zip(samples.pi_row(s)) {
                *m += w;
            }
        }
        let mut order: Vec<usize> = (0..samples.k).collect();
        order.sort_by(|&i, &j| {
            mean[j]
                .partial_cmp(&mean[i])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        for s in range {
            for (new_k, &old_k) in order.iter().enumerate() {
                out.pi[s * samples.k + new_k] = samples.pi[s * samples.k + old_k];
                out.beta0[s * samples.k + new_k] = samples.beta0[s * samples.k + old_k];
                let src = (s * samples.k + old_k) * samples.p;
                let dst = (s * samples.k + new_k) * samples.p;
                out.phi[dst..dst + samples.p].copy_from_slice(&samples.phi[src..src + samples.p]);
            }
        }
    }
    out
}

/// Per-observation cluster membership probabilities with hard labels.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    /// n x k, rows on the simplex.
    pub r: Vec<f64>,
    pub n: usize,
    pub k: usize,
    /// argmax cluster per row, zero-based.
    pub labels: Vec<usize>,
}

impl Responsibilities {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.r[i * self.k..(i + 1) * self.k]
    }
}

/// Posterior-predictive responsibilities: the Monte Carlo expectation over
/// draws of pi_k * p_M(x_i | phi_k) * p_R(y_i | beta0_k, beta), normalised
/// per row in log space.
pub fn responsibilities(samples: &PosteriorSamples, data: &CohortData) -> Result<Responsibilities> {
    if data.p() != samples.p || data.a() != samples.a {
        return Err(BprError::InvalidInput(
            "cohort shape does not match posterior samples".into(),
        ));
    }
    let n = data.n();
    let k = samples.k;
    let mut r = vec![0.0; n * k];
    let mut labels = vec![0usize; n];
    let mut per_draw = vec![0.0; samples.s];
    let mut log_r = vec![0.0; k];
    for i in 0..n {
        let x = data.x_row(i);
        let w = data.w_row(i);
        let y = data.y(i);
        for c in 0..k {
            for (t, s) in per_draw.iter_mut().zip(0..samples.s) {
                *t = samples.pi_row(s)[c].ln()
                    + log_mixture_lik_row(x, samples.phi_row(s, c))
                    + log_response_lik_row(y, w, samples.beta0_row(s)[c], samples.beta_row(s));
            }
            log_r[c] = logsumexp(&per_draw) - (samples.s as f64).ln();
        }
        let norm = logsumexp(&log_r);
        let row = &mut r[i * k..(i + 1) * k];
        let mut best = 0;
        for c in 0..k {
            row[c] = (log_r[c] - norm).exp();
            if row[c] > row[best] {
                best = c;
            }
        }
        labels[i] = best;
    }
    Ok(Responsibilities { r, n, k, labels })
}

/// Per-cluster outcome probability logistic(beta0_k + beta . w_ref),
/// summarised by posterior mean and 95% HDI.
pub fn cluster_outcome_probability(
    samples: &PosteriorSamples,
    w_ref: &[f64],
) -> Result<Vec<(f64, (f64, f64))>> {
    if w_ref.len() != samples.a {
        return Err(BprError::InvalidInput(format!(
            "reference profile has {} entries, model has {}",
            w_ref.len(),
            samples.a
        )));
    }
    let mut out = Vec::with_capacity(samples.k);
    let mut draws = vec![0.0; samples.s];
    for c in 0..samples.k {
        for (slot, s) in draws.iter_mut().zip(0..samples.s) {
            let eta = samples.beta0_row(s)[c] + crate::model::dot(samples.beta_row(s), w_ref);
            *slot = sigmoid(eta);
        }
        let point = draws.iter().sum::<f64>() / samples.s as f64;
        out.push((point, hdi(&draws, 0.95)?));
    }
    Ok(out)
}

/// Odds ratio exp(beta_a) per global coefficient: posterior mean of the
/// exponentiated draws with a 95% HDI.
pub fn odds_ratios(samples: &PosteriorSamples) -> Result<Vec<(f64, (f64, f64))>> {
    let mut out = Vec::with_capacity(samples.a);
    let mut draws = vec![0.0; samples.s];
    for coef in 0..samples.a {
        for (slot, s) in draws.iter_mut().zip(0..samples.s) {
            *slot = samples.beta_row(s)[coef].exp();
        }
        let point = draws.iter().sum::<f64>() / samples.s as f64;
        out.push((point, hdi(&draws, 0.95)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterRow {
    /// Canonical (relabeled) cluster index, zero-based.
    pub cluster: usize,
    pub membership: IntervalEstimate,
    /// One entry per mixture covariate.
    pub phi: Vec<IntervalEstimate>,
    pub intercept: IntervalEstimate,
    /// One entry per reference covariate profile.
    pub outcome_probability: Vec<IntervalEstimate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: IntervalEstimate,
    pub odds_ratio: IntervalEstimate,
}

/// Point estimates and HDIs in canonical cluster order, plus global
/// coefficient summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub clusters: Vec<ClusterRow>,
    pub coefficients: Vec<CoefficientRow>,
    pub alpha: IntervalEstimate,
    /// Cohort size used to define cluster non-emptiness.
    pub n: usize,
    pub mixture_names: Vec<String>,
    pub reference_profiles: Vec<Vec<f64>>,
}

fn summarize(draws: &[f64]) -> Result<IntervalEstimate> {
    let point = draws.iter().sum::<f64>() / draws.len() as f64;
    let (lo, hi) = hdi(draws, 0.95)?;
    Ok(IntervalEstimate { point, lo, hi })
}

/// Build the reporting summary from (already relabeled) posterior samples.
pub fn cluster_summary(
    samples: &PosteriorSamples,
    n: usize,
    mixture_names: &[String],
    coefficient_names: &[String],
    reference_profiles: &[Vec<f64>],
) -> Result<ClusterSummary> {
    let s = samples.s;
    let mut clusters = Vec::with_capacity(samples.k);
    let mut scratch = vec![0.0; s];
    for c in 0..samples.k {
        for (slot, d) in scratch.iter_mut().zip(0..s) {
            *slot = samples.pi_row(d)[c];
        }
        let membership = summarize(&scratch)?;
        let mut phi = Vec::with_capacity(samples.p);
        for j in 0..samples.p {
            for (slot, d) in scratch.iter_mut().zip(0..s) {
                *slot = samples.phi_row(d, c)[j];
            }
            phi.push(summarize(&scratch)?);
        }
        for (slot, d) in scratch.iter_mut().zip(0..s) {
            *slot = samples.beta0_row(d)[c];
        }
        let intercept = summarize(&scratch)?;
        let mut outcome_probability = Vec::with_capacity(reference_profiles.len());
        for w_ref in reference_profiles {
            for (slot, d) in scratch.iter_mut().zip(0..s) {
                let eta = samples.beta0_row(d)[c] + crate::model::dot(samples.beta_row(d), w_ref);
                *slot = sigmoid(eta);
            }
            outcome_probability.push(summarize(&scratch)?);
        }
        clusters.push(ClusterRow {
            cluster: c,
            membership,
            phi,
            intercept,
            outcome_probability,
        });
    }

    let mut coefficients = Vec::with_capacity(samples.a);
    for coef in 0..samples.a {
        for (slot, d) in scratch.iter_mut().zip(0..s) {
            *slot = samples.beta_row(d)[coef];
        }
        let estimate = summarize(&scratch)?;
        for (slot, d) in scratch.iter_mut().zip(0..s) {
            *slot = samples.beta_row(d)[coef].exp();
        }
        let odds_ratio = summarize(&scratch)?;
        coefficients.push(CoefficientRow {
            name: coefficient_names
                .get(coef)
                .cloned()
                .unwrap_or_else(|| format!("beta{coef}")),
            estimate,
            odds_ratio,
        });
    }

    let alpha = summarize(&samples.alpha)?;
    Ok(ClusterSummary {
        clusters,
        coefficients,
        alpha,
        n,
        mixture_names: mixture_names.to_vec(),
        reference_profiles: reference_profiles.to_vec(),
    })
}

/// Count clusters whose expected membership count exceeds `threshold`
/// individuals (default 1.0).
pub fn nonempty_clusters(summary: &ClusterSummary, threshold: f64) -> usize {
    summary
        .clusters
        .iter()
        .filter(|c| c.membership.point * summary.n as f64 >= threshold)
        .count()
}

/// Heatmap rows: per cluster, log-odds of each disease probability followed
/// by the log-odds of the outcome probability at each reference profile.
/// With `linear` set, probabilities are emitted unchanged.
pub fn heatmap_matrix(summary: &ClusterSummary, linear: bool, threshold: f64) -> Vec<Vec<f64>> {
    let map = |p: f64| if linear { p } else { logit(p) };
    summary
        .clusters
        .iter()
        .filter(|c| c.membership.point * summary.n as f64 >= threshold)
        .map(|c| {
            c.phi
                .iter()
                .map(|e| map(e.point))
                .chain(c.outcome_probability.iter().map(|e| map(e.point)))
                .collect()
        })
        .collect()
}
