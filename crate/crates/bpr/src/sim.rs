//! Synthetic cohort generation and the M-replicate bias/coverage study,
//! including the batch-size sweep.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CohortData;
use crate::error::{BprError, Result};
use crate::math::logit;
use crate::mcmc::{mcmc_seeded_config, rwm_sample, McmcConfig};
use crate::model::ModelConfig;
use crate::posterior::{hdi, mcmc_posterior, relabel, PosteriorSamples};
use crate::svi::{fit, SviConfig, Termination};
use crate::transforms::ParamLayout;

/// Design of one simulated cohort family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSpec {
    /// Cohort size per replicate.
    pub n: usize,
    /// Replicate count.
    pub m: usize,
    /// Binary mixture covariate count.
    pub d_m: usize,
    /// Response covariate count (first column continuous).
    pub d_r: usize,
    /// True cluster count.
    pub k_true: usize,
    /// Positive weights, normalised to a simplex before use.
    pub cluster_weights: Vec<f64>,
    /// k_true x d_m row-major Bernoulli probabilities.
    pub phi_true: Vec<f64>,
    pub beta_true: Vec<f64>,
    pub intercepts_true: Vec<f64>,
    pub age_mean: f64,
    /// Variance of the continuous covariate.
    pub age_var: f64,
    pub seed: u64,
}

impl SimulationSpec {
    /// Desk defaults: 12 mixture covariates, 6 response covariates, 5
    /// clusters with two high-probability diseases each, adjacent clusters
    /// sharing one of them.
    pub fn with_defaults(n: usize, m: usize, k_true: usize, seed: u64) -> Self {
        let d_m = 12;
        let d_r = 6;
        Self {
            n,
            m,
            d_m,
            d_r,
            k_true,
            cluster_weights: default_weights(k_true),
            phi_true: default_phi(k_true, d_m, 0.8, 0.02),
            beta_true: default_beta(d_r),
            intercepts_true: linspace(-5.0, -1.0, k_true),
            age_mean: 45.0,
            age_var: 100.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_true < 1 || self.n < 1 {
            return Err(BprError::InvalidInput("k_true and n must be >= 1".into()));
        }
        if self.d_r < 1 {
            return Err(BprError::InvalidInput("d_r must be >= 1".into()));
        }
        if self.cluster_weights.len() != self.k_true
            || self.phi_true.len() != self.k_true * self.d_m
            || self.beta_true.len() != self.d_r
            || self.intercepts_true.len() != self.k_true
        {
            return Err(BprError::InvalidInput(
                "simulation spec dimensions are inconsistent".into(),
            ));
        }
        if self.cluster_weights.iter().any(|&w| w <= 0.0) {
            return Err(BprError::InvalidInput(
                "cluster weights must be positive".into(),
            ));
        }
        if self.phi_true.iter().any(|&p| !(p > 0.01 && p < 0.99)) {
            return Err(BprError::InvalidInput(
                "phi_true entries must lie in (0.01, 0.99)".into(),
            ));
        }
        if self.age_var <= 0.0 {
            return Err(BprError::InvalidInput(
                "age variance must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.cluster_weights.iter().sum();
        self.cluster_weights.iter().map(|w| w / total).collect()
    }

    pub fn response_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.d_r);
        for j in 0..self.d_r {
            names.push(match j {
                0 => "age".into(),
                1 => "sex".into(),
                _ => format!("dep{}", j),
            });
        }
        names
    }
}

/// Paper-style decreasing weights for five clusters, cycled for other counts.
pub fn default_weights(k_true: usize) -> Vec<f64> {
    const BASE: [f64; 5] = [0.833, 0.166, 0.25, 0.2083, 0.2916];
    (0..k_true).map(|k| BASE[k % BASE.len()]).collect()
}

/// Two high-probability diseases per cluster arranged as a chain over the
/// first k_true + 1 columns: cluster k is high at columns k and k + 1, so
/// adjacent clusters share one high column. Everything else sits low.
pub fn default_phi(k_true: usize, d_m: usize, high: f64, low: f64) -> Vec<f64> {
    assert!(d_m > k_true);
    let mut phi = vec![low; k_true * d_m];
    for k in 0..k_true {
        phi[k * d_m + k] = high;
        phi[k * d_m + k + 1] = high;
    }
    phi
}

pub fn default_beta(d_r: usize) -> Vec<f64> {
    let template = [0.1, 0.5, -0.2, 0.2, -0.4, 0.4];
    (0..d_r).map(|j| template[j % template.len()]).collect()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n as f64 - 1.0))
        .collect()
}

/// True parameters and labels behind one generated cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Post-shuffle cluster label per row, zero-based.
    pub z: Vec<usize>,
    pub weights: Vec<f64>,
    pub phi: Vec<f64>,
    pub beta: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub d_m: usize,
    pub k_true: usize,
}

impl GroundTruth {
    pub fn phi_row(&self, k: usize) -> &[f64] {
        &self.phi[k * self.d_m..(k + 1) * self.d_m]
    }
}

/// Deterministically generate one replicate cohort: labels from the
/// normalised weights, diseases from per-cluster Bernoullis, a centered
/// continuous covariate plus binary dummies, and the logistic outcome.
/// Rows are shuffled before return.
pub fn generate_cohort(
    spec: &SimulationSpec,
    replicate_index: u64,
) -> Result<(CohortData, GroundTruth)> {
    spec.validate()?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(spec.seed);
    rng.set_stream(replicate_index);

    let n = spec.n;
    let weights = spec.normalized_weights();
    let mut cum = weights.clone();
    for i in 1..cum.len() {
        cum[i] += cum[i - 1];
    }

    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let k = cum.iter().position(|&c| u <= c).unwrap_or(spec.k_true - 1);
        z.push(k);
    }

    let mut x = vec![0u8; n * spec.d_m];
    for i in 0..n {
        let row = &spec.phi_true[z[i] * spec.d_m..(z[i] + 1) * spec.d_m];
        for j in 0..spec.d_m {
            x[i * spec.d_m + j] = u8::from(rng.gen::<f64>() < row[j]);
        }
    }

    // response covariates: continuous age, a balanced binary, and one-hot
    // dummies of a uniform categorical for the remaining columns
    let sd = spec.age_var.sqrt();
    let mut w = vec![0.0; n * spec.d_r];
    for i in 0..n {
        w[i * spec.d_r] = spec.age_mean + sd * rng.sample::<f64, _>(StandardNormal);
        if spec.d_r > 1 {
            w[i * spec.d_r + 1] = f64::from(rng.gen::<f64>() < 0.5);
        }
        let n_dummies = spec.d_r.saturating_sub(2);
        if n_dummies > 0 {
            let level = rng.gen_range(0..n_dummies + 1);
            if level > 0 {
                w[i * spec.d_r + 1 + level] = 1.0;
            }
        }
    }
    // center continuous columns before the outcome so the intercepts keep
    // their configured meaning
    let mean_age: f64 = (0..n).map(|i| w[i * spec.d_r]).sum::<f64>() / n as f64;
    for i in 0..n {
        w[i * spec.d_r] -= mean_age;
    }

    let mut y = vec![0u8; n];
    for i in 0..n {
        let row = &w[i * spec.d_r..(i + 1) * spec.d_r];
        let eta = spec.intercepts_true[z[i]]
            + spec
                .beta_true
                .iter()
                .zip(row)
                .map(|(b, v)| b * v)
                .sum::<f64>();
        y[i] = u8::from(rng.gen::<f64>() < crate::math::sigmoid(eta));
    }

    // Fisher-Yates shuffle of the rows, labels included
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut xs = vec![0u8; n * spec.d_m];
    let mut ws = vec![0.0; n * spec.d_r];
    let mut ys = vec![0u8; n];
    let mut zs = vec![0usize; n];
    for (dst, &src) in order.iter().enumerate() {
        xs[dst * spec.d_m..(dst + 1) * spec.d_m]
            .copy_from_slice(&x[src * spec.d_m..(src + 1) * spec.d_m]);
        ws[dst * spec.d_r..(dst + 1) * spec.d_r]
            .copy_from_slice(&w[src * spec.d_r..(src + 1) * spec.d_r]);
        ys[dst] = y[src];
        zs[dst] = z[src];
    }

    let mixture_names = (0..spec.d_m).map(|j| format!("disease{j}")).collect();
    let data = CohortData::new(
        xs,
        ws,
        ys,
        n,
        spec.d_m,
        spec.d_r,
        mixture_names,
        spec.response_names(),
        "outcome".into(),
    )?;
    let truth = GroundTruth {
        z: zs,
        weights,
        phi: spec.phi_true.clone(),
        beta: spec.beta_true.clone(),
        intercepts: spec.intercepts_true.clone(),
        d_m: spec.d_m,
        k_true: spec.k_true,
    };
    Ok((data, truth))
}

/// Mean of (estimate - truth) over replicates.
pub fn bias(estimates: &[f64], truth: f64) -> f64 {
    estimates.iter().map(|e| e - truth).sum::<f64>() / estimates.len() as f64
}

/// Fraction of closed intervals containing the truth.
pub fn coverage(intervals: &[(f64, f64)], truth: f64) -> f64 {
    let hits = intervals
        .iter()
        .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
        .count();
    hits as f64 / intervals.len() as f64
}

/// How each replicate is fitted.
#[derive(Debug, Clone)]
pub enum Fitter {
    Svi {
        model: ModelConfig,
        svi: SviConfig,
        posterior_draws: usize,
    },
    Mcmc {
        model: ModelConfig,
        mcmc: McmcConfig,
    },
    /// Point mass injected at the truth; harness self-test only.
    Truth,
}

/// One estimated parameter from one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub ok: bool,
    pub message: Option<String>,
    /// Aligned with `StudyResult::parameters`; empty when the fit failed.
    pub estimates: Vec<ParamEstimate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    /// Mean bias; log-odds scale for phi parameters.
    pub mean_bias: f64,
    pub coverage: f64,
    pub replicates_used: usize,
}

/// Bias and coverage aggregated over replicates, with the per-replicate
/// records kept for auditing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub parameters: Vec<ParamSummary>,
    pub replicates: Vec<ReplicateRecord>,
    pub m: usize,
    pub failures: usize,
}

impl StudyResult {
    pub fn parameter(&self, name: &str) -> Option<&ParamSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn beta_parameters(&self) -> impl Iterator<Item = &ParamSummary> {
        self.parameters
            .iter()
            .filter(|p| p.name.starts_with("beta"))
    }

    pub fn phi_parameters(&self) -> impl Iterator<Item = &ParamSummary> {
        self.parameters.iter().filter(|p| p.name.starts_with("phi"))
    }
}

/// Tracked parameter names: global coefficients first, then all phi cells.
fn parameter_names(spec: &SimulationSpec) -> Vec<String> {
    let mut names: Vec<String> = spec
        .response_names()
        .iter()
        .map(|n| format!("beta[{n}]"))
        .collect();
    for k in 0..spec.k_true {
        for j in 0..spec.d_m {
            names.push(format!("phi[{k}][{j}]"));
        }
    }
    names
}

fn parameter_truths(spec: &SimulationSpec) -> Vec<f64> {
    let mut truths = spec.beta_true.clone();
    truths.extend_from_slice(&spec.phi_true);
    truths
}

/// Find the injection of true clusters into fitted clusters minimising the
/// total |logit phi_fit - logit phi_true| distance, by exhaustive search.
pub fn match_clusters(
    phi_fit: &[f64],
    k_fit: usize,
    phi_true: &[f64],
    k_true: usize,
    p: usize,
) -> Vec<usize> {
    assert!(k_fit >= k_true);
    let dist = |fit_k: usize, true_k: usize| -> f64 {
        (0..p)
            .map(|j| {
                (logit(phi_fit[fit_k * p + j].clamp(1e-9, 1.0 - 1e-9))
                    - logit(phi_true[true_k * p + j]))
                .abs()
            })
            .sum()
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut assignment = Vec::with_capacity(k_true);
    let mut used = vec![false; k_fit];
    fn search(
        true_k: usize,
        k_true: usize,
        k_fit: usize,
        cost: f64,
        assignment: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut Option<(f64, Vec<usize>)>,
        dist: &dyn Fn(usize, usize) -> f64,
    ) {
        if let Some((b, _)) = best {
            if cost >= *b {
                return;
            }
        }
        if true_k == k_true {
            *best = Some((cost, assignment.clone()));
            return;
        }
        for f in 0..k_fit {
            if used[f] {
                continue;
            }
            used[f] = true;
            assignment.push(f);
            search(
                true_k + 1,
                k_true,
                k_fit,
                cost + dist(f, true_k),
                assignment,
                used,
                best,
                dist,
            );
            assignment.pop();
            used[f] = false;
        }
    }
    search(
        0,
        k_true,
        k_fit,
        0.0,
        &mut assignment,
        &mut used,
        &mut best,
        &dist,
    );
    best.expect("cluster matching found no assignment").1
}

fn replicate_seed(base: u64, replicate: u64) -> u64 {
    base.wrapping_add(replicate.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn estimates_from_samples(
    samples: &PosteriorSamples,
    spec: &SimulationSpec,
) -> Result<Vec<ParamEstimate>> {
    let s = samples.s;
    let mut out = Vec::with_capacity(spec.d_r + spec.k_true * spec.d_m);
    let mut scratch = vec![0.0; s];
    for coef in 0..spec.d_r {
        for (slot, d) in scratch.iter_mut().zip(0..s) {
            *slot = samples.beta_row(d)[coef];
        }
        let est = scratch.iter().sum::<f64>() / s as f64;
        let (lo, hi) = hdi(&scratch, 0.95)?;
        out.push(ParamEstimate {
            estimate: est,
            lo,
            hi,
        });
    }

    // posterior-mean phi per fitted cluster drives the matching
    let mut phi_mean = vec![0.0; samples.k * samples.p];
    for d in 0..s {
        for c in 0..samples.k {
            let row = samples.phi_row(d, c);
            for j in 0..samples.p {
                phi_mean[c * samples.p + j] += row[j];
            }
        }
    }
    for v in phi_mean.iter_mut() {
        *v /= s as f64;
    }
    let matching = match_clusters(&phi_mean, samples.k, &spec.phi_true, spec.k_true, spec.d_m);
    for k in 0..spec.k_true {
        let fitted = matching[k];
        for j in 0..spec.d_m {
            for (slot, d) in scratch.iter_mut().zip(0..s) {
                *slot = samples.phi_row(d, fitted)[j];
            }
            let est = scratch.iter().sum::<f64>() / s as f64;
            let (lo, hi) = hdi(&scratch, 0.95)?;
            out.push(ParamEstimate {
                estimate: est,
                lo,
                hi,
            });
        }
    }
    Ok(out)
}

fn run_replicate(spec: &SimulationSpec, fitter: &Fitter, rep: u64) -> Result<Vec<ParamEstimate>> {
    let (data, truth) = generate_cohort(spec, rep)?;
    match fitter {
        Fitter::Truth => {
            let mut out = Vec::new();
            for &b in &truth.beta {
                out.push(ParamEstimate {
                    estimate: b,
                    lo: b,
                    hi: b,
                });
            }
            for &p in &truth.phi {
                out.push(ParamEstimate {
                    estimate: p,
                    lo: p,
                    hi: p,
                });
            }
            Ok(out)
        }
        Fitter::Svi {
            model,
            svi,
            posterior_draws,
        } => {
            let mut cfg = svi.clone();
            cfg.seed = replicate_seed(svi.seed, rep);
            let (state, trace) = fit(&data, model, &cfg)?;
            if trace.terminated_reason == Termination::Aborted {
                return Err(BprError::Numerical(
                    trace.abort_message.unwrap_or_else(|| "fit aborted".into()),
                ));
            }
            let layout = ParamLayout::new(model.k_max, data.p(), data.a());
            let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(replicate_seed(cfg.seed, 1));
            let samples = crate::posterior::draw_posterior(
                &state,
                layout,
                model,
                *posterior_draws,
                &mut rng,
            )?;
            estimates_from_samples(&relabel(&samples), spec)
        }
        Fitter::Mcmc { model, mcmc } => {
            let cfg = mcmc_seeded_config(mcmc, replicate_seed(mcmc.seed, rep));
            let target = crate::svi::BprTarget::full(&data, model);
            let draws = rwm_sample(&target, &cfg)?;
            let layout = ParamLayout::new(model.k_max, data.p(), data.a());
            let samples = mcmc_posterior(&draws, layout, model)?;
            estimates_from_samples(&relabel(&samples), spec)
        }
    }
}

/// Generate, fit, relabel and match every replicate, then aggregate bias
/// (log-odds scale for phi) and 95% HDI coverage per tracked parameter.
/// Failed replicates are recorded and excluded from the aggregates.
pub fn run_study(spec: &SimulationSpec, fitter: &Fitter) -> Result<StudyResult> {
    spec.validate()?;
    let names = parameter_names(spec);
    let truths = parameter_truths(spec);
    let n_beta = spec.d_r;

    let records: Vec<ReplicateRecord> = (0..spec.m as u64)
        .into_par_iter()
        .map(|rep| match run_replicate(spec, fitter, rep) {
            Ok(estimates) => ReplicateRecord {
                replicate: rep,
                ok: true,
                message: None,
                estimates,
            },
            Err(e) => ReplicateRecord {
                replicate: rep,
                ok: false,
                message: Some(e.to_string()),
                estimates: Vec::new(),
            },
        })
        .collect();

    let failures = records.iter().filter(|r| !r.ok).count();
    let mut parameters = Vec::with_capacity(names.len());
    for (idx, (name, &truth)) in names.iter().zip(&truths).enumerate() {
        let is_phi = idx >= n_beta;
        let mut ests = Vec::new();
        let mut intervals = Vec::new();
        for rec in records.iter().filter(|r| r.ok) {
            let e = &rec.estimates[idx];
            assert!(!is_phi || (e.estimate > 0.0 && e.estimate < 1.0));
            ests.push(if is_phi {
                logit(e.estimate)
            } else {
                e.estimate
            });
            intervals.push((e.lo, e.hi));
        }
        let (mean_bias, cov) = if ests.is_empty() {
            (f64::NAN, f64::NAN)
        } else if is_phi {
            (bias(&ests, logit(truth)), coverage(&intervals, truth))
        } else {
            (bias(&ests, truth), coverage(&intervals, truth))
        };
        parameters.push(ParamSummary {
            name: name.clone(),
            truth,
            mean_bias,
            coverage: cov,
            replicates_used: ests.len(),
        });
    }

    Ok(StudyResult {
        parameters,
        replicates: records,
        m: spec.m,
        failures,
    })
}

/// Rerun the study at several batch-size fractions with identical seeds so
/// the comparisons are paired.
pub fn batch_size_sweep(
    spec: &SimulationSpec,
    fitter: &Fitter,
    fractions: &[f64],
) -> Result<Vec<(f64, StudyResult)>> {
    let (model, svi, posterior_draws) = match fitter {
        Fitter::Svi {
            model,
            svi,
            posterior_draws,
        } => (model, svi, *posterior_draws),
        _ => {
            return Err(BprError::InvalidInput(
                "batch-size sweep applies to the SVI fitter".into(),
            ))
        }
    };
    let mut out = Vec::with_capacity(fractions.len());
    for &frac in fractions {
        if !(frac > 0.0 && frac <= 1.0) {
            return Err(BprError::InvalidInput(format!(
                "batch fraction {frac} outside (0, 1]"
            )));
        }
        let mut cfg = svi.clone();
        cfg.batch_size = Some(((spec.n as f64 * frac).ceil() as usize).max(1));
        let fitter = Fitter::Svi {
            model: model.clone(),
            svi: cfg,
            posterior_draws,
        };
        out.push((frac, run_study(spec, &fitter)?));
    }
    Ok(out)
}
