//! Joint log-density of the profile-regression model with the discrete
//! cluster labels marginalised out, evaluated on constrained-space parameters.

use serde::{Deserialize, Serialize};

use crate::data::BatchView;
use crate::error::{BprError, Result};
use crate::math::{log_sigmoid, logsumexp, student_t_lpdf};

/// Truncation level, prior hyperparameters and numerical guards.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Truncation level of the stick-breaking construction.
    pub k_max: usize,
    /// Bounds the Bernoulli probabilities away from {0, 1}.
    pub epsilon: f64,
    /// Support of the uniform prior on the concentration parameter.
    pub alpha_bounds: (f64, f64),
    /// Student-t prior on all regression coefficients: (df, loc, scale).
    pub beta_prior: (f64, f64, f64),
}

impl Default for ModelConfig {
    /// Truncation at 50 clusters with the standard priors.
    fn default() -> Self {
        Self {
            k_max: 50,
            epsilon: 1e-4,
            alpha_bounds: (0.3, 10.0),
            beta_prior: (7.0, 0.0, 2.5),
        }
    }
}

impl ModelConfig {
    pub fn new(k_max: usize) -> Result<Self> {
        let cfg = Self {
            k_max,
            epsilon: 1e-4,
            alpha_bounds: (0.3, 10.0),
            beta_prior: (7.0, 0.0, 2.5),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max < 2 {
            return Err(BprError::InvalidInput("k_max must be >= 2".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(BprError::InvalidInput("epsilon must be in (0, 0.5)".into()));
        }
        let (lo, hi) = self.alpha_bounds;
        if !(lo > 0.0 && lo < hi) {
            return Err(BprError::InvalidInput(
                "alpha_bounds must satisfy 0 < lo < hi".into(),
            ));
        }
        let (df, _, scale) = self.beta_prior;
        if df <= 0.0 || scale <= 0.0 {
            return Err(BprError::InvalidInput(
                "beta prior df and scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters on their natural (constrained) scale.
#[derive(Debug, Clone)]
pub struct ConstrainedParams {
    /// Stick fractions, length k_max - 1, each in (0, 1).
    pub v: Vec<f64>,
    /// Concentration of the Dirichlet process, inside `alpha_bounds`.
    pub alpha: f64,
    /// Per-cluster Bernoulli probabilities, k_max x p row-major, in (eps, 1-eps).
    pub phi: Vec<f64>,
    /// Cluster intercepts, length k_max.
    pub beta0: Vec<f64>,
    /// Global response coefficients, length a.
    pub beta: Vec<f64>,
    /// Mixture covariate count.
    pub p: usize,
}

impl ConstrainedParams {
    pub fn k(&self) -> usize {
        self.beta0.len()
    }

    #[inline]
    pub fn phi_row(&self, k: usize) -> &[f64] {
        &self.phi[k * self.p..(k + 1) * self.p]
    }
}

/// Stick-breaking map from fractions `v` in (0,1)^(K-1) to mixture weights
/// on the K-simplex. The tail products are accumulated as sums of
/// log(1 - v) so weights stay accurate at large K.
pub fn stick_break(v: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = v.iter().find(|&&f| !(f > 0.0 && f < 1.0)) {
        return Err(BprError::Domain(format!(
            "stick fraction {bad} outside (0, 1)"
        )));
    }
    let log_pi = stick_break_log(v);
    Ok(log_pi.iter().map(|&lp| lp.exp()).collect())
}

/// Log of the stick-breaking weights; preconditions as `stick_break`.
pub fn stick_break_log(v: &[f64]) -> Vec<f64> {
    let k = v.len() + 1;
    let mut log_pi = Vec::with_capacity(k);
    let mut log_tail = 0.0; // sum of log(1 - v_l) over sticks consumed so far
    for &f in v {
        log_pi.push(f.ln() + log_tail);
        log_tail += (-f).ln_1p();
    }
    log_pi.push(log_tail);
    log_pi
}

/// Bernoulli profile log-likelihood of one covariate row under cluster
/// probabilities `phi_k`.
#[inline]
pub fn log_mixture_lik_row(x_row: &[u8], phi_k: &[f64]) -> f64 {
    debug_assert_eq!(x_row.len(), phi_k.len());
    let mut acc = 0.0;
    for (&x, &phi) in x_row.iter().zip(phi_k) {
        acc += if x == 1 { phi.ln() } else { (-phi).ln_1p() };
    }
    acc
}

/// Bernoulli log-pmf of outcome `y` with success probability
/// logistic(beta0_k + beta . w), computed in log-sigmoid form.
#[inline]
pub fn log_response_lik_row(y: u8, w_row: &[f64], beta0_k: f64, beta: &[f64]) -> f64 {
    let eta = beta0_k + dot(beta, w_row);
    if y == 1 {
        log_sigmoid(eta)
    } else {
        log_sigmoid(-eta)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Marginalised joint log-likelihood over a batch of rows, scaled by
/// `scale` = n / batch_size to keep minibatch estimates unbiased.
pub fn log_joint_marginalized(
    batch: BatchView<'_>,
    params: &ConstrainedParams,
    scale: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(BprError::Domain("empty batch".into()));
    }
    let log_pi = stick_break_log(&params.v);
    let k = params.k();
    let mut terms = vec![0.0; k];
    let mut total = 0.0;
    for (x_row, w_row, y) in batch.rows() {
        let resp_linear = dot(&params.beta, w_row);
        for c in 0..k {
            let eta = params.beta0[c] + resp_linear;
            let resp = if y == 1 {
                log_sigmoid(eta)
            } else {
                log_sigmoid(-eta)
            };
            terms[c] = log_pi[c] + log_mixture_lik_row(x_row, params.phi_row(c)) + resp;
        }
        total += logsumexp(&terms);
    }
    Ok(scale * total)
}

/// Log prior density. Out-of-support parameters yield negative infinity so
/// the samplers see a hard barrier rather than an error.
pub fn log_prior(params: &ConstrainedParams, cfg: &ModelConfig) -> f64 {
    // closed-bound support checks: the sigmoid transform can land exactly on
    // a boundary when saturated, and the density is continuous there
    let (alpha_lo, alpha_hi) = cfg.alpha_bounds;
    if !(params.alpha >= alpha_lo && params.alpha <= alpha_hi) {
        return f64::NEG_INFINITY;
    }
    let mut lp = -(alpha_hi - alpha_lo).ln();

    // v_l ~ Beta(1, alpha): log density = log(alpha) + (alpha - 1) log(1 - v)
    for &v in &params.v {
        if !(v > 0.0 && v < 1.0) {
            return f64::NEG_INFINITY;
        }
        lp += params.alpha.ln() + (params.alpha - 1.0) * (-v).ln_1p();
    }

    // phi ~ Uniform(eps, 1 - eps)
    let phi_width = 1.0 - 2.0 * cfg.epsilon;
    for &phi in &params.phi {
        if !(phi >= cfg.epsilon && phi <= 1.0 - cfg.epsilon) {
            return f64::NEG_INFINITY;
        }
        lp -= phi_width.ln();
    }

    let (df, loc, scale) = cfg.beta_prior;
    for &b in params.beta0.iter().chain(&params.beta) {
        lp += student_t_lpdf(b, df, loc, scale);
    }
    lp
}
