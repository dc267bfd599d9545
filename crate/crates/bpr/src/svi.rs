//! Full-rank Gaussian stochastic variational inference: reparameterised
//! ELBO estimation with minibatching, hand-derived gradients and Adam.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::CohortData;
use crate::error::{BprError, Result};
use crate::math::logit;
use crate::model::ModelConfig;
use crate::transforms::{log_target, log_target_grad, ParamLayout, ParamVector};

/// A log-density over unconstrained coordinates that SVI or MCMC can fit.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log density at `theta`; may be non-finite outside the support.
    fn log_density(&self, theta: &[f64]) -> f64;

    /// Log density and its gradient at `theta`.
    fn log_density_grad(&self, theta: &[f64]) -> (f64, Vec<f64>);
}

/// The model posterior over a (possibly minibatched) cohort view.
pub struct BprTarget<'a> {
    pub data: &'a CohortData,
    pub cfg: &'a ModelConfig,
    pub layout: ParamLayout,
    /// Row indices of the batch; `None` means the full cohort.
    pub indices: Option<Vec<usize>>,
    /// n / batch_size, keeping minibatch estimates unbiased.
    pub scale: f64,
}

impl<'a> BprTarget<'a> {
    pub fn full(data: &'a CohortData, cfg: &'a ModelConfig) -> Self {
        let layout = ParamLayout::new(cfg.k_max, data.p(), data.a());
        Self {
            data,
            cfg,
            layout,
            indices: None,
            scale: 1.0,
        }
    }

    fn wrap(&self, theta: &[f64]) -> ParamVector {
        ParamVector {
            raw: theta.to_vec(),
            layout: self.layout,
        }
    }

    fn view(&self) -> crate::data::BatchView<'_> {
        match &self.indices {
            Some(idx) => self.data.view(idx),
            None => self.data.full_view(),
        }
    }
}

impl Target for BprTarget<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        log_target(&self.wrap(theta), self.view(), self.cfg, self.scale)
            .unwrap_or(f64::NEG_INFINITY)
    }

    fn log_density_grad(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        log_target_grad(&self.wrap(theta), self.view(), self.cfg, self.scale)
            .unwrap_or((f64::NEG_INFINITY, vec![f64::NAN; self.dim()]))
    }
}

/// Packed row-major lower-triangular matrix with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerTriangular {
    d: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn scaled_identity(d: usize, diag: f64) -> Self {
        assert!(diag > 0.0);
        let mut m = Self {
            d,
            data: vec![0.0; d * (d + 1) / 2],
        };
        for i in 0..d {
            *m.get_mut(i, i) = diag;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.d);
        i * (i + 1) / 2 + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    #[inline]
    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let k = self.idx(i, j);
        &mut self.data[k]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    /// out = L * eps
    pub fn matvec(&self, eps: &[f64], out: &mut [f64]) {
        debug_assert_eq!(eps.len(), self.d);
        let mut k = 0;
        for i in 0..self.d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.data[k] * eps[j];
                k += 1;
            }
            out[i] = acc;
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            d: self.d,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Mean vector and Cholesky factor of the full-rank Gaussian family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalState {
    pub mu: Vec<f64>,
    pub chol: LowerTriangular,
    pub step: u64,
}

impl VariationalState {
    pub fn isotropic(mu: Vec<f64>, diag: f64) -> Self {
        let d = mu.len();
        Self {
            mu,
            chol: LowerTriangular::scaled_identity(d, diag),
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Analytic entropy of the Gaussian: d/2 log(2 pi e) + sum log L_ii.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        let mut h = 0.5 * d * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        for i in 0..self.dim() {
            h += self.chol.diag(i).ln();
        }
        h
    }

    /// theta = mu + L eps for a standard-normal eps drawn from `rng`.
    pub fn draw(&self, rng: &mut ChaCha8Rng, eps: &mut [f64], theta: &mut [f64]) {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        self.chol.matvec(eps, theta);
        for (t, m) in theta.iter_mut().zip(&self.mu) {
            *t += m;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    /// Steps per averaging window.
    pub window: usize,
    /// Relative change of consecutive windowed ELBO means below which the
    /// run is declared converged.
    pub rel_tol: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            window: 500,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SviConfig {
    pub learning_rate: f64,
    /// Monte Carlo samples per ELBO/gradient estimate.
    pub elbo_samples: usize,
    /// Rows per minibatch; `None` selects max(ceil(0.1 n), 256) clamped to n.
    pub batch_size: Option<usize>,
    pub max_steps: usize,
    /// Harmonic step-size decay: the rate at step t is
    /// learning_rate / (1 + lr_decay * t). Zero keeps the rate constant.
    /// A decaying rate stops the optimizer from diffusing along weakly
    /// identified directions once the ELBO has plateaued.
    pub lr_decay: f64,
    pub seed: u64,
    pub convergence: ConvergenceConfig,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            elbo_samples: 30,
            batch_size: None,
            max_steps: 30_000,
            lr_decay: 0.0,
            seed: 0,
            convergence: ConvergenceConfig::default(),
        }
    }
}

impl SviConfig {
    pub fn resolve_batch_size(&self, n: usize) -> usize {
        let b = self
            .batch_size
            .unwrap_or_else(|| ((n as f64 * 0.1).ceil() as usize).max(256));
        b.clamp(1, n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    MaxSteps,
    Converged,
    Aborted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitTrace {
    /// Noisy per-step ELBO estimates.
    pub elbo_history: Vec<f64>,
    pub wall_time_secs: f64,
    pub terminated_reason: Termination,
    /// Diagnostic message when the run aborted.
    pub abort_message: Option<String>,
}

/// One reparameterised ELBO estimate:
/// mean_s log_target(mu + L eps_s) + H[q].
///
/// A non-finite target draw is retried once with fresh noise; a second
/// failure is an error.
pub fn elbo_estimate<T: Target>(
    state: &VariationalState,
    target: &T,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = state.dim();
    let mut eps = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let mut lp = f64::NEG_INFINITY;
        for _attempt in 0..2 {
            state.draw(rng, &mut eps, &mut theta);
            lp = target.log_density(&theta);
            if lp.is_finite() {
                break;
            }
        }
        if !lp.is_finite() {
            return Err(BprError::Numerical(
                "log target non-finite for two consecutive variational draws".into(),
            ));
        }
        acc += lp;
    }
    Ok(acc / n_samples as f64 + state.entropy())
}

/// ELBO estimate and its gradient from the same noise draws.
///
/// grad_mu = mean_s g_s, grad_chol = lower(mean_s g_s eps_s^T) + diag(1/L_ii),
/// with g_s the target gradient at theta_s = mu + L eps_s.
pub fn elbo_and_grad<T: Target>(
    state: &VariationalState,
    target: &T,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>, LowerTriangular)> {
    let d = state.dim();
    let mut eps = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut grad_mu = vec![0.0; d];
    let mut grad_chol = state.chol.zeros_like();
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let mut lp = f64::NEG_INFINITY;
        let mut g = Vec::new();
        for _attempt in 0..2 {
            state.draw(rng, &mut eps, &mut theta);
            let (val, grad) = target.log_density_grad(&theta);
            if val.is_finite() && grad.iter().all(|x| x.is_finite()) {
                lp = val;
                g = grad;
                break;
            }
        }
        if !lp.is_finite() {
            return Err(BprError::Numerical(
                "log target gradient non-finite for two consecutive variational draws".into(),
            ));
        }
        acc += lp;
        for i in 0..d {
            grad_mu[i] += g[i];
            for j in 0..=i {
                *grad_chol.get_mut(i, j) += g[i] * eps[j];
            }
        }
    }
    let inv_s = 1.0 / n_samples as f64;
    for v in grad_mu.iter_mut() {
        *v *= inv_s;
    }
    for v in grad_chol.packed_mut().iter_mut() {
        *v *= inv_s;
    }
    // entropy contribution
    for i in 0..d {
        *grad_chol.get_mut(i, i) += 1.0 / state.chol.diag(i);
    }
    Ok((acc * inv_s + state.entropy(), grad_mu, grad_chol))
}

/// Adam moments over (mu, log-diag(L), strict-lower(L)).
#[derive(Debug, Clone)]
pub struct AdamOptimizer {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamOptimizer {
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn new(lr: f64, d: usize) -> Self {
        let n_params = d + d * (d + 1) / 2;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    fn update(&mut self, slot: usize, grad: f64) -> f64 {
        self.m[slot] = self.beta1 * self.m[slot] + (1.0 - self.beta1) * grad;
        self.v[slot] = self.beta2 * self.v[slot] + (1.0 - self.beta2) * grad * grad;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let m_hat = self.m[slot] / bc1;
        let v_hat = self.v[slot] / bc2;
        self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// One ascent step on the ELBO. The diagonal of L is updated in log space
/// so it stays strictly positive.
pub fn adam_step(
    state: &VariationalState,
    grad_mu: &[f64],
    grad_chol: &LowerTriangular,
    opt: &mut AdamOptimizer,
) -> Result<VariationalState> {
    let d = state.dim();
    if grad_mu.iter().any(|g| !g.is_finite()) || grad_chol.packed().iter().any(|g| !g.is_finite()) {
        return Err(BprError::Numerical(
            "non-finite gradient in adam_step".into(),
        ));
    }
    opt.t += 1;
    let mut next = state.clone();
    for i in 0..d {
        next.mu[i] += opt.update(i, grad_mu[i]);
    }
    let mut slot = d;
    for i in 0..d {
        for j in 0..=i {
            if i == j {
                // d ELBO / d log L_ii = L_ii * d ELBO / d L_ii
                let g = grad_chol.get(i, i) * state.chol.diag(i);
                let new_log = state.chol.diag(i).ln() + opt.update(slot, g);
                *next.chol.get_mut(i, i) = new_log.exp();
            } else {
                *next.chol.get_mut(i, j) =
                    state.chol.get(i, j) + opt.update(slot, grad_chol.get(i, j));
            }
            slot += 1;
        }
    }
    next.step = state.step + 1;
    Ok(next)
}

/// Drive SVI against a per-step target supplied by `next_target` (which
/// receives the shared RNG so batch selection is part of the seeded stream).
pub fn optimize<T: Target>(
    mut next_target: impl FnMut(&mut ChaCha8Rng) -> T,
    init: VariationalState,
    cfg: &SviConfig,
) -> (VariationalState, FitTrace) {
    let start = Instant::now();
    let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed);
    let mut state = init;
    let mut opt = AdamOptimizer::new(cfg.learning_rate, state.dim());
    let mut history = Vec::with_capacity(cfg.max_steps.min(1 << 20));
    let mut reason = Termination::MaxSteps;
    let mut abort_message = None;
    let mut prev_window_mean: Option<f64> = None;

    for step in 0..cfg.max_steps {
        if cfg.lr_decay > 0.0 {
            opt.set_lr(cfg.learning_rate / (1.0 + cfg.lr_decay * step as f64));
        }
        let target = next_target(&mut rng);
        let (elbo, grad_mu, grad_chol) =
            match elbo_and_grad(&state, &target, cfg.elbo_samples, &mut rng) {
                Ok(x) => x,
                Err(e) => {
                    reason = Termination::Aborted;
                    abort_message = Some(e.to_string());
                    break;
                }
            };
        history.push(elbo);
        state = match adam_step(&state, &grad_mu, &grad_chol, &mut opt) {
            Ok(s) => s,
            Err(e) => {
                reason = Termination::Aborted;
                abort_message = Some(e.to_string());
                break;
            }
        };

        let w = cfg.convergence.window;
        if w > 0 && (step + 1) % w == 0 {
            let mean: f64 = history[step + 1 - w..].iter().sum::<f64>() / w as f64;
            if let Some(prev) = prev_window_mean {
                let rel = (mean - prev).abs() / prev.abs().max(1e-12);
                if rel < cfg.convergence.rel_tol {
                    reason = Termination::Converged;
                    break;
                }
            }
            prev_window_mean = Some(mean);
        }
    }

    let trace = FitTrace {
        elbo_history: history,
        wall_time_secs: start.elapsed().as_secs_f64(),
        terminated_reason: reason,
        abort_message,
    };
    (state, trace)
}

/// Fit the profile-regression model to a cohort. Batches are sampled
/// uniformly with replacement each step; the scale factor n/|batch| keeps
/// the stochastic ELBO unbiased.
pub fn fit(
    data: &CohortData,
    model_cfg: &ModelConfig,
    svi_cfg: &SviConfig,
) -> Result<(VariationalState, FitTrace)> {
    model_cfg.validate()?;
    if svi_cfg.elbo_samples == 0 {
        return Err(BprError::InvalidInput("elbo_samples must be >= 1".into()));
    }
    let layout = ParamLayout::new(model_cfg.k_max, data.p(), data.a());
    let n = data.n();
    let batch_size = svi_cfg.resolve_batch_size(n);
    let scale = n as f64 / batch_size as f64;

    // The label-symmetric init mu = 0 is a stationary point of the
    // objective, so symmetry is broken deterministically from the seed:
    // each cluster's profile starts near a randomly chosen observation and
    // the stick means are staggered downward so early sticks carry the data
    // and unused sticks trail (an empty stick ahead of a data-bearing one
    // is a local optimum that inflates reported cluster counts).
    let mut mu = vec![0.0; layout.dim()];
    let base = logit(data.outcome_rate().clamp(1e-3, 1.0 - 1e-3));
    for i in layout.beta0_range() {
        mu[i] = base;
    }
    let mut init_rng: ChaCha8Rng =
        rand::SeedableRng::seed_from_u64(svi_cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    for i in layout.phi_range() {
        mu[i] = 0.3 * init_rng.sample::<f64, _>(StandardNormal);
    }
    for (j, i) in layout.v_range().enumerate() {
        mu[i] = -0.7 * j as f64 + 0.1 * init_rng.sample::<f64, _>(StandardNormal);
    }
    let init = VariationalState::isotropic(mu, 0.1);

    let make_target = |rng: &mut ChaCha8Rng| {
        let indices = if batch_size == n {
            None
        } else {
            Some((0..batch_size).map(|_| rng.gen_range(0..n)).collect())
        };
        BprTarget {
            data,
            cfg: model_cfg,
            layout,
            indices,
            scale: if batch_size == n { 1.0 } else { scale },
        }
    };

    let mut make_target = make_target;
    let (state, mut trace) = optimize(&mut make_target, init, svi_cfg);
    if trace.terminated_reason == Termination::Aborted {
        return Ok((state, trace));
    }

    // Pack: move the fit into the dominant stick arrangement (clusters in
    // descending weight order). Optimization can strand an unused stick
    // ahead of a data-bearing one; that arrangement is a lower-posterior
    // mode whose dead stick reports an expected membership of ~1 subject
    // no matter how empty it is, inflating cluster counts.
    // When the fit already sits in the packed arrangement (no duplicates,
    // clusters in weight order) there is nothing to fix and the polish is
    // skipped: ending the run at the polish step size instead of the decayed
    // schedule would re-inflate the optimizer's stationary noise bias.
    let Some(packed) = pack_state(&state, layout, model_cfg, svi_cfg.seed ^ 0x5EED_9AC5) else {
        return Ok((state, trace));
    };
    // Floor the polish step size so the restarted stick block can
    // re-equilibrate within the polish budget, but scale the floor by the
    // batch fraction: minibatch gradients are noisier by n/|batch| and a
    // large terminal step size would leave the final state a random-walk
    // iterate rather than a converged one.
    let batch_fraction = svi_cfg
        .batch_size
        .map_or(1.0, |b| b.min(n) as f64 / n as f64);
    let polish_cfg = SviConfig {
        // continue the step-size schedule from where the main run stopped
        learning_rate: (svi_cfg.learning_rate
            / (1.0 + svi_cfg.lr_decay * trace.elbo_history.len() as f64))
            .max(svi_cfg.learning_rate / 4.0 * batch_fraction),
        seed: svi_cfg.seed.wrapping_add(0x9AC5),
        convergence: ConvergenceConfig {
            window: 0,
            ..svi_cfg.convergence
        },
        max_steps: (svi_cfg.max_steps / 4).clamp(1, 3000),
        ..svi_cfg.clone()
    };
    let (state, polish_trace) = optimize(&mut make_target, packed, &polish_cfg);
    trace.elbo_history.extend(polish_trace.elbo_history);
    trace.wall_time_secs += polish_trace.wall_time_secs;
    if polish_trace.terminated_reason == Termination::Aborted {
        trace.terminated_reason = Termination::Aborted;
        trace.abort_message = polish_trace.abort_message;
    }
    Ok((state, trace))
}

/// Rebuild `state` with clusters sorted by posterior-mean weight: profile
/// and intercept blocks are permuted (covariance included), and the stick
/// means are recomputed so the sorted weights are preserved. Stick rows of
/// the covariance cannot be permuted consistently (weights are chained
/// through the sticks), so they restart isotropic and are re-learned by the
/// polish phase. Returns `None` when the state is already packed (no
/// duplicate clusters, weights already in descending order).
fn pack_state(
    state: &VariationalState,
    layout: ParamLayout,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Option<VariationalState> {
    let d = layout.dim();
    let k = model_cfg.k_max;
    let p = (layout.phi_range().end - layout.phi_range().start) / k;

    // posterior-mean weights from a fixed-seed MC pass over q
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let mut eps = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut pi_bar = vec![0.0; k];
    let draws = 512;
    for _ in 0..draws {
        state.draw(&mut rng, &mut eps, &mut theta);
        let params = crate::transforms::to_constrained(
            &crate::transforms::ParamVector::new(theta.clone(), layout).unwrap(),
            model_cfg,
        );
        let weights = crate::model::stick_break(&params.v).unwrap();
        for (acc, w) in pi_bar.iter_mut().zip(&weights) {
            *acc += w / draws as f64;
        }
    }
    // Merge near-duplicate clusters: two sticks parked on one data cluster
    // sit on a likelihood ridge and dissolve only at the slow prior rate.
    // Genuinely distinct profiles differ by several logits in at least one
    // coordinate, far beyond these gates, so only true duplicates merge;
    // the polish phase re-equilibrates the merged fit.
    let phi_start = layout.phi_range().start;
    let beta0_start = layout.beta0_range().start;
    let mut mu_work = state.mu.clone();
    let mut merged_any = false;
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..k {
            for b in a + 1..k {
                if pi_bar[a].min(pi_bar[b]) < 2.0 / draws as f64 {
                    continue;
                }
                let mut total = 0.0f64;
                let mut worst = 0.0f64;
                for j in 0..p {
                    let diff =
                        (mu_work[phi_start + a * p + j] - mu_work[phi_start + b * p + j]).abs();
                    total += diff;
                    worst = worst.max(diff);
                }
                let mean_diff = total / p as f64;
                if mean_diff < 1.3 && worst < 3.0 && best.is_none_or(|(_, _, d)| mean_diff < d) {
                    best = Some((a, b, mean_diff));
                }
            }
        }
        let Some((a, b, _)) = best else { break };
        merged_any = true;
        let (wa, wb) = (pi_bar[a], pi_bar[b]);
        let wsum = wa + wb;
        for j in 0..p {
            mu_work[phi_start + a * p + j] =
                (wa * mu_work[phi_start + a * p + j] + wb * mu_work[phi_start + b * p + j]) / wsum;
            mu_work[phi_start + b * p + j] = 0.0;
        }
        mu_work[beta0_start + a] =
            (wa * mu_work[beta0_start + a] + wb * mu_work[beta0_start + b]) / wsum;
        pi_bar[a] = wsum;
        pi_bar[b] = 1e-7;
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| pi_bar[b].partial_cmp(&pi_bar[a]).unwrap());
    if !merged_any && order.iter().enumerate().all(|(i, &c)| i == c) {
        return None;
    }

    // coordinate source map: new coordinate i takes old coordinate src[i]
    let mut src: Vec<usize> = (0..d).collect();
    for (new_c, &old_c) in order.iter().enumerate() {
        for j in 0..p {
            src[phi_start + new_c * p + j] = phi_start + old_c * p + j;
        }
        src[beta0_start + new_c] = beta0_start + old_c;
    }

    let mut mu: Vec<f64> = (0..d).map(|i| mu_work[src[i]]).collect();
    let mut rem = 1.0;
    for (j, i) in layout.v_range().enumerate() {
        let frac = (pi_bar[order[j]] / rem).clamp(1e-6, 1.0 - 1e-6);
        mu[i] = logit(frac);
        rem *= 1.0 - frac;
    }

    // permuted covariance, with the stick block reset to isotropic
    let v_range = layout.v_range();
    let mut sigma = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let (a, b) = (src[i], src[j]);
            let mut acc = 0.0;
            for l in 0..=a.min(b) {
                acc += state.chol.get(a, l) * state.chol.get(b, l);
            }
            sigma[i * d + j] = acc;
        }
    }
    for i in v_range.clone() {
        for j in 0..d {
            sigma[i * d + j] = 0.0;
            sigma[j * d + i] = 0.0;
        }
        sigma[i * d + i] = 0.04;
    }
    let chol = dense_cholesky(&sigma, d);
    Some(VariationalState { mu, chol, step: 0 })
}

/// Cholesky factor of a dense symmetric positive-definite matrix, with a
/// small diagonal ridge for numerical safety.
fn dense_cholesky(sigma: &[f64], d: usize) -> LowerTriangular {
    let mut l = LowerTriangular::scaled_identity(d, 1.0);
    for i in 0..d {
        for j in 0..=i {
            let mut acc = sigma[i * d + j];
            for m in 0..j {
                acc -= l.get(i, m) * l.get(j, m);
            }
            if i == j {
                *l.get_mut(i, i) = acc.max(1e-12).sqrt();
            } else {
                *l.get_mut(i, j) = acc / l.diag(j);
            }
        }
    }
    l
}
