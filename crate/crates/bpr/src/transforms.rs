//! Bijections between the constrained parameter space and the unconstrained
//! vector the variational family lives in, with Jacobian corrections, plus
//! the unnormalised log posterior (and its gradient) over unconstrained
//! coordinates.

use serde::{Deserialize, Serialize};

use crate::data::BatchView;
use crate::error::{BprError, Result};
use crate::math::{log_sigmoid, logit, logsumexp, sigmoid, student_t_lpdf_grad};
use crate::model::{dot, log_mixture_lik_row, stick_break_log, ConstrainedParams, ModelConfig};

/// Segment offsets of [v | alpha | phi | beta0 | beta] in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub k_max: usize,
    pub p: usize,
    pub a: usize,
}

impl ParamLayout {
    pub fn new(k_max: usize, p: usize, a: usize) -> Self {
        Self { k_max, p, a }
    }

    pub fn dim(&self) -> usize {
        (self.k_max - 1) + 1 + self.k_max * self.p + self.k_max + self.a
    }

    pub fn v_range(&self) -> std::ops::Range<usize> {
        0..self.k_max - 1
    }

    pub fn alpha_index(&self) -> usize {
        self.k_max - 1
    }

    pub fn phi_range(&self) -> std::ops::Range<usize> {
        let start = self.k_max;
        start..start + self.k_max * self.p
    }

    pub fn beta0_range(&self) -> std::ops::Range<usize> {
        let start = self.k_max + self.k_max * self.p;
        start..start + self.k_max
    }

    pub fn beta_range(&self) -> std::ops::Range<usize> {
        let start = self.k_max + self.k_max * self.p + self.k_max;
        start..start + self.a
    }
}

/// A point in unconstrained space together with its layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamVector {
    pub raw: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn new(raw: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if raw.len() != layout.dim() {
            return Err(BprError::InvalidInput(format!(
                "raw vector length {} does not match layout dimension {}",
                raw.len(),
                layout.dim()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(BprError::InvalidInput(
                "unconstrained parameters must be finite".into(),
            ));
        }
        Ok(Self { raw, layout })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            raw: vec![0.0; layout.dim()],
            layout,
        }
    }
}

/// Map unconstrained coordinates to the constrained parameter space.
///
/// v = sigmoid(raw), alpha = lo + width * sigmoid(raw),
/// phi = eps + (1 - 2 eps) * sigmoid(raw); intercepts and coefficients are
/// identity-mapped.
pub fn to_constrained(raw: &ParamVector, cfg: &ModelConfig) -> ConstrainedParams {
    let lay = &raw.layout;
    let r = &raw.raw;
    let (alpha_lo, alpha_hi) = cfg.alpha_bounds;
    let phi_width = 1.0 - 2.0 * cfg.epsilon;
    // the clamp keeps log(v) and log(1 - v) finite when the sigmoid
    // saturates to exactly 0 or 1 in f64
    let open_sigmoid = |x: f64| sigmoid(x).clamp(1e-15, 1.0 - 1e-15);
    ConstrainedParams {
        v: r[lay.v_range()].iter().map(|&x| open_sigmoid(x)).collect(),
        alpha: alpha_lo + (alpha_hi - alpha_lo) * open_sigmoid(r[lay.alpha_index()]),
        phi: r[lay.phi_range()]
            .iter()
            .map(|&x| cfg.epsilon + phi_width * open_sigmoid(x))
            .collect(),
        beta0: r[lay.beta0_range()].to_vec(),
        beta: r[lay.beta_range()].to_vec(),
        p: lay.p,
    }
}

/// Inverse of `to_constrained`. Used for initialisation and round-trip tests.
pub fn from_constrained(params: &ConstrainedParams, cfg: &ModelConfig) -> Result<ParamVector> {
    let layout = ParamLayout::new(params.k(), params.p, params.beta.len());
    let (alpha_lo, alpha_hi) = cfg.alpha_bounds;
    let phi_width = 1.0 - 2.0 * cfg.epsilon;
    let mut raw = Vec::with_capacity(layout.dim());
    for &v in &params.v {
        raw.push(logit(v));
    }
    raw.push(logit((params.alpha - alpha_lo) / (alpha_hi - alpha_lo)));
    for &phi in &params.phi {
        raw.push(logit((phi - cfg.epsilon) / phi_width));
    }
    raw.extend_from_slice(&params.beta0);
    raw.extend_from_slice(&params.beta);
    ParamVector::new(raw, layout)
}

/// Sum over transformed coordinates of log |d constrained / d raw|.
/// Each scaled sigmoid with width c contributes
/// log c + log sigmoid(raw) + log sigmoid(-raw).
pub fn log_abs_det_jacobian(raw: &ParamVector, cfg: &ModelConfig) -> f64 {
    let lay = &raw.layout;
    let r = &raw.raw;
    let sigmoid_term = |x: f64| log_sigmoid(x) + log_sigmoid(-x);
    let mut lj = 0.0;
    for &x in &r[lay.v_range()] {
        lj += sigmoid_term(x);
    }
    let alpha_width = cfg.alpha_bounds.1 - cfg.alpha_bounds.0;
    lj += alpha_width.ln() + sigmoid_term(r[lay.alpha_index()]);
    let phi_width = 1.0 - 2.0 * cfg.epsilon;
    for &x in &r[lay.phi_range()] {
        lj += phi_width.ln() + sigmoid_term(x);
    }
    lj
}

/// The log of the unnormalised posterior in unconstrained coordinates:
/// marginalised likelihood + prior + Jacobian correction.
pub fn log_target(
    raw: &ParamVector,
    batch: BatchView<'_>,
    cfg: &ModelConfig,
    scale: f64,
) -> Result<f64> {
    let params = to_constrained(raw, cfg);
    Ok(crate::model::log_joint_marginalized(batch, &params, scale)?
        + crate::model::log_prior(&params, cfg)
        + log_abs_det_jacobian(raw, cfg))
}

/// `log_target` together with its gradient, via hand-derived adjoints.
///
/// Per-row likelihood adjoints flow through the softmax responsibilities
/// q_ik of the marginalised mixture; chain-rule factors for the sigmoid
/// segments are applied at the end.
pub fn log_target_grad(
    raw: &ParamVector,
    batch: BatchView<'_>,
    cfg: &ModelConfig,
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(BprError::Domain("empty batch".into()));
    }
    let lay = &raw.layout;
    let params = to_constrained(raw, cfg);
    let k = params.k();
    let p = lay.p;
    let a = lay.a;
    let log_pi = stick_break_log(&params.v);

    // constrained-space likelihood gradients
    let mut g_v = vec![0.0; k.saturating_sub(1)];
    let mut g_phi = vec![0.0; k * p];
    let mut g_beta0 = vec![0.0; k];
    let mut g_beta = vec![0.0; a];

    let mut terms = vec![0.0; k];
    let mut resid = vec![0.0; k]; // y - sigmoid(eta) per cluster
    let mut loglik = 0.0;
    for (x_row, w_row, y) in batch.rows() {
        let linear = dot(&params.beta, w_row);
        for c in 0..k {
            let eta = params.beta0[c] + linear;
            let resp = if y == 1 {
                log_sigmoid(eta)
            } else {
                log_sigmoid(-eta)
            };
            terms[c] = log_pi[c] + log_mixture_lik_row(x_row, params.phi_row(c)) + resp;
            resid[c] = f64::from(y) - sigmoid(eta);
        }
        let lse = logsumexp(&terms);
        loglik += lse;

        // q_ik and a running tail sum for the stick-fraction adjoint
        let mut q_tail = 0.0; // sum of q_ic for c > current stick index, filled backwards
        let mut q = terms.clone();
        for qc in q.iter_mut() {
            *qc = (*qc - lse).exp();
        }
        for l in (0..k - 1).rev() {
            q_tail += q[l + 1];
            g_v[l] += q[l] / params.v[l] - q_tail / (1.0 - params.v[l]);
        }
        let mut resp_weight = 0.0;
        for c in 0..k {
            let qc = q[c];
            let phi_c = params.phi_row(c);
            let grow = &mut g_phi[c * p..(c + 1) * p];
            for j in 0..p {
                grow[j] += if x_row[j] == 1 {
                    qc / phi_c[j]
                } else {
                    -qc / (1.0 - phi_c[j])
                };
            }
            g_beta0[c] += qc * resid[c];
            resp_weight += qc * resid[c];
        }
        for (gb, &w) in g_beta.iter_mut().zip(w_row) {
            *gb += resp_weight * w;
        }
    }
    for g in g_v
        .iter_mut()
        .chain(g_phi.iter_mut())
        .chain(g_beta0.iter_mut())
        .chain(g_beta.iter_mut())
    {
        *g *= scale;
    }

    // prior gradients in constrained space
    let mut g_alpha = (k as f64 - 1.0) / params.alpha;
    for (gv, &v) in g_v.iter_mut().zip(&params.v) {
        *gv -= (params.alpha - 1.0) / (1.0 - v);
        g_alpha += (-v).ln_1p();
    }
    let (df, loc, t_scale) = cfg.beta_prior;
    for (g, &b) in g_beta0.iter_mut().zip(&params.beta0) {
        *g += student_t_lpdf_grad(b, df, loc, t_scale);
    }
    for (g, &b) in g_beta.iter_mut().zip(&params.beta) {
        *g += student_t_lpdf_grad(b, df, loc, t_scale);
    }

    // chain rule through the sigmoid segments plus the Jacobian term's own
    // gradient, 1 - 2 sigmoid(raw) per transformed coordinate
    let r = &raw.raw;
    let mut grad = vec![0.0; lay.dim()];
    for (slot, l) in lay.v_range().enumerate() {
        let s = sigmoid(r[l]);
        grad[l] = g_v[slot] * s * (1.0 - s) + (1.0 - 2.0 * s);
    }
    {
        let i = lay.alpha_index();
        let s = sigmoid(r[i]);
        let width = cfg.alpha_bounds.1 - cfg.alpha_bounds.0;
        grad[i] = g_alpha * width * s * (1.0 - s) + (1.0 - 2.0 * s);
    }
    let phi_width = 1.0 - 2.0 * cfg.epsilon;
    for (slot, i) in lay.phi_range().enumerate() {
        let s = sigmoid(r[i]);
        grad[i] = g_phi[slot] * phi_width * s * (1.0 - s) + (1.0 - 2.0 * s);
    }
    for (slot, i) in lay.beta0_range().enumerate() {
        grad[i] = g_beta0[slot];
    }
    for (slot, i) in lay.beta_range().enumerate() {
        grad[i] = g_beta[slot];
    }

    let value =
        loglik * scale + crate::model::log_prior(&params, cfg) + log_abs_det_jacobian(raw, cfg);
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CohortData;

    fn cfg2() -> ModelConfig {
        ModelConfig::new(2).unwrap()
    }

    #[test]
    fn zero_raw_maps_to_midpoints() {
        let cfg = cfg2();
        let layout = ParamLayout::new(2, 1, 1);
        let raw = ParamVector::zeros(layout);
        let params = to_constrained(&raw, &cfg);
        assert!((params.v[0] - 0.5).abs() < 1e-15);
        assert!((params.alpha - 5.15).abs() < 1e-12);
        assert!((params.phi[0] - 0.5).abs() < 1e-12);
        assert_eq!(params.beta0, vec![0.0, 0.0]);
        assert_eq!(params.beta, vec![0.0]);
    }

    #[test]
    fn saturated_phi_stays_inside_open_support() {
        let cfg = cfg2();
        let layout = ParamLayout::new(2, 1, 0);
        let mut raw = ParamVector::zeros(layout);
        let idx = layout.phi_range().start;
        raw.raw[idx] = 40.0;
        let params = to_constrained(&raw, &cfg);
        assert!(params.phi[0] < 1.0 - cfg.epsilon + 1e-12);
        assert!((params.phi[0] - (1.0 - cfg.epsilon)).abs() < 1e-9);
    }

    #[test]
    fn round_trip_through_constrained_space() {
        let cfg = ModelConfig::new(3).unwrap();
        let layout = ParamLayout::new(3, 2, 2);
        let raw_vals: Vec<f64> = (0..layout.dim())
            .map(|i| ((i as f64) * 0.7).sin() * 8.0)
            .collect();
        let raw = ParamVector::new(raw_vals.clone(), layout).unwrap();
        let back = from_constrained(&to_constrained(&raw, &cfg), &cfg).unwrap();
        for (x, y) in raw_vals.iter().zip(&back.raw) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn jacobian_single_coordinate_values() {
        // width-1 sigmoid at 0 contributes log 0.25; the alpha segment has
        // width 9.7 so contributes log(9.7 * 0.25)
        let cfg = cfg2();
        let layout = ParamLayout::new(2, 0, 0);
        let raw = ParamVector::zeros(layout);
        let lj = log_abs_det_jacobian(&raw, &cfg);
        let expect = 0.25f64.ln() + (9.7 * 0.25f64).ln();
        assert!((lj - expect).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let cfg = ModelConfig::new(3).unwrap();
        let layout = ParamLayout::new(3, 2, 1);
        let raw_vals: Vec<f64> = (0..layout.dim()).map(|i| (i as f64 * 0.3) - 1.0).collect();
        let raw = ParamVector::new(raw_vals.clone(), layout).unwrap();
        let lj = log_abs_det_jacobian(&raw, &cfg);

        let h = 1e-5;
        let mut fd_sum = 0.0;
        let flatten = |pv: &ParamVector| -> Vec<f64> {
            let c = to_constrained(pv, &cfg);
            let mut out = c.v.clone();
            out.push(c.alpha);
            out.extend_from_slice(&c.phi);
            out.extend_from_slice(&c.beta0);
            out.extend_from_slice(&c.beta);
            out
        };
        let n_transformed = layout.phi_range().end;
        for i in 0..layout.dim() {
            let mut up = raw.clone();
            up.raw[i] += h;
            let mut dn = raw.clone();
            dn.raw[i] -= h;
            let d = (flatten(&up)[i] - flatten(&dn)[i]) / (2.0 * h);
            if i < n_transformed {
                fd_sum += d.abs().ln();
            } else {
                assert!((d - 1.0).abs() < 1e-9);
            }
        }
        assert!((lj - fd_sum).abs() < 1e-6);
    }

    fn tiny_cohort() -> CohortData {
        CohortData::from_rows(vec![1, 0, 1, 1], vec![0.5, -1.0], vec![1, 0], 2, 2, 1).unwrap()
    }

    #[test]
    fn log_target_is_sum_of_components() {
        let cfg = cfg2();
        let data = tiny_cohort();
        let layout = ParamLayout::new(2, 2, 1);
        let raw_vals: Vec<f64> = (0..layout.dim()).map(|i| (i as f64 * 0.41).cos()).collect();
        let raw = ParamVector::new(raw_vals, layout).unwrap();
        let params = to_constrained(&raw, &cfg);
        let expect = crate::model::log_joint_marginalized(data.full_view(), &params, 1.0).unwrap()
            + crate::model::log_prior(&params, &cfg)
            + log_abs_det_jacobian(&raw, &cfg);
        let got = log_target(&raw, data.full_view(), &cfg, 1.0).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn log_target_finite_at_saturated_raw() {
        let cfg = cfg2();
        let data = tiny_cohort();
        let layout = ParamLayout::new(2, 2, 1);
        for sign in [-1.0, 1.0] {
            let raw = ParamVector::new(vec![40.0 * sign; layout.dim()], layout).unwrap();
            let got = log_target(&raw, data.full_view(), &cfg, 1.0).unwrap();
            assert!(got.is_finite(), "saturated target not finite: {got}");
            let (val, grad) = log_target_grad(&raw, data.full_view(), &cfg, 1.0).unwrap();
            assert!(val.is_finite());
            assert!(grad.iter().all(|g| g.is_finite()));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig::new(3).unwrap();
        let data = tiny_cohort();
        let layout = ParamLayout::new(3, 2, 1);
        let raw_vals: Vec<f64> = (0..layout.dim())
            .map(|i| ((i as f64) * 1.3).sin() * 1.5)
            .collect();
        let raw = ParamVector::new(raw_vals, layout).unwrap();
        let (value, grad) = log_target_grad(&raw, data.full_view(), &cfg, 1.0).unwrap();
        let direct = log_target(&raw, data.full_view(), &cfg, 1.0).unwrap();
        assert!((value - direct).abs() < 1e-10);

        let h = 1e-6;
        for i in 0..layout.dim() {
            let mut up = raw.clone();
            up.raw[i] += h;
            let mut dn = raw.clone();
            dn.raw[i] -= h;
            let fd = (log_target(&up, data.full_view(), &cfg, 1.0).unwrap()
                - log_target(&dn, data.full_view(), &cfg, 1.0).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(1.0);
            assert!(
                (grad[i] - fd).abs() / denom < 1e-6,
                "coord {i}: analytic {} vs fd {}",
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn gradient_respects_batch_scale() {
        let cfg = cfg2();
        let data = tiny_cohort();
        let layout = ParamLayout::new(2, 2, 1);
        let raw = ParamVector::zeros(layout);
        let idx = [0usize];
        let (v1, _) = log_target_grad(&raw, data.view(&idx), &cfg, 2.0).unwrap();
        let direct = log_target(&raw, data.view(&idx), &cfg, 2.0).unwrap();
        assert!((v1 - direct).abs() < 1e-12);
    }
}
