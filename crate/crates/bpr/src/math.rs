//! Scalar numerical primitives shared across the crate.

use statrs::function::gamma::ln_gamma;

/// Logistic function, stable for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)), stable for x down to at least -700.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inverse of the logistic function.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log(sum(exp(xs))) with the max factored out.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Log-density of the Student-t distribution with `df` degrees of freedom,
/// location `loc` and scale `scale`, evaluated at `x`.
pub fn student_t_lpdf(x: f64, df: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    ln_gamma((df + 1.0) / 2.0)
        - ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - scale.ln()
        - 0.5 * (df + 1.0) * (z * z / df).ln_1p()
}

/// Derivative of `student_t_lpdf` with respect to `x`.
pub fn student_t_lpdf_grad(x: f64, df: f64, loc: f64, scale: f64) -> f64 {
    let z = (x - loc) / scale;
    -(df + 1.0) * z / (scale * (df + z * z))
}
