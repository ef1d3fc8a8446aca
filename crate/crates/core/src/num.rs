//! Shared numeric conventions.
//!
//! Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before the sigmoid and
//! every log gets a `LOG_EPS` floor. Both constants are part of the loss
//! definition, not tunables; tests pin behavior at the boundaries.

/// Symmetric logit clamp applied before sigmoids.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-7;

/// Sigmoid of the clamped logit.
pub fn sigmoid_clamped(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

/// Derivative of [`sigmoid_clamped`] with respect to the raw logit: zero in
/// the clamped region, `p(1-p)` elsewhere.
pub fn sigmoid_clamped_grad(z: f64) -> f64 {
    if z.abs() >= LOGIT_CLAMP {
        0.0
    } else {
        let p = sigmoid_clamped(z);
        p * (1.0 - p)
    }
}
