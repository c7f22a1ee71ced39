//! Scalar loss primitives shared by the RPN and the cascade heads.

/// Transition point of the smooth-L1 loss, in delta units.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of `sigmoid(z)` against `y`, computed as
/// `softplus(z) - y * z`.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - y * z
}

#[inline]
pub fn smooth_l1(r: f64) -> f64 {
    let a = r.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

#[inline]
pub fn smooth_l1_grad(r: f64) -> f64 {
    if r.abs() < SMOOTH_L1_BETA {
        r / SMOOTH_L1_BETA
    } else {
        r.signum()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}
