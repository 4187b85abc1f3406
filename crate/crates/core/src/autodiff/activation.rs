//! Scalar nonlinearities. The FFN forward, the saliency probe and the tape
//! all call these, so the GELU used for Jacobian saliency is the same one the
//! model runs.

use super::tensor::Real;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<R: Real>(x: R) -> R {
    let c = R::of(SQRT_2_OVER_PI);
    let u = c * (x + R::of(GELU_CUBIC) * x * x * x);
    R::of(0.5) * x * (R::one() + u.tanh())
}

/// Exact derivative of [`gelu`].
#[inline]
pub fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::of(SQRT_2_OVER_PI);
    let k = R::of(GELU_CUBIC);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (R::one() + R::of(3.0) * k * x * x);
    R::of(0.5) * (R::one() + t) + R::of(0.5) * x * (R::one() - t * t) * du
}

#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_known_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(gelu_grad(0.0f64), 0.5);
        assert_eq!(gelu_grad(0.0f32), 0.5);
        // Large positive input passes through, large negative is squashed.
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
    }
}
