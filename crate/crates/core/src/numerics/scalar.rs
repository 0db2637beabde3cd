//! Scalar activation functions and their derivatives.
//!
//! Shared by the differentiable tensor ops and the plain-array inference
//! kernels so both paths evaluate identical formulas.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// x * sigmoid(x)
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// ln(1 + e^x), overflow-safe.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// d/dx softplus(x) = sigmoid(x)
pub fn softplus_deriv(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of softplus: softplus(softplus_inv(y)) = y for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), rewritten to avoid overflow for large y
    y + (-(-y).exp_m1()).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// phi1(z) = (e^z - 1) / z, extended analytically with phi1(0) = 1.
///
/// This is the factor turning a continuous input matrix into its
/// zero-order-hold discretization; `exp_m1` keeps it accurate for small z.
pub fn phi1(z: f64) -> f64 {
    if z == 0.0 {
        1.0
    } else {
        z.exp_m1() / z
    }
}

/// d/dz phi1(z) = ((z - 1) e^z + 1) / z^2, with a series for small |z|
/// where the closed form loses precision to cancellation.
pub fn phi1_deriv(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        // phi1(z) = sum z^k/(k+1)!  =>  phi1'(z) = 1/2 + z/3 + z^2/8 + z^3/30 + z^4/144
        0.5 + z * (1.0 / 3.0 + z * (0.125 + z * (1.0 / 30.0 + z / 144.0)))
    } else {
        ((z - 1.0) * z.exp() + 1.0) / (z * z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_roundtrip() {
        for &y in &[1e-4, 1e-3, 0.05, 0.693, 1.0, 10.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn phi1_limit_and_value() {
        assert_eq!(phi1(0.0), 1.0);
        assert!((phi1(1e-12) - 1.0).abs() < 1e-9);
        assert!((phi1(-0.5) - ((-0.5f64).exp_m1() / -0.5)).abs() < 1e-16);
    }

    #[test]
    fn phi1_deriv_matches_finite_difference() {
        for &z in &[-2.0, -0.1, -1e-4, 1e-6, 1e-4, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (phi1(z + h) - phi1(z - h)) / (2.0 * h);
            assert!(
                (phi1_deriv(z) - fd).abs() < 1e-8,
                "z={z}: {} vs {}",
                phi1_deriv(z),
                fd
            );
        }
    }
}
