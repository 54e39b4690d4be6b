//! Checks the binomial subsampled-RDP formula against direct numeric
//! integration of the Renyi divergence between the mixture and the base
//! Gaussian. The integrator shares no code with the closed form.

use sidp_core::accountant::rdp_subsampled_gaussian;

/// `ln(a + b)` given `ln a` and `ln b`.
fn ln_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Renyi divergence of order `alpha` between `(1-q) N(0,z^2) + q N(1,z^2)`
/// and `N(0,z^2)`, by Simpson integration of `mu_q^alpha mu_0^(1-alpha)` in
/// the log domain.
fn rdp_by_integration(alpha: u64, q: f64, z: f64) -> f64 {
    let a = alpha as f64;
    let inv_2s2 = 1.0 / (2.0 * z * z);
    let ln_norm = (z * (2.0 * core::f64::consts::PI).sqrt()).ln();
    let ln_q = q.ln();
    let ln_1q = (1.0 - q).ln();

    // The integrand peaks no further out than x = alpha; pad with wide
    // Gaussian tails on both sides.
    let lo = -30.0 * z - 10.0;
    let hi = a + 30.0 * z + 10.0;
    let n = 200_001usize; // odd, so Simpson's rule applies cleanly
    let dx = (hi - lo) / (n - 1) as f64;

    let h = |x: f64| {
        let ln_mix = ln_add(ln_1q - x * x * inv_2s2, ln_q - (x - 1.0) * (x - 1.0) * inv_2s2);
        a * ln_mix - (1.0 - a) * x * x * inv_2s2 - ln_norm
    };

    let mut max_h = f64::NEG_INFINITY;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let v = h(lo + i as f64 * dx);
        max_h = max_h.max(v);
        values.push(v);
    }
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        let w = if i == 0 || i == n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * (v - max_h).exp();
    }
    let ln_integral = max_h + (sum * dx / 3.0).ln();
    ln_integral.max(0.0) / (a - 1.0)
}

#[test]
fn binomial_formula_matches_numeric_integration() {
    for alpha in [2u64, 3, 5, 8, 16, 32] {
        for q in [0.001, 0.01, 0.1] {
            for z in [0.5, 1.0, 2.0, 4.0] {
                let closed = rdp_subsampled_gaussian(alpha, q, z).unwrap();
                let oracle = rdp_by_integration(alpha, q, z);
                let rel = (closed - oracle).abs() / oracle.abs().max(1e-300);
                assert!(
                    rel <= 1e-6,
                    "alpha={alpha} q={q} z={z}: closed {closed:e} vs integral {oracle:e} (rel {rel:e})"
                );
            }
        }
    }
}

#[test]
fn integration_oracle_reproduces_frozen_values() {
    // Guards the oracle itself against regressions in range or weighting.
    let cases = [
        ((2u64, 0.01, 1.0), 1.718_134_220_5e-4),
        ((8u64, 0.01, 1.0), 8.936_439_076_0e-4),
        ((32u64, 0.1, 0.5), 6.162_313_796_9e1),
    ];
    for ((alpha, q, z), frozen) in cases {
        let oracle = rdp_by_integration(alpha, q, z);
        let rel = (oracle - frozen).abs() / frozen.abs();
        assert!(rel < 1e-9, "alpha={alpha} q={q} z={z}: {oracle:e} vs frozen {frozen:e}");
    }
}
