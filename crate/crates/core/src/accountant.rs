//! Renyi-DP accounting for the subsampled Gaussian mechanism.
//!
//! Each training step is a Gaussian mechanism over a Poisson-sampled lot with
//! sensitivity equal to the clip norm; its Renyi divergence at integer orders
//! has a closed binomial form. Orders compose additively across steps, and
//! the ledger converts to `(epsilon, delta)` by minimizing over a fixed order
//! grid. Calibration inverts the pipeline by bisecting on the noise
//! multiplier.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tape::log_sum_exp;

/// Classic closed form for a single Gaussian release:
/// `epsilon = sqrt(2 ln(1.25/delta)) / z`.
pub fn single_step_epsilon(z: f64, delta: f64) -> Result<f64> {
    check_z(z)?;
    check_delta(delta)?;
    Ok((2.0 * (1.25 / delta).ln()).sqrt() / z)
}

/// Renyi divergence of order `alpha` between `N(0, z^2)` and `N(1, z^2)`:
/// `alpha / (2 z^2)`.
pub fn rdp_gaussian(alpha: f64, z: f64) -> Result<f64> {
    check_z(z)?;
    if !(alpha > 1.0) {
        return Err(Error::arg(format!("order must exceed 1, got {alpha}")));
    }
    Ok(alpha / (2.0 * z * z))
}

/// Renyi divergence bound for the Poisson-subsampled Gaussian at integer
/// order `alpha >= 2`, sampling rate `q`, noise multiplier `z`:
///
/// `(1/(alpha-1)) * ln sum_j C(alpha,j) q^j (1-q)^(alpha-j) e^(j(j-1)/(2 z^2))`
///
/// evaluated in the log domain so large orders and small `z` stay finite.
pub fn rdp_subsampled_gaussian(alpha: u64, q: f64, z: f64) -> Result<f64> {
    check_z(z)?;
    if alpha < 2 {
        return Err(Error::arg(format!("integer order must be >= 2, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::arg(format!("sampling rate must be in [0, 1], got {q}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return rdp_gaussian(alpha as f64, z);
    }
    let a = alpha as usize;
    let ln_q = q.ln();
    let ln_1q = (1.0 - q).ln();
    let inv_2z2 = 1.0 / (2.0 * z * z);

    // ln C(alpha, j) built incrementally: C(a, j+1) = C(a, j) * (a-j)/(j+1).
    let mut terms = Vec::with_capacity(a + 1);
    let mut ln_binom = 0.0;
    for j in 0..=a {
        let jf = j as f64;
        terms.push(ln_binom + jf * ln_q + (a - j) as f64 * ln_1q + jf * (jf - 1.0) * inv_2z2);
        if j < a {
            ln_binom += ((a - j) as f64).ln() - (jf + 1.0).ln();
        }
    }
    let ln_e = log_sum_exp(&terms);
    // The divergence is nonnegative; tiny negative values are roundoff.
    Ok(ln_e.max(0.0) / (alpha as f64 - 1.0))
}

/// Accumulated Renyi divergences at a fixed grid of integer orders.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpLedger {
    orders: Vec<u64>,
    rdp: Vec<f64>,
}

impl RdpLedger {
    /// Integer orders 2..=64 plus 128 and 256.
    pub fn with_default_orders() -> Self {
        let orders: Vec<u64> = (2..=64).chain([128, 256]).collect();
        let rdp = alloc::vec![0.0; orders.len()];
        RdpLedger { orders, rdp }
    }

    /// A custom grid; orders must be >= 2, strictly increasing.
    pub fn new(orders: Vec<u64>) -> Result<Self> {
        if orders.is_empty() {
            return Err(Error::arg("order grid must not be empty"));
        }
        if orders[0] < 2 || orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("orders must be >= 2 and strictly increasing"));
        }
        let rdp = alloc::vec![0.0; orders.len()];
        Ok(RdpLedger { orders, rdp })
    }

    pub fn orders(&self) -> &[u64] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    /// Adds `steps` releases of a full-batch Gaussian mechanism.
    pub fn add_gaussian(&mut self, z: f64, steps: usize) -> Result<()> {
        for (o, r) in self.orders.clone().iter().zip(self.rdp.iter_mut()) {
            *r += steps as f64 * rdp_gaussian(*o as f64, z)?;
        }
        Ok(())
    }

    /// Adds `steps` releases of the Poisson-subsampled Gaussian mechanism.
    pub fn add_subsampled_gaussian(&mut self, z: f64, q: f64, steps: usize) -> Result<()> {
        let orders = self.orders.clone();
        for (o, r) in orders.iter().zip(self.rdp.iter_mut()) {
            *r += steps as f64 * rdp_subsampled_gaussian(*o, q, z)?;
        }
        Ok(())
    }

    /// Converts the ledger to `(epsilon, best_order)` at the given `delta`:
    /// `epsilon = min_alpha rdp(alpha) + ln(1/delta) / (alpha - 1)`.
    pub fn epsilon(&self, delta: f64) -> Result<(f64, u64)> {
        check_delta(delta)?;
        let ln_inv_delta = (1.0 / delta).ln();
        let mut best = f64::INFINITY;
        let mut best_order = self.orders[0];
        for (o, r) in self.orders.iter().zip(&self.rdp) {
            let eps = r + ln_inv_delta / (*o as f64 - 1.0);
            if eps < best {
                best = eps;
                best_order = *o;
            }
        }
        Ok((best, best_order))
    }
}

/// [`RdpLedger::epsilon`] as a free function, for symmetry with the other
/// accountant entry points.
pub fn compose_and_convert(ledger: &RdpLedger, delta: f64) -> Result<(f64, u64)> {
    ledger.epsilon(delta)
}

/// Privacy cost of `steps` subsampled-Gaussian steps at rate `q` on the
/// default order grid.
pub fn training_epsilon(z: f64, q: f64, steps: usize, delta: f64) -> Result<(f64, u64)> {
    let mut ledger = RdpLedger::with_default_orders();
    ledger.add_subsampled_gaussian(z, q, steps)?;
    ledger.epsilon(delta)
}

/// Range searched by [`calibrate_z`].
pub const CALIBRATION_Z_RANGE: (f64, f64) = (1e-2, 1e4);

/// Smallest noise multiplier (to a relative grid of 1e-3) whose training cost
/// stays within `target_epsilon`. Errors when even the largest multiplier in
/// the search range cannot reach the target on the default order grid.
pub fn calibrate_z(target_epsilon: f64, delta: f64, q: f64, steps: usize) -> Result<f64> {
    if !(target_epsilon > 0.0) {
        return Err(Error::arg(format!(
            "target epsilon must be positive, got {target_epsilon}"
        )));
    }
    check_delta(delta)?;
    if steps == 0 {
        return Err(Error::arg("steps must be positive"));
    }
    let (mut lo, mut hi) = CALIBRATION_Z_RANGE;
    let eps_at = |z: f64| training_epsilon(z, q, steps, delta).map(|(e, _)| e);

    if eps_at(lo)? <= target_epsilon {
        return Ok(lo);
    }
    let floor = eps_at(hi)?;
    if floor > target_epsilon {
        return Err(Error::CalibrationFailed {
            context: format!(
                "target epsilon {target_epsilon} unreachable: z = {hi} still gives epsilon {floor:.6} \
                 (the order grid caps how small epsilon can get for this delta)"
            ),
        });
    }
    while hi / lo > 1.0 + 1e-3 {
        let mid = (lo * hi).sqrt();
        if eps_at(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn check_z(z: f64) -> Result<()> {
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::arg(format!("noise multiplier must be positive, got {z}")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::arg(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_closed_form() {
        // sqrt(2 ln(1.25e5)) = 4.8448052678...
        let eps = single_step_epsilon(1.0, 1e-5).unwrap();
        let expected = (2.0 * (1.25e5f64).ln()).sqrt();
        assert!((eps - expected).abs() < 1e-12);
        assert!((eps - 4.844_805_262_605).abs() < 1e-9);
        // Doubling the noise halves epsilon.
        let eps2 = single_step_epsilon(2.0, 1e-5).unwrap();
        assert!((eps2 - eps / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_rdp_is_alpha_over_2z2() {
        assert_eq!(rdp_gaussian(2.0, 1.0).unwrap(), 1.0);
        assert_eq!(rdp_gaussian(4.0, 2.0).unwrap(), 0.5);
        assert!(rdp_gaussian(1.0, 1.0).is_err());
        assert!(rdp_gaussian(2.0, 0.0).is_err());
    }

    #[test]
    fn subsampled_rdp_order_2_matches_the_explicit_sum() {
        // At alpha = 2 the binomial sum collapses to 1 + q^2 (e^(1/z^2) - 1).
        for (q, z) in [(0.01, 1.0), (0.1, 0.5), (0.003, 2.0)] {
            let got = rdp_subsampled_gaussian(2, q, z).unwrap();
            let expected = (1.0 + q * q * ((1.0 / (z * z)).exp() - 1.0)).ln();
            assert!(
                (got - expected).abs() <= 1e-14 * expected.abs().max(1.0),
                "q={q} z={z}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn subsampled_rdp_limits() {
        assert_eq!(rdp_subsampled_gaussian(8, 0.0, 1.0).unwrap(), 0.0);
        let full = rdp_subsampled_gaussian(8, 1.0, 1.5).unwrap();
        assert!((full - rdp_gaussian(8.0, 1.5).unwrap()).abs() < 1e-14);
        // Large order and small noise stay finite thanks to the log domain.
        let extreme = rdp_subsampled_gaussian(256, 0.1, 0.5).unwrap();
        assert!(extreme.is_finite() && extreme > 0.0);
    }

    #[test]
    fn subsampled_rdp_is_monotone() {
        // Increasing in order, increasing in rate, decreasing in noise.
        let base = rdp_subsampled_gaussian(8, 0.01, 1.0).unwrap();
        assert!(rdp_subsampled_gaussian(16, 0.01, 1.0).unwrap() > base);
        assert!(rdp_subsampled_gaussian(8, 0.02, 1.0).unwrap() > base);
        assert!(rdp_subsampled_gaussian(8, 0.01, 2.0).unwrap() < base);
    }

    #[test]
    fn ledger_composition_is_additive() {
        let mut once = RdpLedger::with_default_orders();
        once.add_subsampled_gaussian(1.1, 0.04, 200).unwrap();
        let mut twice = RdpLedger::with_default_orders();
        twice.add_subsampled_gaussian(1.1, 0.04, 120).unwrap();
        twice.add_subsampled_gaussian(1.1, 0.04, 80).unwrap();
        for (a, b) in once.rdp().iter().zip(twice.rdp()) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
        let (e1, o1) = once.epsilon(1e-5).unwrap();
        let (e2, o2) = twice.epsilon(1e-5).unwrap();
        assert_eq!(o1, o2);
        assert!((e1 - e2).abs() < 1e-9);
        assert!(once.orders().contains(&o1));
    }

    #[test]
    fn more_steps_cost_more_epsilon() {
        let (e1, _) = training_epsilon(1.1, 0.04, 100, 1e-5).unwrap();
        let (e2, _) = training_epsilon(1.1, 0.04, 400, 1e-5).unwrap();
        assert!(e2 > e1);
        let (e3, _) = training_epsilon(2.2, 0.04, 100, 1e-5).unwrap();
        assert!(e3 < e1);
    }

    #[test]
    fn closed_form_identity_on_random_inputs() {
        let mut rng = crate::rng::RngStream::seed_from(7);
        for _ in 0..100 {
            let z = 0.1 + 30.0 * rng.uniform();
            let delta = 1e-8 + 0.9 * rng.uniform();
            let eps = single_step_epsilon(z, delta).unwrap();
            let direct = (2.0 * (1.25 / delta).ln()).powf(0.5) / z;
            assert!((eps - direct).abs() <= 1e-12 * direct);
        }
    }

    #[test]
    fn rdp_conversion_beats_closed_form_at_small_epsilon() {
        // The classic closed form only holds for epsilon <= 1; in that
        // regime a dense order grid gives a tighter conversion.
        for z in [12.0, 20.0, 100.0] {
            let delta = 1e-5;
            let classic = single_step_epsilon(z, delta).unwrap();
            let ln_inv_delta = (1.0 / delta).ln();
            let mut best = f64::INFINITY;
            let mut alpha = 1.01;
            while alpha < 4000.0 {
                let eps = rdp_gaussian(alpha, z).unwrap() + ln_inv_delta / (alpha - 1.0);
                best = best.min(eps);
                alpha *= 1.001;
            }
            assert!(best <= classic, "z={z}: rdp {best} vs closed form {classic}");
        }
    }

    #[test]
    fn epsilon_is_monotone_on_a_grid() {
        // Nonincreasing in z and delta, nondecreasing in q and steps.
        let base = training_epsilon(1.5, 0.02, 300, 1e-5).unwrap().0;
        assert!(training_epsilon(3.0, 0.02, 300, 1e-5).unwrap().0 <= base);
        assert!(training_epsilon(1.5, 0.05, 300, 1e-5).unwrap().0 >= base);
        assert!(training_epsilon(1.5, 0.02, 600, 1e-5).unwrap().0 >= base);
        assert!(training_epsilon(1.5, 0.02, 300, 1e-3).unwrap().0 <= base);
    }

    #[test]
    fn near_one_delta_leaves_only_the_rdp_term() {
        let mut ledger = RdpLedger::with_default_orders();
        ledger.add_subsampled_gaussian(1.0, 0.05, 50).unwrap();
        let min_rdp = ledger.rdp().iter().cloned().fold(f64::INFINITY, f64::min);
        let (eps, _) = ledger.epsilon(1.0 - 1e-12).unwrap();
        assert!((eps - min_rdp).abs() < 1e-9);
    }

    #[test]
    fn calibration_round_trips() {
        let (target, delta, q, steps) = (1.0, 1e-5, 0.04, 240);
        let z = calibrate_z(target, delta, q, steps).unwrap();
        let (eps, _) = training_epsilon(z, q, steps, delta).unwrap();
        assert!(eps <= target, "calibrated z {z} gives epsilon {eps}");
        // One grid notch below the answer must overshoot the target.
        let (eps_below, _) = training_epsilon(z / 1.002, q, steps, delta).unwrap();
        assert!(eps_below > target, "z {z} is not the smallest on the grid");
    }

    #[test]
    fn calibration_reports_unreachable_targets() {
        // ln(1/delta)/(max_order - 1) floors epsilon near 0.045 for this
        // delta, so a target of 0.001 cannot be met by any noise level.
        let err = calibrate_z(0.001, 1e-5, 0.04, 240).unwrap_err();
        assert!(matches!(err, Error::CalibrationFailed { .. }), "{err:?}");
    }

    #[test]
    fn domain_errors_are_rejected() {
        assert!(single_step_epsilon(0.0, 1e-5).is_err());
        assert!(single_step_epsilon(1.0, 0.0).is_err());
        assert!(single_step_epsilon(1.0, 1.0).is_err());
        assert!(rdp_subsampled_gaussian(1, 0.1, 1.0).is_err());
        assert!(rdp_subsampled_gaussian(2, 1.5, 1.0).is_err());
        assert!(RdpLedger::new(alloc::vec![2, 2]).is_err());
        assert!(RdpLedger::new(alloc::vec![1, 3]).is_err());
        assert!(calibrate_z(-1.0, 1e-5, 0.1, 10).is_err());
    }
}
