//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! The per-step bound uses the binomial expansion that is exact for integer
//! orders. All sums are evaluated in log space so that small noise
//! multipliers and large orders never overflow.
//!
//! Fractional orders (1.5 and 1.75 in the default grid) are handled through
//! monotonicity of the Rényi divergence in its order: the bound computed at
//! `ceil(alpha)` is a valid bound at `alpha`.

use thiserror::Error;

/// Default lower end of the noise-multiplier search bracket.
pub const SIGMA_MIN: f64 = 1e-2;
/// Default upper end of the noise-multiplier search bracket.
pub const SIGMA_MAX: f64 = 1e3;
/// Relative tolerance on epsilon for [`calibrate_sigma`].
pub const CALIBRATION_RTOL: f64 = 1e-3;
const CALIBRATION_MAX_ITERS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountantError {
    #[error("invalid RDP order {0}: integer orders >= 2 are required")]
    InvalidOrder(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "infeasible privacy budget epsilon={target}: sigma bracket [{sigma_min}, {sigma_max}] \
         gives epsilon in [{eps_at_max}, {eps_at_min}]"
    )]
    InfeasibleBudget {
        target: f64,
        sigma_min: f64,
        sigma_max: f64,
        eps_at_min: f64,
        eps_at_max: f64,
    },
    #[error("non-finite RDP value at order {alpha}")]
    NonFinite { alpha: f64 },
}

pub type Result<T> = std::result::Result<T, AccountantError>;

/// A mechanism's RDP profile: `(alpha, eps_alpha)` pairs with strictly
/// increasing orders.
#[derive(Debug, Clone, PartialEq)]
pub struct RdpCurve {
    points: Vec<(f64, f64)>,
}

impl RdpCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(AccountantError::InvalidArgument(
                "RDP curve needs at least one point".into(),
            ));
        }
        for (i, &(alpha, eps)) in points.iter().enumerate() {
            if !(alpha > 1.0) || !alpha.is_finite() {
                return Err(AccountantError::InvalidOrder(alpha));
            }
            if !eps.is_finite() || eps < 0.0 {
                return Err(AccountantError::NonFinite { alpha });
            }
            if i > 0 && alpha <= points[i - 1].0 {
                return Err(AccountantError::InvalidArgument(format!(
                    "orders must be strictly increasing ({} after {})",
                    alpha,
                    points[i - 1].0
                )));
            }
        }
        Ok(Self { points })
    }

    /// Per-step curve of the subsampled Gaussian mechanism over `alphas`.
    pub fn subsampled_gaussian(q: f64, sigma: f64, alphas: &[f64]) -> Result<Self> {
        let mut points = Vec::with_capacity(alphas.len());
        for &alpha in alphas {
            if !(alpha > 1.0) || !alpha.is_finite() {
                return Err(AccountantError::InvalidOrder(alpha));
            }
            let eps = rdp_subsampled_gaussian(q, sigma, alpha.ceil().max(2.0))?;
            points.push((alpha, eps));
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Sampling ratio, noise multiplier and number of steps of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MechanismParams {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

impl MechanismParams {
    pub fn new(q: f64, sigma: f64, steps: u64) -> Result<Self> {
        check_q(q)?;
        check_sigma(sigma)?;
        if steps == 0 {
            return Err(AccountantError::InvalidArgument("steps must be >= 1".into()));
        }
        Ok(Self { q, sigma, steps })
    }
}

/// An `(epsilon, delta)` guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(AccountantError::InvalidArgument(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }
}

/// `delta = 1 / (2n)`, the default for a dataset of `n` samples.
pub fn default_delta(n: u64) -> f64 {
    1.0 / (2.0 * n as f64)
}

/// Orders 1.5, 1.75 and every integer from 2 to 256.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid = vec![1.5, 1.75];
    grid.extend((2..=256).map(f64::from));
    grid
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(AccountantError::InvalidArgument(format!(
            "sampling ratio must lie in [0, 1], got {q}"
        )));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AccountantError::InvalidArgument(format!(
            "noise multiplier must be positive and finite, got {sigma}"
        )));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    Ok(())
}

fn log_binomial(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `ln(e^c - 1)` for `c > 0`.
fn log_expm1(c: f64) -> f64 {
    if c > 40.0 {
        c + (-(-c).exp()).ln_1p()
    } else {
        c.exp_m1().ln()
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// Per-step RDP of the Poisson-subsampled Gaussian mechanism at integer
/// order `alpha`:
///
/// `eps = ln( sum_k C(a,k) (1-q)^(a-k) q^k exp((k^2-k)/(2 sigma^2)) ) / (a-1)`.
///
/// The binomial weights sum to one, so the bracket equals
/// `1 + sum_{k>=2} C(a,k) (1-q)^(a-k) q^k expm1(...)`; that positive tail is
/// accumulated in log space and added back with `log1p`, which keeps full
/// relative precision when the bound is tiny.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> Result<f64> {
    check_q(q)?;
    check_sigma(sigma)?;
    if !(alpha >= 2.0) || alpha.fract() != 0.0 || !alpha.is_finite() || alpha > 1e7 {
        return Err(AccountantError::InvalidOrder(alpha));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return Ok(alpha / (2.0 * sigma * sigma));
    }
    let a = alpha as u64;
    let log_q = q.ln();
    let log_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let terms: Vec<f64> = (2..=a)
        .map(|k| {
            let kf = k as f64;
            log_binomial(a, k)
                + (a - k) as f64 * log_1mq
                + kf * log_q
                + log_expm1((kf * kf - kf) * inv_two_var)
        })
        .collect();
    let eps = softplus(log_sum_exp(&terms)) / (alpha - 1.0);
    if !eps.is_finite() {
        return Err(AccountantError::NonFinite { alpha });
    }
    Ok(eps.max(0.0))
}

/// Composition over `steps` identical steps: every bound scales by `steps`.
pub fn compose(curve: &RdpCurve, steps: u64) -> Result<RdpCurve> {
    if steps == 0 {
        return Err(AccountantError::InvalidArgument("steps must be >= 1".into()));
    }
    let t = steps as f64;
    let points = curve.points.iter().map(|&(a, e)| (a, e * t)).collect();
    RdpCurve::new(points)
}

/// Converted epsilon of a single `(alpha, eps_alpha)` point.
pub fn conversion_epsilon(alpha: f64, eps_alpha: f64, delta: f64) -> f64 {
    eps_alpha + ((alpha - 1.0) / alpha).ln() - (delta.ln() + alpha.ln()) / (alpha - 1.0)
}

/// Smallest `(epsilon, delta)`-DP epsilon implied by any point of the curve,
/// together with the order that achieves it.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    let mut best = (f64::INFINITY, f64::NAN);
    for &(alpha, eps_alpha) in &curve.points {
        let eps = conversion_epsilon(alpha, eps_alpha, delta);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    if best.1.is_nan() {
        return Err(AccountantError::InvalidArgument(
            "no finite conversion on the curve".into(),
        ));
    }
    Ok(best)
}

/// Full guarantee of `params.steps` compositions of the subsampled Gaussian.
pub fn dp_guarantee(params: &MechanismParams, delta: f64, alpha_grid: &[f64]) -> Result<PrivacyBudget> {
    Ok(dp_guarantee_with_order(params, delta, alpha_grid)?.0)
}

/// Like [`dp_guarantee`], also returning the optimal order.
pub fn dp_guarantee_with_order(
    params: &MechanismParams,
    delta: f64,
    alpha_grid: &[f64],
) -> Result<(PrivacyBudget, f64)> {
    let params = MechanismParams::new(params.q, params.sigma, params.steps)?;
    check_delta(delta)?;
    if alpha_grid.is_empty() {
        return Err(AccountantError::InvalidArgument("empty alpha grid".into()));
    }
    let per_step = RdpCurve::subsampled_gaussian(params.q, params.sigma, alpha_grid)?;
    let total = compose(&per_step, params.steps)?;
    let (eps, alpha) = rdp_to_dp(&total, delta)?;
    Ok((
        PrivacyBudget {
            epsilon: eps.max(0.0),
            delta,
        },
        alpha,
    ))
}

fn epsilon_at(q: f64, sigma: f64, steps: u64, delta: f64, grid: &[f64]) -> Result<f64> {
    let params = MechanismParams::new(q, sigma, steps)?;
    Ok(dp_guarantee(&params, delta, grid)?.epsilon)
}

/// Smallest noise multiplier (to within [`CALIBRATION_RTOL`] in epsilon)
/// whose guarantee stays within `target`.
///
/// Bisection runs on `log(sigma)` over `[SIGMA_MIN, SIGMA_MAX]`; the returned
/// value is always the upper end of the final bracket, so the budget is never
/// exceeded.
pub fn calibrate_sigma(target: &PrivacyBudget, q: f64, steps: u64) -> Result<f64> {
    calibrate_sigma_in(target, q, steps, &default_alpha_grid(), SIGMA_MIN, SIGMA_MAX)
}

pub fn calibrate_sigma_in(
    target: &PrivacyBudget,
    q: f64,
    steps: u64,
    alpha_grid: &[f64],
    sigma_min: f64,
    sigma_max: f64,
) -> Result<f64> {
    let target = PrivacyBudget::new(target.epsilon, target.delta)?;
    check_q(q)?;
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(AccountantError::InvalidArgument(format!(
            "bad sigma bracket [{sigma_min}, {sigma_max}]"
        )));
    }
    let eps_of = |s: f64| epsilon_at(q, s, steps, target.delta, alpha_grid);

    let eps_at_max = eps_of(sigma_max)?;
    if eps_at_max > target.epsilon {
        return Err(AccountantError::InfeasibleBudget {
            target: target.epsilon,
            sigma_min,
            sigma_max,
            eps_at_min: eps_of(sigma_min)?,
            eps_at_max,
        });
    }
    let eps_at_min = eps_of(sigma_min)?;
    if eps_at_min <= target.epsilon {
        return Ok(sigma_min);
    }

    let (mut lo, mut hi, mut eps_hi) = (sigma_min, sigma_max, eps_at_max);
    for _ in 0..CALIBRATION_MAX_ITERS {
        if target.epsilon - eps_hi <= CALIBRATION_RTOL * target.epsilon {
            break;
        }
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi {
            break;
        }
        let eps_mid = eps_of(mid)?;
        if eps_mid > target.epsilon {
            lo = mid;
        } else {
            hi = mid;
            eps_hi = eps_mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_sampling_reduces_to_gaussian() {
        assert_eq!(rdp_subsampled_gaussian(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_subsampled_gaussian(1.0, 2.0, 8.0).unwrap(), 1.0);
    }

    #[test]
    fn empty_sampling_leaks_nothing() {
        assert_eq!(rdp_subsampled_gaussian(0.0, 0.5, 8.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_orders() {
        for alpha in [1.0, 1.5, 2.5, -3.0, f64::NAN] {
            assert!(matches!(
                rdp_subsampled_gaussian(0.1, 1.0, alpha),
                Err(AccountantError::InvalidOrder(_))
            ));
        }
    }

    #[test]
    fn tiny_sigma_stays_finite() {
        let eps = rdp_subsampled_gaussian(0.3, 0.01, 256.0).unwrap();
        assert!(eps.is_finite() && eps > 1e5);
    }

    #[test]
    fn composition_scales_pointwise() {
        let c = RdpCurve::new(vec![(2.0, 0.1)]).unwrap();
        assert_eq!(compose(&c, 10).unwrap().points(), &[(2.0, 1.0)]);
        assert_eq!(compose(&c, 1).unwrap(), c);
        let c = RdpCurve::new(vec![(2.0, 0.1), (4.0, 0.3)]).unwrap();
        let out = compose(&c, 3).unwrap();
        assert!((out.points()[0].1 - 0.3).abs() < 1e-15);
        assert!((out.points()[1].1 - 0.9).abs() < 1e-15);
        assert!(compose(&c, 0).is_err());
    }

    #[test]
    fn conversion_single_point() {
        let c = RdpCurve::new(vec![(10.0, 1.0)]).unwrap();
        let (eps, alpha) = rdp_to_dp(&c, 1e-5).unwrap();
        let expected = 1.0 + 0.9f64.ln() - (1e-5f64.ln() + 10f64.ln()) / 9.0;
        assert!((eps - expected).abs() < 1e-12);
        assert!((eps - 1.9180).abs() < 1e-4);
        assert_eq!(alpha, 10.0);
    }

    #[test]
    fn conversion_picks_minimum() {
        let c = RdpCurve::new(vec![(10.0, 1.0), (20.0, 5.0)]).unwrap();
        assert_eq!(rdp_to_dp(&c, 1e-5).unwrap().1, 10.0);
    }

    #[test]
    fn conversion_rejects_bad_delta() {
        let c = RdpCurve::new(vec![(10.0, 1.0)]).unwrap();
        for d in [0.0, 1.0, -1e-3, 2.0] {
            assert!(rdp_to_dp(&c, d).is_err());
        }
    }

    #[test]
    fn curve_invariants_enforced() {
        assert!(RdpCurve::new(vec![]).is_err());
        assert!(RdpCurve::new(vec![(2.0, 0.1), (2.0, 0.2)]).is_err());
        assert!(RdpCurve::new(vec![(2.0, -0.1)]).is_err());
        assert!(RdpCurve::new(vec![(1.0, 0.1)]).is_err());
    }

    #[test]
    fn zero_leakage_guarantee_is_conversion_residual() {
        let p = MechanismParams::new(0.0, 0.5, 1_000_000).unwrap();
        let grid = default_alpha_grid();
        let b = dp_guarantee(&p, 1e-6, &grid).unwrap();
        let residual = grid
            .iter()
            .map(|&a| conversion_epsilon(a, 0.0, 1e-6))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(b.epsilon, residual.max(0.0));
    }

    #[test]
    fn doubling_steps_increases_epsilon() {
        let grid = default_alpha_grid();
        let a = dp_guarantee(&MechanismParams::new(0.01, 1.0, 500).unwrap(), 1e-5, &grid).unwrap();
        let b = dp_guarantee(&MechanismParams::new(0.01, 1.0, 1000).unwrap(), 1e-5, &grid).unwrap();
        assert!(b.epsilon > a.epsilon);
    }

    #[test]
    fn infeasible_budget_reports_bracket() {
        let target = PrivacyBudget::new(1e-4, 1e-5).unwrap();
        match calibrate_sigma(&target, 0.5, 1_000_000) {
            Err(AccountantError::InfeasibleBudget { eps_at_min, eps_at_max, .. }) => {
                assert!(eps_at_max > 1e-4);
                assert!(eps_at_min >= eps_at_max);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn calibration_round_trip() {
        let target = PrivacyBudget::new(3.0, 1e-5).unwrap();
        let sigma = calibrate_sigma(&target, 0.01, 2000).unwrap();
        let got = dp_guarantee(&MechanismParams::new(0.01, sigma, 2000).unwrap(), 1e-5, &default_alpha_grid())
            .unwrap()
            .epsilon;
        assert!(got <= 3.0);
        assert!((3.0 - got) / 3.0 <= 1e-3);
    }

    #[test]
    fn pure_functions_are_bit_identical() {
        let a = rdp_subsampled_gaussian(0.123, 0.77, 37.0).unwrap();
        let b = rdp_subsampled_gaussian(0.123, 0.77, 37.0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn default_delta_is_half_inverse() {
        assert_eq!(default_delta(1_000_000), 5e-7);
    }
}
