//! Circular-linear velocity model.
//!
//! A velocity is a (heading, speed) pair: heading lives on the circle
//! [-pi, pi), speed on the real line. Per-cell flow statistics are
//! semi-wrapped Gaussian mixtures over that cylinder — each component is a
//! bivariate normal whose heading dimension is wrapped onto the circle by
//! summing over winding numbers.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Winding numbers summed when evaluating a semi-wrapped density. One turn in
/// each direction is enough for the concentrations this crate works with: a
/// component would need a heading standard deviation above ~1.9 rad before
/// the dropped terms reach 1e-3 of the density.
pub const DEFAULT_MAX_WINDING: i32 = 1;

// ─────────────────────────────────────────────────────────────────────────────
// Angles
// ─────────────────────────────────────────────────────────────────────────────

/// Maps any finite angle into [-pi, pi). Errors on non-finite input.
pub fn wrap_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid(format!("angle must be finite, got {a}")));
    }
    Ok(wrap(a))
}

/// Wrapped signed difference a - b, in [-pi, pi). Errors on non-finite input.
pub fn angular_diff(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid(format!(
            "angles must be finite, got {a} and {b}"
        )));
    }
    Ok(ang_diff(a, b))
}

/// Squared-exponential influence kernel exp(-beta * x^2).
///
/// `beta` controls how quickly influence decays with angular distance:
/// large beta ignores the map, small beta follows it.
pub fn kernel(x: f64, beta: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("kernel input must be finite, got {x}")));
    }
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(kernel_unchecked(x, beta))
}

/// `wrap_angle` without the finiteness check, for validated hot paths.
#[inline]
pub(crate) fn wrap(a: f64) -> f64 {
    debug_assert!(a.is_finite());
    (a + PI).rem_euclid(TAU) - PI
}

#[inline]
pub(crate) fn ang_diff(a: f64, b: f64) -> f64 {
    wrap(a - b)
}

#[inline]
pub(crate) fn kernel_unchecked(x: f64, beta: f64) -> f64 {
    (-beta * x * x).exp()
}

// ─────────────────────────────────────────────────────────────────────────────
// Types
// ─────────────────────────────────────────────────────────────────────────────

/// Instantaneous motion: heading `theta` in [-pi, pi), speed `rho` in m/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub theta: f64,
    pub rho: f64,
}

/// Position plus velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub rho: f64,
    pub theta: f64,
}

impl State {
    pub fn velocity(&self) -> Velocity {
        Velocity {
            theta: self.theta,
            rho: self.rho,
        }
    }
}

/// Symmetric 2x2 covariance over (theta, rho), serialized as
/// [c_tt, c_tr, c_rr].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Cov2 {
    pub tt: f64,
    pub tr: f64,
    pub rr: f64,
}

impl From<[f64; 3]> for Cov2 {
    fn from(v: [f64; 3]) -> Self {
        Cov2 {
            tt: v[0],
            tr: v[1],
            rr: v[2],
        }
    }
}

impl From<Cov2> for [f64; 3] {
    fn from(c: Cov2) -> Self {
        [c.tt, c.tr, c.rr]
    }
}

impl Cov2 {
    pub fn diagonal(tt: f64, rr: f64) -> Self {
        Cov2 { tt, tr: 0.0, rr }
    }

    pub fn det(&self) -> f64 {
        self.tt * self.rr - self.tr * self.tr
    }

    /// Positive-definiteness via the leading minors.
    pub fn is_spd(&self) -> bool {
        self.tt.is_finite()
            && self.tr.is_finite()
            && self.rr.is_finite()
            && self.tt > 0.0
            && self.det() > 0.0
    }

    /// Precomputed inverse and normalizer for repeated density evaluation.
    pub fn precision(&self) -> Result<Precision2> {
        let det = self.det();
        if !self.is_spd() {
            return Err(Error::numerical(format!(
                "covariance [{}, {}, {}] is not positive definite (det = {det})",
                self.tt, self.tr, self.rr
            )));
        }
        Ok(Precision2 {
            itt: self.rr / det,
            itr: -self.tr / det,
            irr: self.tt / det,
            log_norm: -(TAU.ln()) - 0.5 * det.ln(),
        })
    }

    /// Lower-triangular Cholesky factor (l11, l21, l22).
    pub fn cholesky(&self) -> Result<(f64, f64, f64)> {
        if !self.is_spd() {
            return Err(Error::numerical(format!(
                "cannot factor non-SPD covariance [{}, {}, {}]",
                self.tt, self.tr, self.rr
            )));
        }
        let l11 = self.tt.sqrt();
        let l21 = self.tr / l11;
        let l22 = (self.rr - l21 * l21).sqrt();
        Ok((l11, l21, l22))
    }

    /// Clamps both eigenvalues to at least `floor`, preserving eigenvectors.
    /// Keeps estimated covariances safely positive definite.
    pub fn eigen_floored(&self, floor: f64) -> Cov2 {
        let (a, b, c) = (self.tt, self.tr, self.rr);
        if b.abs() < 1e-300 {
            return Cov2::diagonal(a.max(floor), c.max(floor));
        }
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (l1, l2) = (mid + rad, mid - rad);
        if l1 >= floor && l2 >= floor {
            return *self;
        }
        let (l1, l2) = (l1.max(floor), l2.max(floor));
        // Eigenvector for l1; (b, l1 - a) is non-degenerate whenever b != 0.
        let (vx, vy) = (b, l1 - a);
        let n = (vx * vx + vy * vy).sqrt();
        let (vx, vy) = (vx / n, vy / n);
        // Recompose l1*v*v' + l2*w*w' with w the orthogonal complement.
        Cov2 {
            tt: l1 * vx * vx + l2 * vy * vy,
            tr: (l1 - l2) * vx * vy,
            rr: l1 * vy * vy + l2 * vx * vx,
        }
    }
}

/// Inverse of a `Cov2` plus the bivariate-normal log normalizer.
#[derive(Clone, Copy, Debug)]
pub struct Precision2 {
    itt: f64,
    itr: f64,
    irr: f64,
    log_norm: f64,
}

impl Precision2 {
    /// Squared Mahalanobis distance of the residual (dt, dr).
    #[inline]
    pub fn quad_form(&self, dt: f64, dr: f64) -> f64 {
        self.itt * dt * dt + 2.0 * self.itr * dt * dr + self.irr * dr * dr
    }

    /// Log density of the centered bivariate normal at residual (dt, dr).
    #[inline]
    pub fn log_density(&self, dt: f64, dr: f64) -> f64 {
        self.log_norm - 0.5 * self.quad_form(dt, dr)
    }
}

/// One semi-wrapped normal component: mixture weight, circular heading mean,
/// linear speed mean, and (theta, rho) covariance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiWrappedComponent {
    pub weight: f64,
    pub mean_theta: f64,
    pub mean_rho: f64,
    pub cov: Cov2,
}

impl SemiWrappedComponent {
    /// Validates and normalizes: the heading mean is wrapped into [-pi, pi),
    /// the covariance must be positive definite, the weight in [0, 1].
    pub fn new(weight: f64, mean_theta: f64, mean_rho: f64, cov: Cov2) -> Result<Self> {
        if !weight.is_finite() || !(0.0..=1.0 + 1e-9).contains(&weight) {
            return Err(Error::invalid(format!("component weight {weight} not in [0, 1]")));
        }
        if !mean_rho.is_finite() {
            return Err(Error::invalid(format!("mean_rho must be finite, got {mean_rho}")));
        }
        if !cov.is_spd() {
            return Err(Error::numerical(format!(
                "component covariance [{}, {}, {}] is not positive definite",
                cov.tt, cov.tr, cov.rr
            )));
        }
        Ok(SemiWrappedComponent {
            weight,
            mean_theta: wrap_angle(mean_theta)?,
            mean_rho,
            cov,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.weight, self.mean_theta, self.mean_rho, self.cov).map(|_| ())
    }
}

/// Semi-wrapped Gaussian mixture over (heading, speed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Swgmm {
    pub components: Vec<SemiWrappedComponent>,
}

impl Swgmm {
    /// Validates: at least one component, weights summing to 1 within 1e-9.
    pub fn new(components: Vec<SemiWrappedComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        for c in &components {
            c.validate()?;
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Swgmm { components })
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Densities and sampling
// ─────────────────────────────────────────────────────────────────────────────

/// Semi-wrapped normal density of one component at `v`: the bivariate normal
/// summed over heading windings w in {-DEFAULT_MAX_WINDING, ...,
/// +DEFAULT_MAX_WINDING}.
pub fn swn_pdf(component: &SemiWrappedComponent, v: Velocity) -> f64 {
    swn_pdf_windings(component, v, DEFAULT_MAX_WINDING)
}

/// `swn_pdf` with the winding truncation made explicit. Increasing
/// `max_winding` tightens the approximation for very diffuse components.
pub fn swn_pdf_windings(component: &SemiWrappedComponent, v: Velocity, max_winding: i32) -> f64 {
    let prec = component
        .cov
        .precision()
        .expect("component covariance validated at construction");
    let dr = v.rho - component.mean_rho;
    let mut total = 0.0;
    for w in -max_winding..=max_winding {
        let dt = v.theta + TAU * f64::from(w) - component.mean_theta;
        total += prec.log_density(dt, dr).exp();
    }
    total
}

/// Log of `swn_pdf`, evaluated stably for observations far from the mean.
pub(crate) fn swn_log_pdf(prec: &Precision2, mean_theta: f64, mean_rho: f64, v: Velocity) -> f64 {
    let dr = v.rho - mean_rho;
    let mut terms = [0.0f64; (2 * DEFAULT_MAX_WINDING as usize) + 1];
    for (i, w) in (-DEFAULT_MAX_WINDING..=DEFAULT_MAX_WINDING).enumerate() {
        let dt = v.theta + TAU * f64::from(w) - mean_theta;
        terms[i] = prec.log_density(dt, dr);
    }
    log_sum_exp(&terms)
}

/// Mixture density: the weighted sum of component densities.
pub fn swgmm_pdf(mixture: &Swgmm, v: Velocity) -> f64 {
    mixture
        .components
        .iter()
        .map(|c| c.weight * swn_pdf(c, v))
        .sum()
}

/// Draws one velocity from the mixture: pick a component by weight, draw from
/// its unwrapped normal via the Cholesky factor, wrap the heading. Speed is
/// clamped at zero — a draw below zero has no physical meaning here.
pub fn swgmm_sample(mixture: &Swgmm, rng: &mut impl Rng) -> Velocity {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = &mixture.components[mixture.components.len() - 1];
    for c in &mixture.components {
        acc += c.weight;
        if u < acc {
            chosen = c;
            break;
        }
    }
    let (l11, l21, l22) = chosen
        .cov
        .cholesky()
        .expect("component covariance validated at construction");
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    Velocity {
        theta: wrap(chosen.mean_theta + l11 * z1),
        rho: (chosen.mean_rho + l21 * z1 + l22 * z2).max(0.0),
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

// ─────────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    /// Upper 0.999 quantile of the chi-squared distribution via the
    /// Wilson–Hilferty cube approximation — plenty accurate for the large
    /// degrees of freedom this suite uses (relative error well under 1%).
    fn chi_squared_crit_999(dof: f64) -> f64 {
        let z = 3.090232306167813; // standard normal 0.999 quantile
        let a = 2.0 / (9.0 * dof);
        dof * (1.0 - a + z * a.sqrt()).powi(3)
    }

    /// Independent bivariate normal density, written out longhand so the
    /// production code path is not part of its own oracle.
    fn bvn_density(dt: f64, dr: f64, tt: f64, tr: f64, rr: f64) -> f64 {
        let det = tt * rr - tr * tr;
        let q = (rr * dt * dt - 2.0 * tr * dt * dr + tt * dr * dr) / det;
        (-0.5 * q).exp() / (TAU * det.sqrt())
    }

    fn swn_oracle(c: &SemiWrappedComponent, v: Velocity, windings: i32) -> f64 {
        (-windings..=windings)
            .map(|w| {
                bvn_density(
                    v.theta + TAU * f64::from(w) - c.mean_theta,
                    v.rho - c.mean_rho,
                    c.cov.tt,
                    c.cov.tr,
                    c.cov.rr,
                )
            })
            .sum()
    }

    /// Composite 2D Simpson quadrature; nx and ny must be even.
    fn simpson2d(f: impl Fn(f64, f64) -> f64, ax: f64, bx: f64, nx: usize, ay: f64, by: f64, ny: usize) -> f64 {
        let wx = |i: usize| -> f64 {
            if i == 0 || i == nx {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        let wy = |j: usize| -> f64 {
            if j == 0 || j == ny {
                1.0
            } else if j % 2 == 1 {
                4.0
            } else {
                2.0
            }
        };
        let hx = (bx - ax) / nx as f64;
        let hy = (by - ay) / ny as f64;
        let mut total = 0.0;
        for i in 0..=nx {
            let x = ax + hx * i as f64;
            for j in 0..=ny {
                let y = ay + hy * j as f64;
                total += wx(i) * wy(j) * f(x, y);
            }
        }
        total * hx * hy / 9.0
    }

    fn component(weight: f64, mt: f64, mr: f64, cov: Cov2) -> SemiWrappedComponent {
        SemiWrappedComponent::new(weight, mt, mr, cov).expect("valid test component")
    }

    // ── angle helpers ────────────────────────────────────────────────────

    #[test]
    fn wrap_angle_known_values() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0).unwrap(), -PI / 2.0, epsilon = 1e-12);
        assert_eq!(wrap_angle(-PI).unwrap(), -PI);
        // The interval is half-open: +pi lands on -pi.
        assert_eq!(wrap_angle(PI).unwrap(), -PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn angular_diff_known_values() {
        assert_eq!(angular_diff(0.1, 0.1).unwrap(), 0.0);
        // -3 - 3 = -6 wraps forward across the seam to 2*pi - 6.
        assert_abs_diff_eq!(angular_diff(-3.0, 3.0).unwrap(), TAU - 6.0, epsilon = 1e-12);
        // Antipodal difference maps to the half-open boundary -pi.
        assert_eq!(angular_diff(PI / 2.0, -PI / 2.0).unwrap(), -PI);
        assert!(angular_diff(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn kernel_known_values() {
        assert_eq!(kernel(0.0, 1.0).unwrap(), 1.0);
        assert_relative_eq!(kernel(PI, 1.0).unwrap(), 5.172318620381234e-5, max_relative = 1e-8);
        assert_relative_eq!(kernel(1.0, 10.0).unwrap(), 4.5399929762e-5, max_relative = 1e-8);
        assert!(kernel(1.0, 0.0).is_err(), "beta must be strictly positive");
        assert!(kernel(1.0, -2.0).is_err());
        assert!(kernel(f64::NAN, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn wrap_is_idempotent_and_in_range(a in -1e6f64..1e6) {
            let w = wrap_angle(a).unwrap();
            prop_assert!((-PI..PI).contains(&w), "wrap({a}) = {w} out of range");
            prop_assert_eq!(wrap_angle(w).unwrap(), w);
        }

        #[test]
        fn angular_diff_is_antisymmetric(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let d = angular_diff(a, b).unwrap();
            // The boundary case |d| = pi maps both signs onto -pi, so skip it.
            prop_assume!((d.abs() - PI).abs() > 1e-9);
            prop_assert!((angular_diff(b, a).unwrap() + d).abs() < 1e-12);
        }

        #[test]
        fn kernel_decays_in_both_arguments(x in 0.01f64..3.0, beta in 0.01f64..100.0) {
            // Large beta*x^2 legitimately underflows to exactly 0.0, so the
            // lower bound is inclusive and decay is non-strict.
            let k = kernel(x, beta).unwrap();
            prop_assert!((0.0..1.0).contains(&k));
            prop_assert!(kernel(x * 1.5, beta).unwrap() <= k, "larger distance must decay");
            prop_assert!(kernel(x, beta * 1.5).unwrap() <= k, "larger beta must decay");
            if k > 0.0 {
                prop_assert!(kernel(x * 1.5, beta).unwrap() < k);
            }
        }
    }

    // ── covariance algebra ───────────────────────────────────────────────

    #[test]
    fn precision_matches_direct_inverse() {
        let cov = Cov2 { tt: 0.09, tr: 0.02, rr: 0.04 };
        let p = cov.precision().unwrap();
        // Quadratic form against the longhand inverse.
        let q = p.quad_form(0.3, -0.1);
        let det = cov.det();
        let expected = (cov.rr * 0.09 - 2.0 * cov.tr * 0.3 * -0.1 + cov.tt * 0.01) / det;
        assert_relative_eq!(q, expected, max_relative = 1e-12);
    }

    #[test]
    fn non_spd_covariance_is_rejected() {
        assert!(Cov2 { tt: 1.0, tr: 2.0, rr: 1.0 }.precision().is_err());
        assert!(Cov2 { tt: -1.0, tr: 0.0, rr: 1.0 }.cholesky().is_err());
        assert!(SemiWrappedComponent::new(1.0, 0.0, 1.0, Cov2::diagonal(0.0, 1.0)).is_err());
    }

    #[test]
    fn eigen_floor_preserves_healthy_and_lifts_degenerate() {
        let healthy = Cov2 { tt: 0.09, tr: 0.02, rr: 0.04 };
        assert_eq!(healthy.eigen_floored(1e-4), healthy);

        let degenerate = Cov2 { tt: 1e-9, tr: 0.0, rr: 0.5 };
        let lifted = degenerate.eigen_floored(1e-4);
        assert!(lifted.is_spd());
        assert!(lifted.tt >= 1e-4);

        // Correlated near-singular case: floor must keep the matrix SPD.
        let skew = Cov2 { tt: 0.1, tr: 0.0999, rr: 0.1 };
        let lifted = skew.eigen_floored(1e-2);
        assert!(lifted.is_spd());
        let mid = 0.5 * (lifted.tt + lifted.rr);
        let rad = (0.25 * (lifted.tt - lifted.rr).powi(2) + lifted.tr * lifted.tr).sqrt();
        assert!(mid - rad >= 1e-2 - 1e-12, "small eigenvalue must reach the floor");
    }

    // ── densities ────────────────────────────────────────────────────────

    #[test]
    fn swn_pdf_peak_value() {
        let c = component(1.0, 0.0, 1.0, Cov2::diagonal(0.1, 0.1));
        let peak = swn_pdf(&c, Velocity { theta: 0.0, rho: 1.0 });
        // 1 / (2 pi sqrt(det)) with negligible wrap contributions.
        assert_relative_eq!(peak, 1.5915494309189535, max_relative = 1e-9);
    }

    #[test]
    fn swn_pdf_antipodal_point_sums_two_windings() {
        let c = component(1.0, 0.0, 1.0, Cov2::diagonal(0.1, 0.1));
        let v = Velocity { theta: PI, rho: 1.0 };
        let got = swn_pdf(&c, v);
        // theta = pi sits exactly between the w = 0 and w = -1 images, so
        // both contribute the same (vanishing) mass.
        let single = bvn_density(PI, 0.0, 0.1, 0.0, 0.1);
        assert_relative_eq!(got, 2.0 * single, max_relative = 1e-9);
        assert!(got < 1e-20, "mass at 10 sigma should be negligible, got {got}");
    }

    #[test]
    fn swn_pdf_matches_oracle_across_the_cylinder() {
        let c = component(1.0, 2.8, 1.2, Cov2 { tt: 0.2, tr: 0.03, rr: 0.05 });
        for &theta in &[-3.1, -1.0, 0.0, 2.5, 3.0] {
            for &rho in &[0.8, 1.2, 1.6] {
                let v = Velocity { theta, rho };
                assert_relative_eq!(
                    swn_pdf(&c, v),
                    swn_oracle(&c, v, 1),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn swn_log_pdf_agrees_with_linear_density() {
        let c = component(1.0, -3.0, 0.9, Cov2 { tt: 0.15, tr: -0.02, rr: 0.08 });
        let prec = c.cov.precision().unwrap();
        for &theta in &[-3.14, -0.5, 1.0, 3.0] {
            let v = Velocity { theta, rho: 1.1 };
            assert_relative_eq!(
                swn_log_pdf(&prec, c.mean_theta, c.mean_rho, v).exp(),
                swn_pdf(&c, v),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn swn_pdf_integrates_to_one() {
        // Diagonal and correlated cases, the second with its mean near the
        // wrap seam so the winding terms matter.
        let cases = [
            component(1.0, 0.0, 1.0, Cov2::diagonal(0.09, 0.04)),
            component(1.0, 2.9, 1.3, Cov2 { tt: 0.09, tr: 0.02, rr: 0.04 }),
        ];
        for c in &cases {
            let sr = c.cov.rr.sqrt();
            let integral = simpson2d(
                |theta, rho| swn_pdf(c, Velocity { theta, rho }),
                -PI,
                PI,
                400,
                c.mean_rho - 8.0 * sr,
                c.mean_rho + 8.0 * sr,
                400,
            );
            assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn swgmm_pdf_is_the_weighted_component_sum() {
        let a = component(0.3, 0.5, 1.0, Cov2::diagonal(0.1, 0.05));
        let b = component(0.7, -2.0, 1.4, Cov2::diagonal(0.2, 0.08));
        let m = Swgmm::new(vec![a, b]).unwrap();
        let v = Velocity { theta: 0.2, rho: 1.1 };
        assert_relative_eq!(
            swgmm_pdf(&m, v),
            0.3 * swn_pdf(&a, v) + 0.7 * swn_pdf(&b, v),
            max_relative = 1e-12
        );
    }

    #[test]
    fn mixture_validation_rejects_bad_weights() {
        let a = component(0.3, 0.5, 1.0, Cov2::diagonal(0.1, 0.05));
        assert!(Swgmm::new(vec![]).is_err());
        assert!(Swgmm::new(vec![a, a]).is_err(), "weights 0.6 must be rejected");
    }

    // ── sampling ─────────────────────────────────────────────────────────

    #[test]
    fn sampler_is_deterministic_per_stream() {
        let m = Swgmm::new(vec![component(1.0, 0.3, 1.2, Cov2::diagonal(0.09, 0.01))]).unwrap();
        let a: Vec<Velocity> = {
            let mut rng = stream_rng(11, 4);
            (0..16).map(|_| swgmm_sample(&m, &mut rng)).collect()
        };
        let b: Vec<Velocity> = {
            let mut rng = stream_rng(11, 4);
            (0..16).map(|_| swgmm_sample(&m, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sampler_recovers_component_moments() {
        let m = Swgmm::new(vec![component(1.0, 2.0, 1.3, Cov2::diagonal(0.09, 0.01))]).unwrap();
        let mut rng = stream_rng(5, 0);
        let n = 100_000;
        let (mut sx, mut sy, mut sr) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let v = swgmm_sample(&m, &mut rng);
            sx += v.theta.cos();
            sy += v.theta.sin();
            sr += v.rho;
        }
        let circ_mean = (sy / n as f64).atan2(sx / n as f64);
        assert_abs_diff_eq!(circ_mean, 2.0, epsilon = 5e-3);
        assert_abs_diff_eq!(sr / n as f64, 1.3, epsilon = 2e-3);
    }

    #[test]
    fn sampler_respects_component_weights() {
        let a = component(0.3, -2.0, 0.8, Cov2::diagonal(0.01, 0.01));
        let b = component(0.7, 2.0, 1.6, Cov2::diagonal(0.01, 0.01));
        let m = Swgmm::new(vec![a, b]).unwrap();
        let mut rng = stream_rng(9, 1);
        let n = 10_000;
        let hits_a = (0..n)
            .filter(|_| {
                let v = swgmm_sample(&m, &mut rng);
                ang_diff(v.theta, -2.0).abs() < 1.0
            })
            .count();
        let frac = hits_a as f64 / n as f64;
        assert!((frac - 0.3).abs() < 0.02, "component A frequency {frac}, want 0.30 +- 0.02");
    }

    #[test]
    fn sampler_matches_density_chi_squared() {
        // Goodness of fit on a 36 x 20 (theta, rho) grid with 1e5 draws at
        // significance 0.001. Expected counts come from per-cell quadrature
        // of the density; sparse cells are pooled so the chi-squared
        // approximation stays valid.
        let m = Swgmm::new(vec![
            component(0.4, 2.9, 1.0, Cov2::diagonal(0.09, 0.01)),
            component(0.6, -1.2, 1.5, Cov2 { tt: 0.16, tr: 0.02, rr: 0.02 }),
        ])
        .unwrap();
        let n = 100_000usize;
        let (rho_lo, rho_hi) = (0.4, 2.2);
        let (nt, nr) = (36usize, 20usize);
        let (dt, dr) = (TAU / nt as f64, (rho_hi - rho_lo) / nr as f64);

        let mut observed = vec![0.0f64; nt * nr];
        let mut observed_outside = 0.0f64;
        let mut rng = stream_rng(2024, 0);
        for _ in 0..n {
            let v = swgmm_sample(&m, &mut rng);
            let it = ((v.theta + PI) / dt).floor() as usize;
            let ir = (v.rho - rho_lo) / dr;
            if ir < 0.0 || ir >= nr as f64 {
                observed_outside += 1.0;
                continue;
            }
            observed[it.min(nt - 1) * nr + ir as usize] += 1.0;
        }

        // 4x4 midpoint quadrature per cell is accurate to ~1e-4 relative for
        // these widths, far below the chi-squared noise floor.
        let mut expected = vec![0.0f64; nt * nr];
        let sub = 4;
        for it in 0..nt {
            for ir in 0..nr {
                let mut mass = 0.0;
                for a in 0..sub {
                    for b in 0..sub {
                        let theta = -PI + (it as f64 + (a as f64 + 0.5) / sub as f64) * dt;
                        let rho = rho_lo + (ir as f64 + (b as f64 + 0.5) / sub as f64) * dr;
                        mass += swgmm_pdf(&m, Velocity { theta, rho });
                    }
                }
                expected[it * nr + ir] = mass * dt * dr / (sub * sub) as f64 * n as f64;
            }
        }
        let expected_outside = n as f64 - expected.iter().sum::<f64>();

        let mut chi2 = 0.0;
        let mut bins = 0usize;
        let (mut pooled_obs, mut pooled_exp) = (observed_outside, expected_outside.max(0.0));
        for i in 0..nt * nr {
            if expected[i] >= 5.0 {
                chi2 += (observed[i] - expected[i]).powi(2) / expected[i];
                bins += 1;
            } else {
                pooled_obs += observed[i];
                pooled_exp += expected[i];
            }
        }
        if pooled_exp > 0.0 {
            chi2 += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
            bins += 1;
        }

        let dof = (bins - 1) as f64;
        let critical = chi_squared_crit_999(dof);
        assert!(
            chi2 < critical,
            "sampler GOF failed: chi2 = {chi2:.1} over {bins} bins, critical(0.001) = {critical:.1}"
        );
    }

    #[test]
    fn sampler_clamps_speed_at_zero() {
        let m = Swgmm::new(vec![component(1.0, 0.0, 0.05, Cov2::diagonal(0.01, 0.04))]).unwrap();
        let mut rng = stream_rng(3, 0);
        let mut saw_zero = false;
        for _ in 0..2_000 {
            let v = swgmm_sample(&m, &mut rng);
            assert!(v.rho >= 0.0, "speed must never be negative");
            assert!((-PI..PI).contains(&v.theta), "heading must be wrapped");
            saw_zero |= v.rho == 0.0;
        }
        assert!(saw_zero, "mean near zero should clamp some draws");
    }
}
