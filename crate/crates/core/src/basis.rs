//! Kaiser-Bessel window function (KBWF) basis: the generating function, its
//! closed-form X-ray transform, and the transform's gradient.

use serde::{Deserialize, Serialize};

use crate::bessel::{bessel_i, bessel_i_half};
use crate::error::CryoError;

/// Parameters of the KBWF generating function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KbwfParams {
    /// Support radius, in object-grid units.
    pub a: f64,
    /// Window taper.
    pub alpha: f64,
    /// Order of the modified Bessel window.
    pub m: u32,
}

impl KbwfParams {
    /// The parameter set used throughout: a = 4, alpha = 19, m = 2.
    pub fn new(a: f64, alpha: f64, m: u32) -> Result<Self, CryoError> {
        if !(a > 0.0) || !(alpha > 0.0) {
            return Err(CryoError::Config(format!(
                "KBWF requires a > 0 and alpha > 0, got a = {a}, alpha = {alpha}"
            )));
        }
        if m < 1 {
            // The X-ray gradient needs I_{m-1/2}; m = 0 puts the boundary
            // behavior on the growing branch, so it is rejected outright.
            return Err(CryoError::Config(
                "KBWF order m must be >= 1 (gradient uses I_{m-1/2})".into(),
            ));
        }
        Ok(KbwfParams { a, alpha, m })
    }

    /// beta_a(r) = sqrt(1 - (r/a)^2), the window argument.
    #[inline]
    fn beta(&self, r: f64) -> f64 {
        (1.0 - (r / self.a).powi(2)).max(0.0).sqrt()
    }

    /// Normalization A = sqrt(2 pi / alpha) / I_m(alpha) of the X-ray transform.
    fn xray_norm(&self) -> f64 {
        (2.0 * std::f64::consts::PI / self.alpha).sqrt() / bessel_i(self.m, self.alpha)
    }

    /// phi(r): the radial KBWF profile. Zero for r >= a.
    pub fn value(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        if r >= self.a {
            return 0.0;
        }
        let b = self.beta(r);
        b.powi(self.m as i32) * bessel_i(self.m, self.alpha * b) / bessel_i(self.m, self.alpha)
    }

    /// X-ray transform of phi evaluated at the 2D point `y`; depends only on
    /// the norm of `y` because phi is isotropic. Zero for |y| >= a.
    pub fn xray(&self, y: [f64; 2]) -> f64 {
        self.xray_radial(y[0].hypot(y[1]))
    }

    /// X-ray transform as a function of the radial distance.
    pub fn xray_radial(&self, r: f64) -> f64 {
        if r >= self.a {
            return 0.0;
        }
        let b = self.beta(r);
        self.a
            * self.xray_norm()
            * b.powf(self.m as f64 + 0.5)
            * bessel_i_half(self.m as i32, self.alpha * b)
    }

    /// Gradient of the X-ray transform at `y`. Zero outside the open support.
    pub fn xray_gradient(&self, y: [f64; 2]) -> [f64; 2] {
        let r = y[0].hypot(y[1]);
        if r >= self.a {
            return [0.0, 0.0];
        }
        let b = self.beta(r);
        let scale = -self.alpha * self.xray_norm() / self.a
            * b.powf(self.m as f64 - 0.5)
            * bessel_i_half(self.m as i32 - 1, self.alpha * b);
        [scale * y[0], scale * y[1]]
    }
}

impl Default for KbwfParams {
    fn default() -> Self {
        KbwfParams {
            a: 4.0,
            alpha: 19.0,
            m: 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults() -> KbwfParams {
        KbwfParams::default()
    }

    use crate::testutil::adaptive_simpson;

    /// Line-integral oracle for the X-ray transform at radius r.
    fn xray_by_quadrature(p: &KbwfParams, r: f64) -> f64 {
        if r >= p.a {
            return 0.0;
        }
        let zmax = (p.a * p.a - r * r).sqrt();
        adaptive_simpson(&|z: f64| p.value((z * z + r * r).sqrt()), -zmax, zmax, 1e-12)
    }

    #[test]
    fn value_endpoints() {
        let p = defaults();
        assert_eq!(p.value(0.0), 1.0);
        assert_eq!(p.value(p.a), 0.0);
        assert_eq!(p.value(p.a + 1.0), 0.0);
    }

    #[test]
    fn value_at_half_support_matches_series() {
        let p = defaults();
        let b: f64 = 0.75f64.sqrt();
        // Independent high-precision route: direct series ratio.
        let want = b.powi(2) * crate::bessel::bessel_i(2, 19.0 * b) / crate::bessel::bessel_i(2, 19.0);
        assert!((p.value(2.0) - want).abs() < 1e-12);
    }

    #[test]
    fn xray_matches_quadrature_at_origin() {
        let p = defaults();
        let want = xray_by_quadrature(&p, 0.0);
        assert!((p.xray([0.0, 0.0]) - want).abs() < 1e-10);
    }

    #[test]
    fn xray_matches_quadrature_on_radii() {
        let p = defaults();
        for i in 0..20 {
            let r = p.a * (i as f64 + 0.5) / 21.0;
            let want = xray_by_quadrature(&p, r);
            let got = p.xray_radial(r);
            assert!(
                (got - want).abs() < 1e-8,
                "r = {r}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn xray_zero_at_and_beyond_support() {
        let p = defaults();
        assert_eq!(p.xray([p.a, 0.0]), 0.0);
        assert_eq!(p.xray([3.0, 3.0]), 0.0);
        // Continuity: approaches 0 from inside.
        assert!(p.xray([p.a - 1e-9, 0.0]).abs() < 1e-6);
    }

    #[test]
    fn xray_is_rotationally_symmetric() {
        let p = defaults();
        let r = 1.7;
        let v0 = p.xray([r, 0.0]);
        for i in 1..8 {
            let t = i as f64;
            let v = p.xray([r * t.cos(), r * t.sin()]);
            assert!((v - v0).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_zero_at_origin_and_boundary() {
        let p = defaults();
        assert_eq!(p.xray_gradient([0.0, 0.0]), [0.0, 0.0]);
        // Approaching |y| = a from inside the gradient vanishes for m = 2.
        let g = p.xray_gradient([p.a - 1e-9, 0.0]);
        assert!(g[0].abs() < 1e-3 && g[1] == 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = defaults();
        let h = 1e-6;
        for i in 0..40 {
            // Dense radial sample of (0, a(1 - 1e-3)), off-axis direction.
            let r = p.a * (1.0 - 1e-3) * (i as f64 + 0.5) / 40.0;
            let (c, s) = (0.6, 0.8);
            let y = [r * c, r * s];
            let g = p.xray_gradient(y);
            for axis in 0..2 {
                let mut yp = y;
                let mut ym = y;
                yp[axis] += h;
                ym[axis] -= h;
                let fd = (p.xray(yp) - p.xray(ym)) / (2.0 * h);
                let scale = g[axis].abs().max(1e-6);
                assert!(
                    (g[axis] - fd).abs() / scale < 1e-6,
                    "r = {r}, axis {axis}: analytic {}, fd {fd}",
                    g[axis]
                );
            }
        }
    }

    #[test]
    fn rejects_m_zero() {
        assert!(KbwfParams::new(4.0, 19.0, 0).is_err());
        assert!(KbwfParams::new(-1.0, 19.0, 2).is_err());
    }
}
