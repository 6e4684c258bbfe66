//! Euler-angle conventions, the 2x3 orthogonal projector matrix, and its
//! entry-wise derivatives.
//!
//! Angles follow the (rotation, tilt, in-plane) convention with
//! theta1, theta3 in [0, 2pi) and theta2 in [0, pi]. The projector is the
//! closed form
//!
//!   M = | C1C2C3 - S1S3    C3S1 + C1C2S3   -C1S2 |
//!       | -C1S3 - C2C3S1   C1C3 - C2S1S3    S1S2 |
//!
//! with Ci = cos(theta_i), Si = sin(theta_i). Its rows are orthonormal and
//! span the projection plane; the plane itself is invariant under changes of
//! theta1 (the in-plane degree of freedom of this parameterization).

use serde::{Deserialize, Serialize};

use std::f64::consts::{PI, TAU};

/// One projection's orientation, always stored canonicalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
}

/// Continuous in-plane shift, in detector units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InPlaneShift {
    pub t1: f64,
    pub t2: f64,
}

/// A full per-projection pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub angles: EulerAngles,
    pub shift: InPlaneShift,
}

/// 2x3 projector matrix (row-major).
pub type ProjMatrix = [[f64; 3]; 2];

fn wrap_tau(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r == TAU {
        0.0
    } else {
        r
    }
}

impl EulerAngles {
    /// Builds a canonicalized triple from arbitrary real angles.
    pub fn new(theta1: f64, theta2: f64, theta3: f64) -> Self {
        EulerAngles {
            theta1,
            theta2,
            theta3,
        }
        .canonicalized()
    }

    /// Wraps theta1, theta3 mod 2pi and reflects theta2 into [0, pi] using
    /// the ZYZ double-cover identity (t1, -t2, t3) == (t1 - pi, t2, t3 - pi).
    pub fn canonicalized(self) -> Self {
        let mut t1 = self.theta1;
        let mut t3 = self.theta3;
        // Bring theta2 into (-pi, pi] first.
        let mut t2 = self.theta2.rem_euclid(TAU);
        if t2 > PI {
            t2 -= TAU;
        }
        if t2 < 0.0 {
            t2 = -t2;
            t1 -= PI;
            t3 -= PI;
        }
        EulerAngles {
            theta1: wrap_tau(t1),
            theta2: t2,
            theta3: wrap_tau(t3),
        }
    }

    /// Full 3x3 rotation whose first two rows are the projector rows; the
    /// third row is their cross product (the projection direction).
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = projection_matrix(*self);
        let r3 = [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ];
        [m[0], m[1], r3]
    }
}

impl Pose {
    pub fn new(angles: EulerAngles, shift: InPlaneShift) -> Self {
        Pose { angles, shift }
    }

    pub fn identity() -> Self {
        Pose {
            angles: EulerAngles::new(0.0, 0.0, 0.0),
            shift: InPlaneShift::default(),
        }
    }
}

/// The orthogonal projector matrix for a canonicalized orientation.
pub fn projection_matrix(angles: EulerAngles) -> ProjMatrix {
    let (s1, c1) = angles.theta1.sin_cos();
    let (s2, c2) = angles.theta2.sin_cos();
    let (s3, c3) = angles.theta3.sin_cos();
    [
        [c1 * c2 * c3 - s1 * s3, c3 * s1 + c1 * c2 * s3, -c1 * s2],
        [-c1 * s3 - c2 * c3 * s1, c1 * c3 - c2 * s1 * s3, s1 * s2],
    ]
}

/// Entry-wise derivative of the projector with respect to theta_`axis`
/// (axis in {1, 2, 3}).
pub fn projection_matrix_derivative(angles: EulerAngles, axis: u8) -> ProjMatrix {
    let (s1, c1) = angles.theta1.sin_cos();
    let (s2, c2) = angles.theta2.sin_cos();
    let (s3, c3) = angles.theta3.sin_cos();
    match axis {
        1 => [
            [-s1 * c2 * c3 - c1 * s3, c3 * c1 - s1 * c2 * s3, s1 * s2],
            [s1 * s3 - c2 * c3 * c1, -s1 * c3 - c2 * c1 * s3, c1 * s2],
        ],
        2 => [
            [-c1 * s2 * c3, -c1 * s2 * s3, -c1 * c2],
            [s2 * c3 * s1, s2 * s1 * s3, s1 * c2],
        ],
        3 => [
            [-c1 * c2 * s3 - s1 * c3, -s3 * s1 + c1 * c2 * c3, 0.0],
            [-c1 * c3 + c2 * s3 * s1, -c1 * s3 - c2 * s1 * c3, 0.0],
        ],
        _ => panic!("axis must be 1, 2, or 3"),
    }
}

/// Geodesic SO(3) distance between two orientations, in radians.
/// Auxiliary diagnostic; pose errors are otherwise reported component-wise.
pub fn geodesic_distance(a: EulerAngles, b: EulerAngles) -> f64 {
    let ra = a.rotation();
    let rb = b.rotation();
    // Relative rotation C = Ra^T Rb; angle from atan2(|skew(C)|/2, (tr-1)/2),
    // which stays accurate near 0 where acos of the trace loses digits.
    let mut c = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                c[i][j] += ra[k][i] * rb[k][j];
            }
        }
    }
    let tr = c[0][0] + c[1][1] + c[2][2];
    let s = 0.5
        * ((c[2][1] - c[1][2]).powi(2)
            + (c[0][2] - c[2][0]).powi(2)
            + (c[1][0] - c[0][1]).powi(2))
        .sqrt();
    s.atan2((tr - 1.0) / 2.0)
}

/// Recovers a canonicalized Euler triple from a rotation matrix whose rows
/// follow the `EulerAngles::rotation` layout.
pub fn euler_from_rotation(r: &[[f64; 3]; 3]) -> EulerAngles {
    // Third row is (c3 s2, s3 s2, c2); third column is (-c1 s2, s1 s2, c2).
    let c2 = r[2][2].clamp(-1.0, 1.0);
    let s2 = (r[2][0].hypot(r[2][1])).min(1.0);
    let theta2 = s2.atan2(c2);
    if s2 > 1e-9 {
        let theta1 = r[1][2].atan2(-r[0][2]);
        let theta3 = r[2][1].atan2(r[2][0]);
        EulerAngles::new(theta1, theta2, theta3)
    } else {
        // Degenerate tilt: only theta1 + theta3 (or their difference) is
        // determined; put everything into theta1.
        let theta1 = if c2 > 0.0 {
            r[0][1].atan2(r[0][0])
        } else {
            (-r[0][1]).atan2(r[0][0])
        };
        EulerAngles::new(theta1, theta2, 0.0)
    }
}

/// Fits a single global rotation Q minimizing sum_p |R_true,p - Q R_est,p|^2
/// and returns the est orientations composed with Q. Optional pre-step for
/// pose-error reporting; off by default.
pub fn align_poses_global(truth: &[EulerAngles], est: &[EulerAngles]) -> Vec<EulerAngles> {
    assert_eq!(truth.len(), est.len());
    // Cross-covariance sum_p R_true^T R_est; Q^T = polar factor.
    let mut h = [[0.0f64; 3]; 3];
    for (a, b) in truth.iter().zip(est) {
        let ra = a.rotation();
        let rb = b.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += ra[k][i] * rb[k][j];
                }
                h[i][j] += s;
            }
        }
    }
    let q = polar_rotation(&h);
    // R_est' = R_est Q^T aligns est onto truth in the object frame.
    est.iter()
        .map(|e| {
            let re = e.rotation();
            let mut out = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += re[i][k] * q[j][k];
                    }
                    out[i][j] = s;
                }
            }
            euler_from_rotation(&out)
        })
        .collect()
}

/// Nearest rotation to a 3x3 matrix (proper orthogonal Procrustes), via
/// Newton-iterated polar decomposition.
fn polar_rotation(h: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut q = *h;
    // Scale toward unit spectral radius to keep the iteration contracting.
    let norm: f64 = q
        .iter()
        .flat_map(|r| r.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for row in q.iter_mut() {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    for _ in 0..60 {
        let inv_t = match invert3_transpose(&q) {
            Some(m) => m,
            None => break,
        };
        let mut next = [[0.0f64; 3]; 3];
        let mut delta = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = 0.5 * (q[i][j] + inv_t[i][j]);
                delta = delta.max((next[i][j] - q[i][j]).abs());
            }
        }
        q = next;
        if delta < 1e-15 {
            break;
        }
    }
    q
}

fn invert3_transpose(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let c = |a: usize, b: usize, cc: usize, d: usize| m[a][b] * m[cc][d] - m[a][d] * m[cc][b];
    // inv(M)^T = cofactor(M) / det
    Some([
        [c(1, 1, 2, 2) / det, -c(1, 0, 2, 2) / det, c(1, 0, 2, 1) / det],
        [-c(0, 1, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 2, 1) / det],
        [c(0, 1, 1, 2) / det, -c(0, 0, 1, 2) / det, c(0, 0, 1, 1) / det],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_derivative(angles: EulerAngles, axis: u8, h: f64) -> ProjMatrix {
        let mut plus = angles;
        let mut minus = angles;
        match axis {
            1 => {
                plus.theta1 += h;
                minus.theta1 -= h;
            }
            2 => {
                plus.theta2 += h;
                minus.theta2 -= h;
            }
            _ => {
                plus.theta3 += h;
                minus.theta3 -= h;
            }
        }
        let mp = projection_matrix(plus);
        let mm = projection_matrix(minus);
        let mut out = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..3 {
                out[i][j] = (mp[i][j] - mm[i][j]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn identity_pose_matrix() {
        let m = projection_matrix(EulerAngles::new(0.0, 0.0, 0.0));
        assert_eq!(m, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn quarter_turn_theta1() {
        let m = projection_matrix(EulerAngles::new(PI / 2.0, 0.0, 0.0));
        let want = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]];
        for i in 0..2 {
            for j in 0..3 {
                assert!((m[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn derivative_spot_values_at_zero() {
        let zero = EulerAngles::new(0.0, 0.0, 0.0);
        let d2 = projection_matrix_derivative(zero, 2);
        assert_eq!(d2, [[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]);
        let d3 = projection_matrix_derivative(zero, 3);
        assert_eq!(d3, [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]);
    }

    proptest! {
        #[test]
        fn rows_orthonormal(t1 in 0.0..TAU, t2 in 0.0..PI, t3 in 0.0..TAU) {
            let m = projection_matrix(EulerAngles::new(t1, t2, t3));
            let n1: f64 = m[0].iter().map(|v| v * v).sum();
            let n2: f64 = m[1].iter().map(|v| v * v).sum();
            let dot: f64 = (0..3).map(|j| m[0][j] * m[1][j]).sum();
            prop_assert!((n1 - 1.0).abs() < 1e-12);
            prop_assert!((n2 - 1.0).abs() < 1e-12);
            prop_assert!(dot.abs() < 1e-12);
        }

        #[test]
        fn derivative_matches_finite_difference(
            t1 in 0.0..TAU, t2 in 0.05..(PI - 0.05), t3 in 0.0..TAU, axis in 1u8..=3
        ) {
            let angles = EulerAngles::new(t1, t2, t3);
            let d = projection_matrix_derivative(angles, axis);
            let fd = fd_derivative(angles, axis, 1e-6);
            let mmax = projection_matrix(angles)
                .iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
            for i in 0..2 {
                for j in 0..3 {
                    prop_assert!(
                        (d[i][j] - fd[i][j]).abs() < 1e-6 * (1.0 + mmax),
                        "axis {} entry ({},{}) analytic {} fd {}", axis, i, j, d[i][j], fd[i][j]
                    );
                }
            }
        }

        #[test]
        fn canonicalization_idempotent(t1 in -10.0..10.0f64, t2 in -10.0..10.0f64, t3 in -10.0..10.0f64) {
            let a = EulerAngles::new(t1, t2, t3);
            let b = a.canonicalized();
            prop_assert!((a.theta1 - b.theta1).abs() < 1e-12);
            prop_assert!((a.theta2 - b.theta2).abs() < 1e-12);
            prop_assert!((a.theta3 - b.theta3).abs() < 1e-12);
            prop_assert!(a.theta2 >= 0.0 && a.theta2 <= PI);
            prop_assert!(a.theta1 >= 0.0 && a.theta1 < TAU);
            prop_assert!(a.theta3 >= 0.0 && a.theta3 < TAU);
        }

        #[test]
        fn canonicalization_preserves_projector(t1 in -10.0..10.0f64, t2 in -10.0..10.0f64, t3 in -10.0..10.0f64) {
            let raw = EulerAngles { theta1: t1, theta2: t2, theta3: t3 };
            let canon = raw.canonicalized();
            let m_raw = projection_matrix(raw);
            let m_canon = projection_matrix(canon);
            for i in 0..2 {
                for j in 0..3 {
                    prop_assert!((m_raw[i][j] - m_canon[i][j]).abs() < 1e-9);
                }
            }
        }

        // The projection plane is invariant under the in-plane angle of this
        // parameterization (theta1): check equal row spans by projecting each
        // rotated row onto the original span.
        #[test]
        fn in_plane_rotation_preserves_row_span(
            t1 in 0.0..TAU, t2 in 0.1..(PI - 0.1), t3 in 0.0..TAU, delta in -3.0..3.0f64
        ) {
            let m0 = projection_matrix(EulerAngles::new(t1, t2, t3));
            let m1 = projection_matrix(EulerAngles::new(t1 + delta, t2, t3));
            for row in &m1 {
                // residual of row after projection onto span(m0 rows)
                let p0: f64 = (0..3).map(|j| row[j] * m0[0][j]).sum();
                let p1: f64 = (0..3).map(|j| row[j] * m0[1][j]).sum();
                let mut res = 0.0f64;
                for j in 0..3 {
                    let r = row[j] - p0 * m0[0][j] - p1 * m0[1][j];
                    res += r * r;
                }
                prop_assert!(res.sqrt() < 1e-10);
            }
        }

        #[test]
        fn euler_roundtrip_through_rotation(t1 in 0.0..TAU, t2 in 0.05..(PI - 0.05), t3 in 0.0..TAU) {
            let a = EulerAngles::new(t1, t2, t3);
            let b = euler_from_rotation(&a.rotation());
            prop_assert!(geodesic_distance(a, b) < 1e-9);
        }
    }

    #[test]
    fn global_alignment_recovers_rotated_poses() {
        let truth: Vec<EulerAngles> = (0..24)
            .map(|i| {
                EulerAngles::new(0.37 * i as f64, 0.11 * i as f64 + 0.2, 1.3 * i as f64)
            })
            .collect();
        // Apply one fixed object-frame rotation to every pose.
        let q = EulerAngles::new(0.4, 0.3, 1.1).rotation();
        let est: Vec<EulerAngles> = truth
            .iter()
            .map(|e| {
                let re = e.rotation();
                let mut out = [[0.0f64; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        out[i][j] = (0..3).map(|k| re[i][k] * q[k][j]).sum();
                    }
                }
                euler_from_rotation(&out)
            })
            .collect();
        let aligned = align_poses_global(&truth, &est);
        for (t, a) in truth.iter().zip(&aligned) {
            assert!(geodesic_distance(*t, *a) < 1e-6);
        }
    }
}
