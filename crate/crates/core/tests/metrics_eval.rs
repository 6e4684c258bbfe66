//! FSC, resolution, volume-SNR, and pose-error-distribution tests.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cryojoint::geometry::{EulerAngles, InPlaneShift, Pose};
use cryojoint::metrics::{
    fsc, pose_error_pdf, resolution_at_threshold, volume_snr, FscCurve, PoseComponent,
    DEFAULT_EPS_R,
};

fn rand3(n: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((n, n, n), |_| rng.gen_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// fsc

#[test]
fn self_correlation_is_one_on_every_shell() {
    let v = rand3(16, 1);
    let curve = fsc(&v, &v, DEFAULT_EPS_R).unwrap();
    assert!(!curve.values.is_empty());
    assert!(curve.empty_shells.is_empty());
    for (s, val) in curve.values.iter().enumerate() {
        assert!((val - 1.0).abs() <= 1e-9, "shell {s}: {val}");
    }
}

#[test]
fn negated_volume_gives_minus_one() {
    let v = rand3(16, 2);
    let neg = v.mapv(|x| -x);
    let curve = fsc(&v, &neg, DEFAULT_EPS_R).unwrap();
    for (s, val) in curve.values.iter().enumerate() {
        assert!((val + 1.0).abs() <= 1e-9, "shell {s}: {val}");
    }
}

#[test]
fn fsc_is_symmetric_and_scale_invariant() {
    let a = rand3(12, 3);
    let b = rand3(12, 4);
    let ab = fsc(&a, &b, DEFAULT_EPS_R).unwrap();
    let ba = fsc(&b, &a, DEFAULT_EPS_R).unwrap();
    let scaled = fsc(&a.mapv(|x| 3.7 * x), &b.mapv(|x| 0.2 * x), DEFAULT_EPS_R).unwrap();
    for s in 0..ab.values.len() {
        assert!((ab.values[s] - ba.values[s]).abs() <= 1e-12, "symmetry shell {s}");
        assert!(
            (ab.values[s] - scaled.values[s]).abs() <= 1e-9,
            "scale invariance shell {s}"
        );
    }
}

#[test]
fn white_noise_volumes_mostly_decorrelate() {
    let n = 32;
    let a = rand3(n, 5);
    let b = rand3(n, 6);
    let curve = fsc(&a, &b, DEFAULT_EPS_R).unwrap();
    // Count lattice points per shell to set the statistical bound 3/sqrt(N_s).
    let mut counts = vec![0usize; n / 2 + 1];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let sgn = |i: usize| if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                let r = (sgn(i).powi(2) + sgn(j).powi(2) + sgn(k).powi(2)).sqrt();
                let s = r.round() as usize;
                if s >= 1 && s <= n / 2 && (r - s as f64).abs() <= DEFAULT_EPS_R {
                    counts[s] += 1;
                }
            }
        }
    }
    let exceeding = curve
        .values
        .iter()
        .enumerate()
        .filter(|(s, v)| v.abs() > 3.0 / (counts[s + 1] as f64).sqrt())
        .count();
    let frac = exceeding as f64 / curve.values.len() as f64;
    assert!(frac < 0.05, "{exceeding} of {} shells exceed", curve.values.len());
}

#[test]
fn fsc_rejects_shape_mismatch() {
    let a = rand3(8, 7);
    let b = rand3(12, 8);
    assert!(fsc(&a, &b, DEFAULT_EPS_R).is_err());
}

// ---------------------------------------------------------------------------
// resolution_at_threshold

fn curve_from(values: Vec<f64>, n: usize) -> FscCurve {
    FscCurve {
        radii: (1..=values.len()).map(|s| s as f64 / n as f64).collect(),
        values,
        eps_r: DEFAULT_EPS_R,
        empty_shells: vec![],
    }
}

#[test]
fn all_ones_curve_reports_nyquist() {
    let curve = curve_from(vec![1.0; 16], 32);
    assert_eq!(resolution_at_threshold(&curve, 0.5), 0.5);
}

#[test]
fn step_curve_interpolates_to_the_midpoint() {
    // 1.0 on shells 1..=9, 0.0 from shell 10 on; crossing 0.5 lands halfway.
    let mut values = vec![1.0; 16];
    for v in values.iter_mut().skip(9) {
        *v = 0.0;
    }
    let curve = curve_from(values, 32);
    let rc = resolution_at_threshold(&curve, 0.5);
    let expected = 0.5 * (9.0 / 32.0 + 10.0 / 32.0);
    assert!((rc - expected).abs() <= 1e-12, "{rc} vs {expected}");
}

#[test]
fn linear_ramp_crosses_at_half_range() {
    let n = 32;
    let shells = 16;
    let values: Vec<f64> = (1..=shells).map(|s| 1.0 - s as f64 / shells as f64).collect();
    let curve = curve_from(values, n);
    let rc = resolution_at_threshold(&curve, 0.5);
    let expected = 0.5 * shells as f64 / n as f64;
    let step = 1.0 / n as f64;
    assert!((rc - expected).abs() <= step, "{rc} vs {expected}");
}

#[test]
fn curve_starting_below_threshold_reports_zero() {
    let curve = curve_from(vec![0.1, 0.05, 0.01], 8);
    assert_eq!(resolution_at_threshold(&curve, 0.5), 0.0);
}

#[test]
fn larger_curves_never_resolve_worse() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let base: Vec<f64> = (0..16).map(|_| rng.gen_range(-0.5..1.0)).collect();
        let boosted: Vec<f64> = base
            .iter()
            .map(|v| (v + rng.gen_range(0.0..0.3)).min(1.0))
            .collect();
        let rc_base = resolution_at_threshold(&curve_from(base, 32), 0.5);
        let rc_boost = resolution_at_threshold(&curve_from(boosted, 32), 0.5);
        assert!(rc_boost >= rc_base - 1e-12, "{rc_boost} < {rc_base}");
    }
}

// ---------------------------------------------------------------------------
// volume_snr

#[test]
fn identical_volumes_give_infinite_snr() {
    let v = rand3(8, 10);
    assert_eq!(volume_snr(&v, &v).unwrap(), f64::INFINITY);
}

#[test]
fn zero_reconstruction_gives_zero_db() {
    let v = rand3(8, 11);
    let zero = Array3::<f64>::zeros((8, 8, 8));
    assert!(volume_snr(&v, &zero).unwrap().abs() <= 1e-12);
}

#[test]
fn tenth_norm_error_gives_twenty_db() {
    let v = rand3(8, 12);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let delta = rand3(8, 13);
    let dnorm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rec = &v + &delta.mapv(|x| x * norm / (10.0 * dnorm));
    let snr = volume_snr(&v, &rec).unwrap();
    assert!((snr - 20.0).abs() <= 1e-9, "{snr}");
}

// ---------------------------------------------------------------------------
// pose_error_pdf

fn poses_from(angles: &[(f64, f64, f64)]) -> Vec<Pose> {
    angles
        .iter()
        .map(|&(a, b, c)| Pose::new(EulerAngles::new(a, b, c), InPlaneShift::default()))
        .collect()
}

#[test]
fn exact_poses_put_all_mass_in_the_zero_bin() {
    let poses = poses_from(&[(0.3, 1.0, 2.0), (1.2, 0.5, 4.0), (5.0, 2.0, 0.1)]);
    for comp in PoseComponent::ALL {
        let h = pose_error_pdf(&poses, &poses, comp, 11, false).unwrap();
        let total: f64 = h.density.iter().map(|d| d * h.bin_width()).sum();
        assert!((total - 1.0).abs() <= 1e-9);
        // All mass in the bin containing zero.
        let zero_bin = h
            .edges
            .windows(2)
            .position(|w| w[0] <= 0.0 && 0.0 < w[1])
            .unwrap();
        for (i, d) in h.density.iter().enumerate() {
            if i == zero_bin {
                assert!(*d > 0.0);
            } else {
                assert_eq!(*d, 0.0, "bin {i}");
            }
        }
    }
}

#[test]
fn constant_offset_shows_as_a_spike_at_the_offset() {
    let truth = poses_from(&[(0.3, 1.0, 2.0), (1.2, 0.5, 4.0), (5.0, 2.0, 0.1)]);
    let est: Vec<Pose> = truth
        .iter()
        .map(|p| {
            Pose::new(
                EulerAngles {
                    theta1: p.angles.theta1 - 0.1,
                    ..p.angles
                },
                p.shift,
            )
        })
        .collect();
    let h = pose_error_pdf(&truth, &est, PoseComponent::Theta1, 21, false).unwrap();
    // Mass concentrated where the error is +0.1.
    let spike = h
        .edges
        .windows(2)
        .position(|w| w[0] <= 0.1 && 0.1 < w[1])
        .unwrap();
    for (i, d) in h.density.iter().enumerate() {
        assert_eq!(*d > 0.0, i == spike, "bin {i}");
    }
}

#[test]
fn uniform_perturbation_looks_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let e_theta = 0.2;
    let p = 4000;
    let truth: Vec<Pose> = (0..p)
        .map(|_| {
            Pose::new(
                EulerAngles::new(
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.5..std::f64::consts::PI - 0.5),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ),
                InPlaneShift::default(),
            )
        })
        .collect();
    let est: Vec<Pose> = truth
        .iter()
        .map(|t| {
            Pose::new(
                EulerAngles {
                    theta1: t.angles.theta1 + rng.gen_range(-e_theta..e_theta),
                    ..t.angles
                },
                t.shift,
            )
        })
        .collect();
    let bins = 10;
    let h = pose_error_pdf(&truth, &est, PoseComponent::Theta1, bins, false).unwrap();
    // Chi-square against the uniform density over the observed support.
    let expected = p as f64 / bins as f64;
    let chi2: f64 = h
        .density
        .iter()
        .map(|d| {
            let count = d * h.bin_width() * p as f64;
            (count - expected).powi(2) / expected
        })
        .sum();
    // 9 degrees of freedom; chi2 < 21.7 corresponds to p > 0.01.
    assert!(chi2 < 21.7, "chi-square {chi2}");
}

#[test]
fn angle_errors_wrap_across_the_circle() {
    // truth at 0.05 rad, estimate at 2pi - 0.05: the wrapped error is +0.1.
    let truth = poses_from(&[(0.05, 1.0, 1.0)]);
    let est = poses_from(&[(std::f64::consts::TAU - 0.05, 1.0, 1.0)]);
    let h = pose_error_pdf(&truth, &est, PoseComponent::Theta1, 5, false).unwrap();
    let mean: f64 = h
        .density
        .iter()
        .enumerate()
        .map(|(i, d)| d * h.bin_width() * (h.edges[i] + 0.5 * h.bin_width()))
        .sum();
    assert!((mean - 0.1).abs() < 0.05, "wrapped mean {mean}");
}
