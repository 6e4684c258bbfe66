//! Evaluation metrics: Fourier shell correlation, resolution at a threshold,
//! volume SNR, and pose/shift error distributions.

use ndarray::Array3;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::CryoError;
use crate::fft::fft3;
use crate::geometry::{align_poses_global, Pose};

/// Fourier shell correlation curve on the integer frequency lattice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FscCurve {
    /// Shell center radii in cycles per voxel (Nyquist = 0.5).
    pub radii: Vec<f64>,
    /// Real-part normalized cross-correlation per shell, in [-1, 1].
    pub values: Vec<f64>,
    /// Shell half-width in integer-lattice units.
    pub eps_r: f64,
    /// Shell indices skipped because they contained no lattice points.
    pub empty_shells: Vec<usize>,
}

impl FscCurve {
    /// Area under the curve (rectangle rule over shells); used as a scalar
    /// improvement measure that does not quantize to shell indices.
    pub fn area(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }
}

/// Default FSC shell half-width.
pub const DEFAULT_EPS_R: f64 = 0.5;

/// FSC threshold for ground-truth resolution comparisons.
pub const RC_THRESHOLD_TRUTH: f64 = 0.5;

/// Gold-standard FSC threshold for half-map comparisons.
pub const RC_THRESHOLD_HALFMAP: f64 = 0.143;

/// Fourier shell correlation between two equal-shape cubic volumes.
///
/// Shells are centered on integer radii 1..=n/2 of the signed frequency
/// lattice, with half-width `eps_r`; DC is excluded. The complex numerator's
/// real part is reported (the standard cryo-EM convention), which also makes
/// fsc(a, b) = fsc(b, a) exactly.
pub fn fsc(v1: &Array3<f64>, v2: &Array3<f64>, eps_r: f64) -> Result<FscCurve, CryoError> {
    let (n0, n1, n2) = v1.dim();
    if v1.dim() != v2.dim() || n0 != n1 || n1 != n2 {
        return Err(CryoError::Shape(format!(
            "FSC needs equal cubic volumes, got {:?} and {:?}",
            v1.dim(),
            v2.dim()
        )));
    }
    let n = n0;
    let f1 = spectrum(v1);
    let f2 = spectrum(v2);
    let shells = n / 2;
    let mut num = vec![0.0f64; shells + 1];
    let mut e1 = vec![0.0f64; shells + 1];
    let mut e2 = vec![0.0f64; shells + 1];
    let mut counts = vec![0usize; shells + 1];
    for ((i, j, k), a) in f1.indexed_iter() {
        let r = freq_radius(n, i, j, k);
        // Integer shell whose band [s - eps_r, s + eps_r] contains r.
        let s = r.round() as usize;
        if s == 0 || s > shells || (r - s as f64).abs() > eps_r {
            continue;
        }
        let b = f2[(i, j, k)];
        num[s] += (a * b.conj()).re;
        e1[s] += a.norm_sqr();
        e2[s] += b.norm_sqr();
        counts[s] += 1;
    }
    let mut radii = Vec::with_capacity(shells);
    let mut values = Vec::with_capacity(shells);
    let mut empty = Vec::new();
    for s in 1..=shells {
        if counts[s] == 0 {
            empty.push(s);
            continue;
        }
        let denom = (e1[s] * e2[s]).sqrt();
        radii.push(s as f64 / n as f64);
        values.push(if denom > 0.0 { num[s] / denom } else { 0.0 });
    }
    Ok(FscCurve {
        radii,
        values,
        eps_r,
        empty_shells: empty,
    })
}

fn spectrum(v: &Array3<f64>) -> Array3<Complex<f64>> {
    let mut x = v.mapv(|r| Complex::new(r, 0.0));
    fft3(&mut x, false);
    x
}

/// Signed-lattice radius of DFT bin (i, j, k) for size n.
fn freq_radius(n: usize, i: usize, j: usize, k: usize) -> f64 {
    let signed = |i: usize| -> f64 {
        let i = i as isize;
        let n = n as isize;
        (if i <= n / 2 { i } else { i - n }) as f64
    };
    let (a, b, c) = (signed(i), signed(j), signed(k));
    (a * a + b * b + c * c).sqrt()
}

/// First downward crossing of `tau`, linearly interpolated between shells.
/// Never below tau -> Nyquist (0.5 cycles/voxel); starts below -> 0.
pub fn resolution_at_threshold(curve: &FscCurve, tau: f64) -> f64 {
    assert!((-1.0..1.0).contains(&tau), "threshold must be in (-1, 1)");
    if curve.values.is_empty() {
        return 0.0;
    }
    if curve.values[0] < tau {
        return 0.0;
    }
    for w in 0..curve.values.len() - 1 {
        let (a, b) = (curve.values[w], curve.values[w + 1]);
        if a >= tau && b < tau {
            let frac = (a - tau) / (a - b);
            return curve.radii[w] + frac * (curve.radii[w + 1] - curve.radii[w]);
        }
    }
    0.5
}

/// Volume SNR in dB: 20 log10(||gt|| / ||gt - rec||). Returns +infinity when
/// the volumes are identical.
pub fn volume_snr(gt: &Array3<f64>, rec: &Array3<f64>) -> Result<f64, CryoError> {
    if gt.dim() != rec.dim() {
        return Err(CryoError::Shape(format!(
            "volume SNR needs equal shapes, got {:?} and {:?}",
            gt.dim(),
            rec.dim()
        )));
    }
    let gt_norm = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gt_norm == 0.0 {
        return Err(CryoError::Config(
            "volume SNR undefined for a zero ground truth".into(),
        ));
    }
    let err_norm = gt
        .iter()
        .zip(rec.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(if err_norm == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (gt_norm / err_norm).log10()
    })
}

/// One pose coordinate for error reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseComponent {
    Theta1,
    Theta2,
    Theta3,
    T1,
    T2,
}

impl PoseComponent {
    pub const ALL: [PoseComponent; 5] = [
        PoseComponent::Theta1,
        PoseComponent::Theta2,
        PoseComponent::Theta3,
        PoseComponent::T1,
        PoseComponent::T2,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            PoseComponent::Theta1 => "theta1",
            PoseComponent::Theta2 => "theta2",
            PoseComponent::Theta3 => "theta3",
            PoseComponent::T1 => "t1",
            PoseComponent::T2 => "t2",
        }
    }

    pub fn is_angle(&self) -> bool {
        !matches!(self, PoseComponent::T1 | PoseComponent::T2)
    }
}

/// Density-normalized histogram of per-component pose errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorHistogram {
    /// bins + 1 edges, strictly increasing.
    pub edges: Vec<f64>,
    /// Probability density per bin; integrates to 1.
    pub density: Vec<f64>,
    pub component: PoseComponent,
}

impl ErrorHistogram {
    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    /// Standard deviation of the underlying samples approximated from the
    /// histogram (bin centers weighted by density).
    pub fn std_dev(&self) -> f64 {
        let w = self.bin_width();
        let mean: f64 = self
            .density
            .iter()
            .enumerate()
            .map(|(i, d)| d * w * (self.edges[i] + 0.5 * w))
            .sum();
        let var: f64 = self
            .density
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let c = self.edges[i] + 0.5 * w - mean;
                d * w * c * c
            })
            .sum();
        var.sqrt()
    }
}

/// Signed per-component errors true - est, with angle errors wrapped to
/// (-pi, pi]. With `align` set, a single global rotation that best maps the
/// estimated orientations onto the truth is removed first.
pub fn pose_errors(
    true_poses: &[Pose],
    est_poses: &[Pose],
    component: PoseComponent,
    align: bool,
) -> Result<Vec<f64>, CryoError> {
    if true_poses.len() != est_poses.len() {
        return Err(CryoError::Shape(format!(
            "{} true poses vs {} estimated",
            true_poses.len(),
            est_poses.len()
        )));
    }
    let est_angles: Vec<_> = if align {
        let truth: Vec<_> = true_poses.iter().map(|p| p.angles).collect();
        let est: Vec<_> = est_poses.iter().map(|p| p.angles).collect();
        align_poses_global(&truth, &est)
    } else {
        est_poses.iter().map(|p| p.angles).collect()
    };
    let wrap = |x: f64| {
        let r = x.rem_euclid(std::f64::consts::TAU);
        if r > std::f64::consts::PI {
            r - std::f64::consts::TAU
        } else {
            r
        }
    };
    Ok(true_poses
        .iter()
        .zip(est_angles.iter().zip(est_poses.iter()))
        .map(|(t, (ea, ep))| match component {
            PoseComponent::Theta1 => wrap(t.angles.theta1 - ea.theta1),
            PoseComponent::Theta2 => wrap(t.angles.theta2 - ea.theta2),
            PoseComponent::Theta3 => wrap(t.angles.theta3 - ea.theta3),
            PoseComponent::T1 => t.shift.t1 - ep.shift.t1,
            PoseComponent::T2 => t.shift.t2 - ep.shift.t2,
        })
        .collect())
}

/// Histogram of per-component pose errors, normalized to unit integral.
pub fn pose_error_pdf(
    true_poses: &[Pose],
    est_poses: &[Pose],
    component: PoseComponent,
    bins: usize,
    align: bool,
) -> Result<ErrorHistogram, CryoError> {
    if bins == 0 {
        return Err(CryoError::Config("histogram needs at least one bin".into()));
    }
    let errors = pose_errors(true_poses, est_poses, component, align)?;
    // Symmetric range around zero covering all samples; degenerate all-zero
    // error sets still get a nonzero-width zero-centered bin.
    let max_abs = errors.iter().fold(0.0f64, |a, e| a.max(e.abs()));
    let half = (max_abs * (1.0 + 1e-9)).max(1e-6);
    let width = 2.0 * half / bins as f64;
    let mut counts = vec![0usize; bins];
    for e in &errors {
        let idx = (((e + half) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let total = errors.len() as f64;
    Ok(ErrorHistogram {
        edges: (0..=bins).map(|i| -half + i as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / (total * width)).collect(),
        component,
    })
}
