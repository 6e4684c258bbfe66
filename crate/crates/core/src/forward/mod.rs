//! Discrete imaging operator H(theta, t), its adjoint, and the normal
//! operator H^T H applied as a 3D convolution.
//!
//! A volume is expanded in shifted KBWF basis functions on the unit-spaced
//! n^3 grid. One projection with pose (theta, t) samples
//!
//!   g[m] = sum_k c[k] psi(Lambda m - M_theta k - t)
//!
//! on the detector lattice, where M_theta is the 2x3 projector and psi the
//! PSF-blurred X-ray transform of the basis function. The adjoint and the
//! normal operator reduce to interpolated lookups into the precomputed
//! correlation tables (see `tables`).

mod tables;

pub use tables::{PsiTables, DEFAULT_OVERSAMPLING, MAX_TABLE_SAMPLES};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::KbwfParams;
use crate::error::CryoError;
use crate::fft::Conv3;
use crate::geometry::{projection_matrix, EulerAngles, Pose};

/// Square m x m detector lattice with sampling steps Lambda = diag(d1, d2).
/// Pixel (i1, i0) sits at physical coordinates
/// (d1 * (i0 - (m-1)/2), d2 * (i1 - (m-1)/2)): index 0 runs along rows (the
/// second physical axis), index 1 along columns (the first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorGrid {
    pub m: usize,
    pub delta: [f64; 2],
}

impl DetectorGrid {
    pub fn new(m: usize, delta: [f64; 2]) -> Result<Self, CryoError> {
        if m == 0 || !(delta[0] > 0.0) || !(delta[1] > 0.0) {
            return Err(CryoError::Config(format!(
                "detector grid needs m >= 1 and positive steps, got m = {m}, delta = {delta:?}"
            )));
        }
        Ok(DetectorGrid { m, delta })
    }

    /// Unit-spacing square detector.
    pub fn unit(m: usize) -> Self {
        DetectorGrid { m, delta: [1.0, 1.0] }
    }

    /// det(Lambda) = d1 * d2, the pixel area.
    pub fn det_lambda(&self) -> f64 {
        self.delta[0] * self.delta[1]
    }

    /// Center pixel index (fractional for even m).
    pub fn center(&self) -> f64 {
        (self.m as f64 - 1.0) / 2.0
    }

    /// Physical coordinates of pixel (row i1, column i0).
    #[inline]
    pub fn coord(&self, i1: usize, i0: usize) -> [f64; 2] {
        let c = self.center();
        [
            self.delta[0] * (i0 as f64 - c),
            self.delta[1] * (i1 as f64 - c),
        ]
    }
}

/// Point-spread function: either the identity (h = delta) or a real kernel
/// sampled on an odd-sized grid at detector spacing.
#[derive(Debug, Clone)]
pub enum Psf {
    Identity,
    Kernel(Array2<f64>),
}

/// KBWF expansion coefficients of one volume on the centered n^3 grid with
/// unit spacing: grid point k has coordinates k - (n-1)/2 per axis.
#[derive(Debug, Clone)]
pub struct VolumeCoeffs {
    pub c: Array3<f64>,
    pub basis: KbwfParams,
}

impl VolumeCoeffs {
    pub fn zeros(n: usize, basis: KbwfParams) -> Self {
        VolumeCoeffs {
            c: Array3::zeros((n, n, n)),
            basis,
        }
    }

    pub fn new(c: Array3<f64>, basis: KbwfParams) -> Result<Self, CryoError> {
        let (a, b, d) = c.dim();
        if a != b || b != d {
            return Err(CryoError::Shape(format!(
                "coefficient grid must be cubic, got {a}x{b}x{d}"
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(CryoError::NonFinite("volume coefficients".into()));
        }
        Ok(VolumeCoeffs { c, basis })
    }

    pub fn n(&self) -> usize {
        self.c.dim().0
    }

    /// Center grid index per axis (fractional for even n).
    pub fn center(&self) -> f64 {
        (self.n() as f64 - 1.0) / 2.0
    }
}

/// One detector image.
#[derive(Debug, Clone)]
pub struct ProjectionImage {
    pub data: Array2<f64>,
    pub grid: DetectorGrid,
}

impl ProjectionImage {
    pub fn new(data: Array2<f64>, grid: DetectorGrid) -> Result<Self, CryoError> {
        if data.dim() != (grid.m, grid.m) {
            return Err(CryoError::Shape(format!(
                "image shape {:?} does not match detector m = {}",
                data.dim(),
                grid.m
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CryoError::NonFinite("projection image".into()));
        }
        Ok(ProjectionImage { data, grid })
    }
}

/// A set of P projection images with their (estimated or true) poses.
#[derive(Debug, Clone)]
pub struct ProjectionStack {
    pub images: Vec<ProjectionImage>,
    pub poses: Vec<Pose>,
    pub grid: DetectorGrid,
}

impl ProjectionStack {
    pub fn new(images: Vec<ProjectionImage>, poses: Vec<Pose>) -> Result<Self, CryoError> {
        if images.is_empty() {
            return Err(CryoError::Shape("stack must contain at least one image".into()));
        }
        if images.len() != poses.len() {
            return Err(CryoError::Shape(format!(
                "{} images but {} poses",
                images.len(),
                poses.len()
            )));
        }
        let grid = images[0].grid;
        if images.iter().any(|i| i.grid != grid) {
            return Err(CryoError::Shape("images disagree on the detector grid".into()));
        }
        Ok(ProjectionStack { images, poses, grid })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Builds the psi tables, optionally attaching per-image tables for `images`.
pub fn build_psi_tables(
    basis: &KbwfParams,
    psf: &Psf,
    grid: &DetectorGrid,
    images: Option<&ProjectionStack>,
) -> Result<PsiTables, CryoError> {
    let mut t = PsiTables::build(basis, psf, grid, DEFAULT_OVERSAMPLING)?;
    if let Some(stack) = images {
        t.attach_image_tables(stack)?;
    }
    Ok(t)
}

/// Forward-projects one volume under one pose.
pub fn project(
    c: &VolumeCoeffs,
    pose: &Pose,
    tables: &PsiTables,
    grid: &DetectorGrid,
) -> ProjectionImage {
    let mut data = Array2::<f64>::zeros((grid.m, grid.m));
    project_into(c, pose, tables, grid, &mut data);
    ProjectionImage { data, grid: *grid }
}

/// Forward-projects into a preallocated image buffer (overwrites it).
pub fn project_into(
    c: &VolumeCoeffs,
    pose: &Pose,
    tables: &PsiTables,
    grid: &DetectorGrid,
    out: &mut Array2<f64>,
) {
    assert_eq!(out.dim(), (grid.m, grid.m));
    out.fill(0.0);
    let m = projection_matrix(pose.angles);
    let (t1, t2) = (pose.shift.t1, pose.shift.t2);
    let cn = c.center();
    let cm = grid.center();
    let psi = tables.psi();
    // psi table extent per axis bounds the pixel window that can receive a
    // nonzero contribution from one basis function.
    let [r0, r1] = psi.max_query();
    for ((k0, k1, k2), &coeff) in c.c.indexed_iter() {
        if coeff == 0.0 {
            continue;
        }
        let x = [k0 as f64 - cn, k1 as f64 - cn, k2 as f64 - cn];
        let u0 = m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2] + t1;
        let u1 = m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2] + t2;
        // Detector pixels whose coordinate falls inside the psi support.
        let lo0 = (((u0 - r0) / grid.delta[0]) + cm).ceil().max(0.0) as usize;
        let hi0 = ((((u0 + r0) / grid.delta[0]) + cm).floor() as isize).min(grid.m as isize - 1);
        let lo1 = (((u1 - r1) / grid.delta[1]) + cm).ceil().max(0.0) as usize;
        let hi1 = ((((u1 + r1) / grid.delta[1]) + cm).floor() as isize).min(grid.m as isize - 1);
        if hi0 < lo0 as isize || hi1 < lo1 as isize {
            continue;
        }
        for i1 in lo1..=hi1 as usize {
            let y1 = grid.delta[1] * (i1 as f64 - cm) - u1;
            for i0 in lo0..=hi0 as usize {
                let y0 = grid.delta[0] * (i0 as f64 - cm) - u0;
                let v = psi.sample_ch(0, [y0, y1]);
                if v != 0.0 {
                    out[(i1, i0)] += coeff * v;
                }
            }
        }
    }
}

/// Forward-projects a volume under every pose (parallel across poses).
pub fn project_stack(
    c: &VolumeCoeffs,
    poses: &[Pose],
    tables: &PsiTables,
    grid: &DetectorGrid,
) -> ProjectionStack {
    let images: Vec<ProjectionImage> = poses
        .par_iter()
        .map(|pose| project(c, pose, tables, grid))
        .collect();
    ProjectionStack {
        images,
        poses: poses.to_vec(),
        grid: *grid,
    }
}

/// Adjoint of the stacked forward operator:
///
///   [H^T g]_k = (1/det Lambda) * sum_p (g_p * psi_flip)(M_p k + t_p)
///
/// Uses tables attached to `tables` when present, otherwise builds each
/// per-image table transiently. Per-projection contributions are summed in
/// projection order regardless of thread count.
pub fn backproject(stack: &ProjectionStack, tables: &PsiTables, n: usize) -> Array3<f64> {
    let partials: Vec<Array3<f64>> = stack
        .images
        .par_iter()
        .zip(stack.poses.par_iter())
        .enumerate()
        .map(|(p, (img, pose))| {
            let owned;
            let table = match tables.image_table(p) {
                Some(t) => t,
                None => {
                    owned = tables.build_image_table(img);
                    &owned
                }
            };
            backproject_single(table, pose, tables, n)
        })
        .collect();
    let mut out = Array3::<f64>::zeros((n, n, n));
    for part in partials {
        out += &part;
    }
    out
}

/// One projection's adjoint contribution from its g * psi_flip table.
pub fn backproject_single(
    image_table: &crate::interp::Table2,
    pose: &Pose,
    tables: &PsiTables,
    n: usize,
) -> Array3<f64> {
    let m = projection_matrix(pose.angles);
    let cn = (n as f64 - 1.0) / 2.0;
    let inv_det = 1.0 / tables.grid().det_lambda();
    let (t1, t2) = (pose.shift.t1, pose.shift.t2);
    Array3::from_shape_fn((n, n, n), |(k0, k1, k2)| {
        let x = [k0 as f64 - cn, k1 as f64 - cn, k2 as f64 - cn];
        let u0 = m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2] + t1;
        let u1 = m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2] + t2;
        inv_det * image_table.sample_ch(0, [u0, u1])
    })
}

/// Normal-operator kernel on the (2n-1)^3 offset lattice:
///
///   w[d] = (1/det Lambda) * sum_p (psi * psi_flip)(M_p d)
///
/// Independent of the in-plane shifts. Offset accumulation parallelizes over
/// lattice slabs; the pose sum runs in fixed order for reproducibility.
pub fn compute_hth_kernel(poses: &[EulerAngles], tables: &PsiTables, n: usize) -> Array3<f64> {
    let k = 2 * n - 1;
    let mats: Vec<_> = poses.iter().map(|a| projection_matrix(*a)).collect();
    let inv_det = 1.0 / tables.grid().det_lambda();
    let corr = tables.psi_corr();
    let off = n as isize - 1;
    let mut kernel = Array3::<f64>::zeros((k, k, k));
    let slabs: Vec<(usize, Array2<f64>)> = (0..k)
        .into_par_iter()
        .map(|d0| {
            let x0 = d0 as isize - off;
            let mut slab = Array2::<f64>::zeros((k, k));
            for d1 in 0..k {
                let x1 = d1 as isize - off;
                for d2 in 0..k {
                    let x2 = d2 as isize - off;
                    let d = [x0 as f64, x1 as f64, x2 as f64];
                    let mut acc = 0.0;
                    for m in &mats {
                        let u0 = m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2];
                        let u1 = m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2];
                        acc += corr.sample_ch(0, [u0, u1]);
                    }
                    slab[(d1, d2)] = inv_det * acc;
                }
            }
            (d0, slab)
        })
        .collect();
    for (d0, slab) in slabs {
        kernel.index_axis_mut(ndarray::Axis(0), d0).assign(&slab);
    }
    kernel
}

/// The normal operator H^T H as a cached linear 3D convolution.
#[derive(Debug)]
pub struct HthOperator {
    kernel: Array3<f64>,
    conv: Conv3,
}

impl HthOperator {
    pub fn new(kernel: Array3<f64>, n: usize) -> Self {
        let conv = Conv3::new(&kernel, n);
        HthOperator { kernel, conv }
    }

    pub fn from_poses(poses: &[EulerAngles], tables: &PsiTables, n: usize) -> Self {
        Self::new(compute_hth_kernel(poses, tables, n), n)
    }

    pub fn kernel(&self) -> &Array3<f64> {
        &self.kernel
    }

    pub fn n(&self) -> usize {
        self.conv.n()
    }

    pub fn apply(&self, c: &Array3<f64>) -> Result<Array3<f64>, CryoError> {
        apply_hth(c, self)
    }
}

/// Applies the normal operator via zero-padded FFT convolution with `w`.
pub fn apply_hth(c: &Array3<f64>, op: &HthOperator) -> Result<Array3<f64>, CryoError> {
    let n = op.conv.n();
    if c.dim() != (n, n, n) {
        return Err(CryoError::Shape(format!(
            "coefficient shape {:?} does not match operator n = {n}",
            c.dim()
        )));
    }
    Ok(op.conv.apply(c))
}
