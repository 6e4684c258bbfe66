//! Precomputed lookup tables for the forward model.
//!
//! Everything the imaging operator and the pose gradients need reduces to
//! three families of compactly supported 2D profiles, sampled on a fine grid
//! (detector step divided by the oversampling factor) and accessed through
//! cubic interpolation:
//!
//!   - psi = h * P(phi), the PSF-blurred X-ray transform of the basis
//!     function, together with its gradient;
//!   - psi * psi_flip (the autocorrelation of psi) and its gradient, from
//!     which the normal-operator kernel and the quadratic gradient terms are
//!     sampled;
//!   - per-image g_p * psi_flip and its gradient, from which backprojection
//!     and the linear gradient terms are sampled.
//!
//! All three are built by discrete convolutions on the common fine grid, so
//! the detector lattice lands exactly on table samples.

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::basis::KbwfParams;
use crate::error::CryoError;
use crate::fft::conv2_full;
use crate::interp::Table2;

use super::{DetectorGrid, ProjectionImage, ProjectionStack, Psf};

/// Default fine-grid oversampling relative to the detector step.
pub const DEFAULT_OVERSAMPLING: usize = 8;

/// Per-axis sample budget for any one table.
pub const MAX_TABLE_SAMPLES: usize = 8192;

/// Precomputed profile tables shared by projection, backprojection, the
/// normal-operator kernel, and the pose-gradient evaluations.
#[derive(Debug)]
pub struct PsiTables {
    basis: KbwfParams,
    grid: DetectorGrid,
    oversampling: usize,
    /// psi profile; channels [value, d/dy1, d/dy2].
    psi: Table2,
    /// Autocorrelation of psi; channels [value, d/dy1, d/dy2].
    psi_corr: Table2,
    /// Optional per-projection g_p * psi_flip tables (same channel layout).
    image_tables: Vec<Table2>,
}

impl PsiTables {
    /// Builds the psi and psi-autocorrelation tables.
    pub fn build(
        basis: &KbwfParams,
        psf: &Psf,
        grid: &DetectorGrid,
        oversampling: usize,
    ) -> Result<Self, CryoError> {
        if oversampling == 0 {
            return Err(CryoError::Config("oversampling must be >= 1".into()));
        }
        let step = [
            grid.delta[0] / oversampling as f64,
            grid.delta[1] / oversampling as f64,
        ];
        // PSF taps as (weight, fine-grid integer offset) pairs; the kernel is
        // sampled at detector spacing, i.e. every `oversampling` fine samples.
        let taps = psf_taps(psf, grid, oversampling)?;
        let psf_radius = psf_radius(psf, grid);
        let radius = [
            basis.a + psf_radius[0] + step[0],
            basis.a + psf_radius[1] + step[1],
        ];
        let psi = Table2::build(radius, step, 3, MAX_TABLE_SAMPLES, |y, out| {
            out.fill(0.0);
            for (w, off) in &taps {
                let z = [y[0] - off[0], y[1] - off[1]];
                out[0] += w * basis.xray(z);
                let g = basis.xray_gradient(z);
                out[1] += w * g[0];
                out[2] += w * g[1];
            }
        })?;
        let psi_corr = autocorrelation_table(&psi, step)?;
        Ok(PsiTables {
            basis: *basis,
            grid: *grid,
            oversampling,
            psi,
            psi_corr,
            image_tables: Vec::new(),
        })
    }

    pub fn basis(&self) -> &KbwfParams {
        &self.basis
    }

    pub fn grid(&self) -> &DetectorGrid {
        &self.grid
    }

    pub fn oversampling(&self) -> usize {
        self.oversampling
    }

    pub fn fine_step(&self) -> [f64; 2] {
        self.psi.step()
    }

    /// psi profile table (channels [value, d/dy1, d/dy2]).
    pub fn psi(&self) -> &Table2 {
        &self.psi
    }

    /// psi autocorrelation table (channels [value, d/dy1, d/dy2]).
    pub fn psi_corr(&self) -> &Table2 {
        &self.psi_corr
    }

    /// Swaps in a replacement autocorrelation table (test hook for verifying
    /// which terms depend on it).
    #[cfg(test)]
    pub(crate) fn set_psi_corr(&mut self, t: Table2) {
        self.psi_corr = t;
    }

    /// Stored per-projection tables, if any.
    pub fn image_tables(&self) -> &[Table2] {
        &self.image_tables
    }

    pub fn image_table(&self, p: usize) -> Option<&Table2> {
        self.image_tables.get(p)
    }

    /// Builds and stores one table per projection in the stack. For large
    /// stacks prefer `build_image_table` per projection and discard after use.
    pub fn attach_image_tables(&mut self, stack: &ProjectionStack) -> Result<(), CryoError> {
        if stack.grid != self.grid {
            return Err(CryoError::Shape(
                "stack detector grid differs from the tables' grid".into(),
            ));
        }
        self.image_tables = stack
            .images
            .par_iter()
            .map(|img| self.build_image_table(img))
            .collect();
        Ok(())
    }

    /// Computes the g * psi_flip table (and its gradient) for one projection
    /// image:
    ///
    ///   e(y)      = det(Lambda) * sum_m g[m] psi(Lambda m - y)
    ///   grad e(y) = -det(Lambda) * sum_m g[m] (grad psi)(Lambda m - y)
    ///
    /// evaluated exactly on the fine grid: the detector lattice coincides
    /// with every `oversampling`-th fine sample, so the sum is a discrete
    /// convolution of the zero-upsampled image with the flipped psi samples.
    pub fn build_image_table(&self, img: &ProjectionImage) -> Table2 {
        let m = self.grid.m;
        let ov = self.oversampling;
        let det_lambda = self.grid.det_lambda();
        let u_size = ov * (m - 1) + 1;
        let mut upsampled = Array2::<f64>::zeros((u_size, u_size));
        for ((i1, i0), v) in img.data.indexed_iter() {
            upsampled[(ov * i1, ov * i0)] = det_lambda * v;
        }
        let [nx, ny] = self.psi.size();
        let plane = |ch: usize| {
            Array2::from_shape_fn((ny, nx), |(iy, ix)| {
                self.psi.sample_at(
                    ch,
                    ix as isize - (nx / 2) as isize,
                    iy as isize - (ny / 2) as isize,
                )
            })
        };
        // Convolution with flip(psi) realizes the correlation against psi;
        // gradient channels carry the extra minus sign from d/dy.
        let mut channels = Vec::with_capacity(3);
        for ch in 0..3 {
            let sign = if ch == 0 { 1.0 } else { -1.0 };
            let kernel = plane(ch).slice(s![..;-1, ..;-1]).mapv(|v| sign * v);
            channels.push(conv2_full(&upsampled, &kernel));
        }
        let (oy, ox) = channels[0].dim();
        debug_assert!(ox % 2 == 1 && oy % 2 == 1);
        let mut data = Vec::with_capacity(3 * ox * oy);
        for ch in channels {
            data.extend(ch.into_iter());
        }
        Table2::from_samples([ox, oy], self.fine_step(), 3, data)
    }
}

/// PSF taps as (weight, physical fine-grid-aligned offset). The identity PSF
/// is a single unit tap; a sampled kernel contributes its samples scaled by
/// the pixel area (the discrete-convolution quadrature weight).
fn psf_taps(
    psf: &Psf,
    grid: &DetectorGrid,
    _oversampling: usize,
) -> Result<Vec<(f64, [f64; 2])>, CryoError> {
    match psf {
        Psf::Identity => Ok(vec![(1.0, [0.0, 0.0])]),
        Psf::Kernel(h) => {
            let (hy, hx) = h.dim();
            if hx % 2 == 0 || hy % 2 == 0 {
                return Err(CryoError::Config(format!(
                    "PSF kernel must have odd dimensions, got {hy}x{hx}"
                )));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(CryoError::Config("PSF kernel has non-finite entries".into()));
            }
            let (cy, cx) = ((hy / 2) as isize, (hx / 2) as isize);
            let area = grid.det_lambda();
            Ok(h.indexed_iter()
                .map(|((iy, ix), v)| {
                    (
                        v * area,
                        [
                            (ix as isize - cx) as f64 * grid.delta[0],
                            (iy as isize - cy) as f64 * grid.delta[1],
                        ],
                    )
                })
                .collect())
        }
    }
}

fn psf_radius(psf: &Psf, grid: &DetectorGrid) -> [f64; 2] {
    match psf {
        Psf::Identity => [0.0, 0.0],
        Psf::Kernel(h) => {
            let (hy, hx) = h.dim();
            [
                (hx / 2) as f64 * grid.delta[0],
                (hy / 2) as f64 * grid.delta[1],
            ]
        }
    }
}

/// Autocorrelation table of psi with its gradient:
///
///   (psi * psi_flip)(z)      = integral psi(y) psi(y - z) dy
///   grad(psi * psi_flip)(z)  = integral (grad psi)(y + z) psi(y) dy
///
/// computed as fine-grid Riemann sums via FFT correlation.
fn autocorrelation_table(psi: &Table2, step: [f64; 2]) -> Result<Table2, CryoError> {
    let [nx, ny] = psi.size();
    if 2 * nx - 1 > MAX_TABLE_SAMPLES || 2 * ny - 1 > MAX_TABLE_SAMPLES {
        return Err(CryoError::TableExtent(format!(
            "autocorrelation table would need {}x{} samples, budget is {MAX_TABLE_SAMPLES}",
            2 * ny - 1,
            2 * nx - 1
        )));
    }
    let plane = |ch: usize| {
        Array2::from_shape_fn((ny, nx), |(iy, ix)| {
            psi.sample_at(
                ch,
                ix as isize - (nx / 2) as isize,
                iy as isize - (ny / 2) as isize,
            )
        })
    };
    let val = plane(0);
    let flipped = val.slice(s![..;-1, ..;-1]).to_owned();
    let quad = step[0] * step[1];
    // corr(a, b)[d] = conv(a, flip(b))[d + (size-1)]; with equal centered
    // sizes the conv output is itself centered on offset zero.
    let mut data = Vec::with_capacity(3 * (2 * nx - 1) * (2 * ny - 1));
    let mut out_dim = (0, 0);
    for ch in 0..3 {
        let corr = conv2_full(&plane(ch), &flipped).mapv(|v| v * quad);
        out_dim = corr.dim();
        data.extend(corr.into_iter());
    }
    let (oy, ox) = out_dim;
    Ok(Table2::from_samples([ox, oy], step, 3, data))
}
