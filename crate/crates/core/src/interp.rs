//! Multi-channel 2D lookup tables with Catmull-Rom (cubic) interpolation.
//!
//! All precomputed profiles used by the forward model are functions of a 2D
//! argument sampled on a fine, centered rectangular grid (default x8 detector
//! oversampling). Every table is stored with a two-sample zero margin so the
//! four-point cubic stencil never reads out of bounds, and queries outside the
//! tabulated extent return exactly zero — which is also the true value for all
//! tabulated profiles, since they are compactly supported.

use crate::error::CryoError;

/// Centered, multi-channel 2D sample table with cubic interpolation access.
#[derive(Debug, Clone)]
pub struct Table2 {
    /// Samples per axis (odd), including the zero margin.
    size: [usize; 2],
    /// Fine-grid step per axis.
    step: [f64; 2],
    /// Number of interleaved value channels.
    channels: usize,
    /// Channel-major sample planes: data[ch][iy][ix] flattened.
    data: Vec<f64>,
    /// Largest query radius per axis that keeps the stencil inside the table.
    max_query: [f64; 2],
}

/// Catmull-Rom weights for a fractional offset u in [0, 1), for the stencil
/// points at relative indices -1, 0, 1, 2.
#[inline]
pub(crate) fn catmull_rom_weights(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        0.5 * (-u3 + 2.0 * u2 - u),
        0.5 * (3.0 * u3 - 5.0 * u2 + 2.0),
        0.5 * (-3.0 * u3 + 4.0 * u2 + u),
        0.5 * (u3 - u2),
    ]
}

impl Table2 {
    /// Number of zero samples padded on every side.
    pub const MARGIN: usize = 2;

    /// Tabulates `f(y) -> [channels]` on the centered grid covering
    /// `|y_axis| <= radius_axis`, at the given steps.
    ///
    /// Fails if the sample count per axis would exceed `max_samples`
    /// (the table memory budget).
    pub fn build<F>(
        radius: [f64; 2],
        step: [f64; 2],
        channels: usize,
        max_samples: usize,
        f: F,
    ) -> Result<Self, CryoError>
    where
        F: Fn([f64; 2], &mut [f64]) + Sync,
    {
        assert!(channels > 0);
        if !(step[0] > 0.0) || !(step[1] > 0.0) || !(radius[0] >= 0.0) || !(radius[1] >= 0.0) {
            return Err(CryoError::Config(format!(
                "table build requires positive steps and nonnegative radii, got radius {radius:?}, step {step:?}"
            )));
        }
        let mut size = [0usize; 2];
        for ax in 0..2 {
            let half = (radius[ax] / step[ax]).ceil() as usize + Self::MARGIN;
            size[ax] = 2 * half + 1;
            if size[ax] > max_samples {
                return Err(CryoError::TableExtent(format!(
                    "axis {ax} needs {} samples (radius {}, step {}), budget is {max_samples}",
                    size[ax], radius[ax], step[ax]
                )));
            }
        }
        let (ny, nx) = (size[1], size[0]);
        let mut data = vec![0.0; channels * ny * nx];
        let (cy, cx) = ((ny / 2) as isize, (nx / 2) as isize);
        let mut vals = vec![0.0; channels];
        for iy in 0..ny {
            let y1 = (iy as isize - cy) as f64 * step[1];
            for ix in 0..nx {
                let y0 = (ix as isize - cx) as f64 * step[0];
                // Leave the margin ring identically zero.
                if y0.abs() > radius[0] + 0.5 * step[0] || y1.abs() > radius[1] + 0.5 * step[1] {
                    continue;
                }
                f([y0, y1], &mut vals);
                for (ch, v) in vals.iter().enumerate() {
                    data[(ch * ny + iy) * nx + ix] = *v;
                }
            }
        }
        Ok(Self::from_samples(size, step, channels, data))
    }

    /// Wraps precomputed samples (channel-major planes, centered grid).
    /// The outermost `MARGIN` ring of each plane must already be zero.
    pub fn from_samples(size: [usize; 2], step: [f64; 2], channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * size[0] * size[1]);
        assert!(size[0] % 2 == 1 && size[1] % 2 == 1, "sizes must be odd");
        let max_query = [
            ((size[0] / 2) as f64 - Self::MARGIN as f64) * step[0],
            ((size[1] / 2) as f64 - Self::MARGIN as f64) * step[1],
        ];
        Table2 {
            size,
            step,
            channels,
            data,
            max_query,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn step(&self) -> [f64; 2] {
        self.step
    }

    pub fn size(&self) -> [usize; 2] {
        self.size
    }

    /// Largest per-axis query radius with a fully in-bounds stencil; beyond
    /// it queries return zero.
    pub fn max_query(&self) -> [f64; 2] {
        self.max_query
    }

    /// Raw sample access (signed grid index relative to the center).
    pub fn sample_at(&self, ch: usize, ix: isize, iy: isize) -> f64 {
        let (nx, ny) = (self.size[0], self.size[1]);
        let jx = ix + (nx / 2) as isize;
        let jy = iy + (ny / 2) as isize;
        if jx < 0 || jy < 0 || jx >= nx as isize || jy >= ny as isize {
            0.0
        } else {
            self.data[(ch * ny + jy as usize) * nx + jx as usize]
        }
    }

    /// Interpolates all channels at `y`, writing into `out` (len = channels).
    /// Queries outside the tabulated extent yield zeros.
    #[inline]
    pub fn sample_into(&self, y: [f64; 2], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        if y[0].abs() > self.max_query[0] || y[1].abs() > self.max_query[1] {
            out.fill(0.0);
            return;
        }
        let (nx, ny) = (self.size[0], self.size[1]);
        let gx = y[0] / self.step[0] + (nx / 2) as f64;
        let gy = y[1] / self.step[1] + (ny / 2) as f64;
        let ix = gx.floor();
        let iy = gy.floor();
        let wx = catmull_rom_weights(gx - ix);
        let wy = catmull_rom_weights(gy - iy);
        let (ix, iy) = (ix as usize, iy as usize);
        for (ch, o) in out.iter_mut().enumerate() {
            let plane = &self.data[ch * ny * nx..(ch + 1) * ny * nx];
            let mut acc = 0.0;
            for (dy, wyv) in wy.iter().enumerate() {
                let row = (iy + dy - 1) * nx + ix - 1;
                let r = &plane[row..row + 4];
                acc += wyv * (wx[0] * r[0] + wx[1] * r[1] + wx[2] * r[2] + wx[3] * r[3]);
            }
            *o = acc;
        }
    }

    /// Interpolates one channel at `y`; zero outside the tabulated extent.
    #[inline]
    pub fn sample_ch(&self, ch: usize, y: [f64; 2]) -> f64 {
        debug_assert!(ch < self.channels);
        if y[0].abs() > self.max_query[0] || y[1].abs() > self.max_query[1] {
            return 0.0;
        }
        let (nx, ny) = (self.size[0], self.size[1]);
        let gx = y[0] / self.step[0] + (nx / 2) as f64;
        let gy = y[1] / self.step[1] + (ny / 2) as f64;
        let ix = gx.floor();
        let iy = gy.floor();
        let wx = catmull_rom_weights(gx - ix);
        let wy = catmull_rom_weights(gy - iy);
        let (ix, iy) = (ix as usize, iy as usize);
        let plane = &self.data[ch * ny * nx..(ch + 1) * ny * nx];
        let mut acc = 0.0;
        for (dy, wyv) in wy.iter().enumerate() {
            let row = (iy + dy - 1) * nx + ix - 1;
            let r = &plane[row..row + 4];
            acc += wyv * (wx[0] * r[0] + wx[1] * r[1] + wx[2] * r[2] + wx[3] * r[3]);
        }
        acc
    }

    /// Single-channel convenience accessor.
    #[inline]
    pub fn sample1(&self, y: [f64; 2]) -> f64 {
        debug_assert_eq!(self.channels, 1);
        let mut v = [0.0];
        self.sample_into(y, &mut v);
        v[0]
    }
}
