//! Per-projection latent-variable refinement: analytic pose gradients and
//! semi-coordinate-wise backtracking gradient descent over (theta, t).
//!
//! The per-projection cost J_p(theta, t) = 1/2 ||g_p - H(theta,t) c||^2 is
//! evaluated through its quadratic expansion
//!
//!   J_p = 1/2 c^T (w(theta) * c) - c^T H^T(theta,t) g_p + 1/2 ||g_p||^2,
//!
//! where both the single-pose kernel w(theta) and H^T g_p reduce to lookups
//! in the precomputed psi-autocorrelation and g_p-correlation tables. The
//! quadratic term contracts against the coefficient autocorrelation
//! R_c[d] = sum_k c[k] c[k-d], computed once per refinement call by FFT and
//! shared across projections and all three orientation partials.

use ndarray::Array3;
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CryoError;
use crate::fft::{fft3, good_size};
use crate::forward::{project, ProjectionImage, ProjectionStack, PsiTables, VolumeCoeffs};
use crate::geometry::{
    projection_matrix, projection_matrix_derivative, EulerAngles, InPlaneShift, Pose, ProjMatrix,
};
use crate::interp::Table2;

/// Gradient-descent parameters for the latent update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdConfig {
    /// Initial orientation step size (radians domain).
    pub alpha_theta0: f64,
    /// Initial shift step size (detector units domain).
    pub alpha_t0: f64,
    /// Backtracking shrink factor, in (0, 1).
    pub eta: f64,
    /// Descent iterations per projection.
    pub k_gd: usize,
    /// Backtracking cap; on exhaustion the variable is left unchanged.
    pub max_backtracks: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            alpha_theta0: 1e-4,
            alpha_t0: 1e-3,
            eta: 0.25,
            k_gd: 3,
            max_backtracks: 20,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<(), CryoError> {
        if !(self.eta > 0.0 && self.eta < 1.0) || !(self.alpha_theta0 > 0.0) || !(self.alpha_t0 > 0.0)
        {
            return Err(CryoError::Config(format!(
                "GD needs 0 < eta < 1 and positive step sizes; got eta = {}, alpha_theta0 = {}, alpha_t0 = {}",
                self.eta, self.alpha_theta0, self.alpha_t0
            )));
        }
        Ok(())
    }
}

/// Per-projection refinement diagnostics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProjDiagnostics {
    /// Expansion-form cost before refinement and after each iteration.
    pub costs: Vec<f64>,
    /// Backtracking steps used by each theta update.
    pub theta_backtracks: Vec<usize>,
    /// Backtracking steps used by each shift update.
    pub t_backtracks: Vec<usize>,
    /// Rounds in which a variable hit the backtracking cap and was kept.
    pub stalled_rounds: usize,
}

/// Exact per-projection cost 1/2 ||g_p - H(theta,t) c||^2 by explicit
/// projection.
pub fn cost_single(
    c: &VolumeCoeffs,
    pose: &Pose,
    g_p: &ProjectionImage,
    tables: &PsiTables,
) -> f64 {
    let model = project(c, pose, tables, &g_p.grid);
    0.5 * (&g_p.data - &model.data).mapv(|v| v * v).sum()
}

/// Shared read-only state for refining many projections against one volume.
pub struct LatentRefiner<'a> {
    c: &'a Array3<f64>,
    tables: &'a PsiTables,
    /// Coefficient autocorrelation on the (2n-1)^3 offset lattice.
    acorr: Array3<f64>,
    n: usize,
    inv_det: f64,
}

impl<'a> LatentRefiner<'a> {
    pub fn new(c: &'a VolumeCoeffs, tables: &'a PsiTables) -> Self {
        let n = c.n();
        LatentRefiner {
            c: &c.c,
            tables,
            acorr: autocorrelation3(&c.c),
            n,
            inv_det: 1.0 / tables.grid().det_lambda(),
        }
    }

    /// 1/2 c^T (w(theta) * c): one pass over the offset lattice.
    fn quad_term(&self, m: &ProjMatrix, ops: &mut u64) -> f64 {
        let n = self.n as isize;
        let corr = self.tables.psi_corr();
        let mut acc = 0.0;
        for ((d0, d1, d2), &r) in self.acorr.indexed_iter() {
            if r == 0.0 {
                continue;
            }
            let d = [
                (d0 as isize - (n - 1)) as f64,
                (d1 as isize - (n - 1)) as f64,
                (d2 as isize - (n - 1)) as f64,
            ];
            let u0 = m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2];
            let u1 = m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2];
            acc += r * corr.sample_ch(0, [u0, u1]);
        }
        *ops += self.acorr.len() as u64;
        0.5 * self.inv_det * acc
    }

    /// c^T H^T(theta,t) g_p: one pass over the coefficient grid.
    fn lin_term(&self, e: &Table2, m: &ProjMatrix, t: &InPlaneShift, ops: &mut u64) -> f64 {
        let cn = (self.n as f64 - 1.0) / 2.0;
        let mut acc = 0.0;
        for ((k0, k1, k2), &cv) in self.c.indexed_iter() {
            if cv == 0.0 {
                continue;
            }
            let x = [k0 as f64 - cn, k1 as f64 - cn, k2 as f64 - cn];
            let u0 = m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2] + t.t1;
            let u1 = m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2] + t.t2;
            acc += cv * e.sample_ch(0, [u0, u1]);
        }
        *ops += self.c.len() as u64;
        self.inv_det * acc
    }

    /// Expansion-form cost J_p(theta, t) given the projection's correlation
    /// table and 1/2 ||g_p||^2.
    pub fn cost(&self, e: &Table2, pose: &Pose, half_g_norm_sq: f64) -> f64 {
        let m = projection_matrix(pose.angles);
        let mut ops = 0;
        self.quad_term(&m, &mut ops) - self.lin_term(e, &m, &pose.shift, &mut ops) + half_g_norm_sq
    }

    /// All five partial derivatives of J_p, plus the number of lattice visits
    /// performed (used to verify the O(n^3) evaluation cost).
    pub fn grad_pose_counted(&self, e: &Table2, pose: &Pose) -> (([f64; 3], [f64; 2]), u64) {
        let m = projection_matrix(pose.angles);
        let dm = [
            projection_matrix_derivative(pose.angles, 1),
            projection_matrix_derivative(pose.angles, 2),
            projection_matrix_derivative(pose.angles, 3),
        ];
        let mut ops = 0u64;
        // Quadratic term: 1/2 sum_d r_v[d] R_c[d] for the three theta axes,
        // all from one pass sampling grad(psi*psi_flip) once per offset.
        let n = self.n as isize;
        let corr = self.tables.psi_corr();
        let mut r_acc = [0.0f64; 3];
        for ((d0, d1, d2), &r) in self.acorr.indexed_iter() {
            if r == 0.0 {
                continue;
            }
            let d = [
                (d0 as isize - (n - 1)) as f64,
                (d1 as isize - (n - 1)) as f64,
                (d2 as isize - (n - 1)) as f64,
            ];
            let u0 = m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2];
            let u1 = m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2];
            let g0 = corr.sample_ch(1, [u0, u1]);
            let g1 = corr.sample_ch(2, [u0, u1]);
            if g0 == 0.0 && g1 == 0.0 {
                continue;
            }
            for (i, dmi) in dm.iter().enumerate() {
                let v0 = dmi[0][0] * d[0] + dmi[0][1] * d[1] + dmi[0][2] * d[2];
                let v1 = dmi[1][0] * d[0] + dmi[1][1] * d[1] + dmi[1][2] * d[2];
                r_acc[i] += r * (v0 * g0 + v1 * g1);
            }
        }
        ops += self.acorr.len() as u64;
        // Linear term: q_v contractions, one pass over the coefficient grid
        // sampling grad(g_p*psi_flip) once per grid point.
        let cn = (self.n as f64 - 1.0) / 2.0;
        let mut q_theta = [0.0f64; 3];
        let mut q_t = [0.0f64; 2];
        for ((k0, k1, k2), &cv) in self.c.indexed_iter() {
            if cv == 0.0 {
                continue;
            }
            let x = [k0 as f64 - cn, k1 as f64 - cn, k2 as f64 - cn];
            let u0 = m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2] + pose.shift.t1;
            let u1 = m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2] + pose.shift.t2;
            let g0 = e.sample_ch(1, [u0, u1]);
            let g1 = e.sample_ch(2, [u0, u1]);
            if g0 == 0.0 && g1 == 0.0 {
                continue;
            }
            for (i, dmi) in dm.iter().enumerate() {
                let v0 = dmi[0][0] * x[0] + dmi[0][1] * x[1] + dmi[0][2] * x[2];
                let v1 = dmi[1][0] * x[0] + dmi[1][1] * x[1] + dmi[1][2] * x[2];
                q_theta[i] += cv * (v0 * g0 + v1 * g1);
            }
            q_t[0] += cv * g0;
            q_t[1] += cv * g1;
        }
        ops += self.c.len() as u64;
        let d_theta = [
            0.5 * self.inv_det * r_acc[0] - self.inv_det * q_theta[0],
            0.5 * self.inv_det * r_acc[1] - self.inv_det * q_theta[1],
            0.5 * self.inv_det * r_acc[2] - self.inv_det * q_theta[2],
        ];
        // r_v = 0 for translations: only the linear term contributes.
        let d_t = [-self.inv_det * q_t[0], -self.inv_det * q_t[1]];
        ((d_theta, d_t), ops)
    }

    /// Refines one projection's pose with K_GD semi-coordinate-wise rounds.
    pub fn refine_one(
        &self,
        e: &Table2,
        g_p: &ProjectionImage,
        pose0: &Pose,
        cfg: &GdConfig,
    ) -> (Pose, ProjDiagnostics) {
        let half_g = 0.5 * g_p.data.iter().map(|v| v * v).sum::<f64>();
        let mut pose = *pose0;
        let mut diag = ProjDiagnostics::default();
        let mut cost = self.cost(e, &pose, half_g);
        diag.costs.push(cost);
        for _ in 0..cfg.k_gd {
            let ((d_theta, _), _) = self.grad_pose_counted(e, &pose);
            // Orientation step with backtracking (step resets to alpha0).
            let mut alpha = cfg.alpha_theta0;
            let mut accepted = false;
            let mut backtracks = 0;
            while backtracks <= cfg.max_backtracks {
                let cand = Pose::new(
                    EulerAngles::new(
                        pose.angles.theta1 - alpha * d_theta[0],
                        pose.angles.theta2 - alpha * d_theta[1],
                        pose.angles.theta3 - alpha * d_theta[2],
                    ),
                    pose.shift,
                );
                let cand_cost = self.cost(e, &cand, half_g);
                if cand_cost <= cost {
                    pose = cand;
                    cost = cand_cost;
                    accepted = true;
                    break;
                }
                alpha *= cfg.eta;
                backtracks += 1;
            }
            diag.theta_backtracks.push(backtracks);
            if !accepted {
                diag.stalled_rounds += 1;
            }
            // Shift step: the quadratic term is unaffected, so only the
            // linear term needs re-evaluation during backtracking.
            let ((_, d_t), _) = self.grad_pose_counted(e, &pose);
            let m = projection_matrix(pose.angles);
            let mut ops = 0;
            let quad = self.quad_term(&m, &mut ops);
            let mut alpha = cfg.alpha_t0;
            let mut accepted = false;
            let mut backtracks = 0;
            while backtracks <= cfg.max_backtracks {
                let cand_shift = InPlaneShift {
                    t1: pose.shift.t1 - alpha * d_t[0],
                    t2: pose.shift.t2 - alpha * d_t[1],
                };
                let cand_cost = quad - self.lin_term(e, &m, &cand_shift, &mut ops) + half_g;
                if cand_cost <= cost {
                    pose.shift = cand_shift;
                    cost = cand_cost;
                    accepted = true;
                    break;
                }
                alpha *= cfg.eta;
                backtracks += 1;
            }
            diag.t_backtracks.push(backtracks);
            if !accepted {
                diag.stalled_rounds += 1;
            }
            diag.costs.push(cost);
        }
        (pose, diag)
    }
}

/// All five pose partials of J_p (convenience wrapper building the
/// per-projection table on the fly).
pub fn grad_pose(
    c: &VolumeCoeffs,
    pose: &Pose,
    g_p: &ProjectionImage,
    tables: &PsiTables,
) -> ([f64; 3], [f64; 2]) {
    let refiner = LatentRefiner::new(c, tables);
    let e = tables.build_image_table(g_p);
    refiner.grad_pose_counted(&e, pose).0
}

/// Refines every projection's pose independently, starting from the poses
/// stored in the stack. Parallel across projections; per-projection results
/// are independent, so the output is identical for any thread count.
pub fn refine_latents(
    c: &VolumeCoeffs,
    stack: &ProjectionStack,
    tables: &PsiTables,
    cfg: &GdConfig,
) -> Result<(Vec<Pose>, Vec<ProjDiagnostics>), CryoError> {
    refine_latents_batched(c, stack, tables, cfg, stack.len())
}

/// Batched variant: projections are processed in contiguous batches of
/// `batch_size` (clamped to P). Because each projection is refined
/// independently, the result is bit-identical for every batch size; batching
/// only bounds how many per-image correlation tables are alive at once.
pub fn refine_latents_batched(
    c: &VolumeCoeffs,
    stack: &ProjectionStack,
    tables: &PsiTables,
    cfg: &GdConfig,
    batch_size: usize,
) -> Result<(Vec<Pose>, Vec<ProjDiagnostics>), CryoError> {
    cfg.validate()?;
    if *tables.grid() != stack.grid {
        return Err(CryoError::Shape(
            "psi tables and projection stack disagree on the detector grid".into(),
        ));
    }
    let batch = batch_size.max(1).min(stack.len());
    let refiner = LatentRefiner::new(c, tables);
    let mut poses = Vec::with_capacity(stack.len());
    let mut diags = Vec::with_capacity(stack.len());
    for start in (0..stack.len()).step_by(batch) {
        let end = (start + batch).min(stack.len());
        let results: Vec<(Pose, ProjDiagnostics)> = (start..end)
            .into_par_iter()
            .map(|p| {
                let owned;
                let e = match tables.image_table(p) {
                    Some(t) => t,
                    None => {
                        owned = tables.build_image_table(&stack.images[p]);
                        &owned
                    }
                };
                refiner.refine_one(e, &stack.images[p], &stack.poses[p], cfg)
            })
            .collect();
        for (pose, diag) in results {
            poses.push(pose);
            diags.push(diag);
        }
    }
    Ok((poses, diags))
}

/// Computes the linear autocorrelation R_c[d] = sum_k c[k] c[k-d] on the
/// centered (2n-1)^3 offset lattice via zero-padded FFT.
fn autocorrelation3(c: &Array3<f64>) -> Array3<f64> {
    let (n0, n1, n2) = c.dim();
    let p = [good_size(2 * n0 - 1), good_size(2 * n1 - 1), good_size(2 * n2 - 1)];
    let mut x = Array3::<Complex<f64>>::zeros((p[0], p[1], p[2]));
    for ((i, j, k), &v) in c.indexed_iter() {
        x[(i, j, k)] = Complex::new(v, 0.0);
    }
    fft3(&mut x, false);
    x.mapv_inplace(|v| Complex::new(v.norm_sqr(), 0.0));
    fft3(&mut x, true);
    // Circular correlation of the padded array equals the linear one;
    // offset d >= 0 sits at index d, d < 0 wraps to p + d.
    let mut out = Array3::<f64>::zeros((2 * n0 - 1, 2 * n1 - 1, 2 * n2 - 1));
    for ((i, j, k), o) in out.indexed_iter_mut() {
        let d = [
            i as isize - (n0 as isize - 1),
            j as isize - (n1 as isize - 1),
            k as isize - (n2 as isize - 1),
        ];
        let idx = [
            d[0].rem_euclid(p[0] as isize) as usize,
            d[1].rem_euclid(p[1] as isize) as usize,
            d[2].rem_euclid(p[2] as isize) as usize,
        ];
        *o = x[(idx[0], idx[1], idx[2])].re;
    }
    out
}
