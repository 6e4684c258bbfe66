//! Outer alternation between the TV-regularized volume update and the
//! per-projection pose refinement, the half-split protocol with FSC-based
//! stopping, and map postprocessing.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::admm::{admm_reconstruct, AdmmConfig, TvState};
use crate::error::CryoError;
use crate::fft::fft3;
use crate::forward::{backproject, HthOperator, ProjectionStack, PsiTables, VolumeCoeffs};
use crate::geometry::{geodesic_distance, Pose};
use crate::metrics::{fsc, resolution_at_threshold, FscCurve, RC_THRESHOLD_TRUTH};
use crate::refine::{refine_latents_batched, GdConfig};

/// Outer-loop parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    /// Outer iteration cap.
    pub max_outer_iters: usize,
    /// Volume-update parameters.
    pub admm: AdmmConfig,
    /// Pose-update parameters; k_gd = 0 disables refinement entirely.
    pub gd: GdConfig,
    /// Run the half-split protocol (used by the CLI layer).
    pub half_split: bool,
    /// Consecutive non-improving half-map FSC iterations before stopping.
    pub fsc_stall_patience: usize,
    /// Projection batch size for the pose update; defaults to P.
    pub batch_size: Option<usize>,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig {
            max_outer_iters: 40,
            admm: AdmmConfig::default(),
            gd: GdConfig::default(),
            half_split: false,
            fsc_stall_patience: 1,
            batch_size: None,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<(), CryoError> {
        if self.max_outer_iters == 0 {
            return Err(CryoError::Config("max_outer_iters must be >= 1".into()));
        }
        self.admm.validate()?;
        if self.gd.k_gd > 0 {
            self.gd.validate()?;
        }
        Ok(())
    }
}

/// One completed outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Composite objective after the volume update.
    pub objective: f64,
    /// Sum over projections of orientation geodesic distance plus shift
    /// displacement moved by this iteration's pose update.
    pub pose_change: f64,
    /// Resolution against ground truth at FSC 0.5, when truth is available.
    pub r_c: Option<f64>,
    /// Area under the half-map FSC (half-split runs only).
    pub fsc_area: Option<f64>,
    /// Whether any per-projection update exhausted its backtracking budget.
    pub stalled: bool,
    /// Wall time of the iteration; excluded from canonical serialization so
    /// traces compare byte-equal across runs.
    pub elapsed_secs: f64,
}

/// Per-run trace, one record per completed outer iteration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub records: Vec<IterRecord>,
    /// Free-form notes (stalls, postprocess fallbacks); never fatal.
    pub notes: Vec<String>,
}

impl RefinementTrace {
    /// Line-delimited JSON, one record per iteration. With `include_timing`
    /// false the timing field is zeroed, making the output deterministic.
    pub fn to_jsonl(&self, include_timing: bool) -> String {
        let mut out = String::new();
        for r in &self.records {
            let mut r = r.clone();
            if !include_timing {
                r.elapsed_secs = 0.0;
            }
            out.push_str(&serde_json::to_string(&r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }
}

/// One refinement context: a projection half (or the full set) with its
/// current poses, volume, and cached normal operator.
struct JointContext<'a> {
    stack: ProjectionStack,
    tables: &'a PsiTables,
    cfg: &'a JointConfig,
    c: VolumeCoeffs,
    tv: Option<TvState>,
    op: Option<HthOperator>,
    htg: Option<Array3<f64>>,
    g_norm_sq: f64,
    poses_dirty: bool,
}

impl<'a> JointContext<'a> {
    fn new(
        stack: ProjectionStack,
        c0: &VolumeCoeffs,
        tables: &'a PsiTables,
        cfg: &'a JointConfig,
    ) -> Self {
        let g_norm_sq = stack
            .images
            .iter()
            .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
            .sum();
        JointContext {
            stack,
            tables,
            cfg,
            c: c0.clone(),
            tv: None,
            op: None,
            htg: None,
            g_norm_sq,
            poses_dirty: true,
        }
    }

    /// One outer iteration: volume update, then (optionally) pose update.
    fn step(&mut self, iter: usize, truth: Option<&VolumeCoeffs>) -> Result<IterRecord, CryoError> {
        let t0 = std::time::Instant::now();
        let n = self.c.n();
        if self.poses_dirty {
            let angles: Vec<_> = self.stack.poses.iter().map(|p| p.angles).collect();
            self.op = Some(HthOperator::from_poses(&angles, self.tables, n));
            self.htg = Some(backproject(&self.stack, self.tables, n));
            self.poses_dirty = false;
        }
        let (c_new, tv, diag) = admm_reconstruct(
            self.op.as_ref().unwrap(),
            self.htg.as_ref().unwrap(),
            &self.c.c,
            self.tv.take(),
            &self.cfg.admm,
            self.g_norm_sq,
        )?;
        self.c.c = c_new;
        self.tv = Some(tv);
        let objective = *diag.objective.last().unwrap_or(&f64::NAN);

        let mut pose_change = 0.0;
        let mut stalled = false;
        if self.cfg.gd.k_gd > 0 {
            let batch = self.cfg.batch_size.unwrap_or(self.stack.len());
            let (new_poses, diags) =
                refine_latents_batched(&self.c, &self.stack, self.tables, &self.cfg.gd, batch)?;
            for (old, new) in self.stack.poses.iter().zip(new_poses.iter()) {
                pose_change += geodesic_distance(old.angles, new.angles)
                    + ((old.shift.t1 - new.shift.t1).powi(2)
                        + (old.shift.t2 - new.shift.t2).powi(2))
                    .sqrt();
            }
            stalled = diags.iter().any(|d| d.stalled_rounds > 0);
            if pose_change > 0.0 {
                self.stack.poses = new_poses;
                self.poses_dirty = true;
            }
        }
        if self.c.c.iter().any(|v| !v.is_finite()) {
            return Err(CryoError::NonFinite(format!(
                "volume state at outer iteration {iter}"
            )));
        }
        let r_c = match truth {
            Some(gt) => {
                let curve = fsc(&gt.c, &self.c.c, crate::metrics::DEFAULT_EPS_R)?;
                Some(resolution_at_threshold(&curve, RC_THRESHOLD_TRUTH))
            }
            None => None,
        };
        Ok(IterRecord {
            iter,
            objective,
            pose_change,
            r_c,
            fsc_area: None,
            stalled,
            elapsed_secs: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Alternates the volume and pose updates for `max_outer_iters` iterations.
/// The normal-operator kernel and back-projection are rebuilt only when the
/// poses actually moved. `truth` (optional) adds an r_c column to the trace.
pub fn joint_refine(
    stack: &ProjectionStack,
    c0: &VolumeCoeffs,
    tables: &PsiTables,
    cfg: &JointConfig,
    truth: Option<&VolumeCoeffs>,
) -> Result<(VolumeCoeffs, Vec<Pose>, RefinementTrace), CryoError> {
    cfg.validate()?;
    let mut ctx = JointContext::new(stack.clone(), c0, tables, cfg);
    let mut trace = RefinementTrace::default();
    for iter in 0..cfg.max_outer_iters {
        let rec = ctx.step(iter, truth)?;
        if rec.stalled {
            trace
                .notes
                .push(format!("iteration {iter}: backtracking exhausted for some projections"));
        }
        trace.records.push(rec);
    }
    Ok((ctx.c, ctx.stack.poses, trace))
}

/// Half-split refinement output.
#[derive(Debug)]
pub struct HalfSplitResult {
    pub half_a: VolumeCoeffs,
    pub half_b: VolumeCoeffs,
    /// Voxel-wise average of the two half maps.
    pub average: VolumeCoeffs,
    /// Poses merged back into original projection order.
    pub poses: Vec<Pose>,
    /// FSC between the two half maps at the stopping iteration.
    pub fsc_halfmaps: FscCurve,
    pub trace_a: RefinementTrace,
    pub trace_b: RefinementTrace,
    /// Completed outer iterations before the stall rule fired.
    pub stopped_after: usize,
}

/// Splits the stack into even/odd projection halves, refines both in
/// lockstep from the same initial volume, and stops when the area under the
/// half-map FSC fails to improve for `fsc_stall_patience` consecutive
/// iterations.
pub fn half_split_refine(
    stack: &ProjectionStack,
    c0: &VolumeCoeffs,
    tables: &PsiTables,
    cfg: &JointConfig,
    truth: Option<&VolumeCoeffs>,
) -> Result<HalfSplitResult, CryoError> {
    cfg.validate()?;
    if stack.len() < 2 {
        return Err(CryoError::Config(
            "half-split refinement needs at least two projections".into(),
        ));
    }
    let even: Vec<usize> = (0..stack.len()).step_by(2).collect();
    let odd: Vec<usize> = (1..stack.len()).step_by(2).collect();
    let sub = |idx: &[usize]| -> ProjectionStack {
        ProjectionStack {
            images: idx.iter().map(|&i| stack.images[i].clone()).collect(),
            poses: idx.iter().map(|&i| stack.poses[i]).collect(),
            grid: stack.grid,
        }
    };
    let mut ctx_a = JointContext::new(sub(&even), c0, tables, cfg);
    let mut ctx_b = JointContext::new(sub(&odd), c0, tables, cfg);
    let mut trace_a = RefinementTrace::default();
    let mut trace_b = RefinementTrace::default();
    let mut best_area = f64::NEG_INFINITY;
    let mut stall_count = 0usize;
    let mut completed = 0usize;
    let mut last_curve = None;
    for iter in 0..cfg.max_outer_iters {
        let mut rec_a = ctx_a.step(iter, truth)?;
        let mut rec_b = ctx_b.step(iter, truth)?;
        let curve = fsc(&ctx_a.c.c, &ctx_b.c.c, crate::metrics::DEFAULT_EPS_R)?;
        let area = curve.area();
        rec_a.fsc_area = Some(area);
        rec_b.fsc_area = Some(area);
        trace_a.records.push(rec_a);
        trace_b.records.push(rec_b);
        last_curve = Some(curve);
        completed = iter + 1;
        if area > best_area {
            best_area = area;
            stall_count = 0;
        } else {
            stall_count += 1;
            if stall_count >= cfg.fsc_stall_patience {
                trace_a
                    .notes
                    .push(format!("half-map FSC stalled after iteration {iter}"));
                break;
            }
        }
    }
    // Merge poses back to original indices.
    let mut poses = stack.poses.clone();
    for (slot, &i) in even.iter().enumerate() {
        poses[i] = ctx_a.stack.poses[slot];
    }
    for (slot, &i) in odd.iter().enumerate() {
        poses[i] = ctx_b.stack.poses[slot];
    }
    let average = VolumeCoeffs::new(
        (&ctx_a.c.c + &ctx_b.c.c).mapv(|v| 0.5 * v),
        c0.basis,
    )?;
    Ok(HalfSplitResult {
        half_a: ctx_a.c,
        half_b: ctx_b.c,
        average,
        poses,
        fsc_halfmaps: last_curve.expect("at least one iteration ran"),
        trace_a,
        trace_b,
        stopped_after: completed,
    })
}

/// Postprocessing outcome.
#[derive(Debug)]
pub struct PostprocessResult {
    pub volume: VolumeCoeffs,
    /// Low-pass cutoff in cycles per voxel, when one was applied.
    pub cutoff: Option<f64>,
    /// Set when the FSC never crossed the threshold and the volume was
    /// passed through unfiltered.
    pub passthrough: bool,
}

/// Applies a spherical cosine-edge soft mask (3-voxel edge) followed by a
/// sharp low-pass at the frequency where the half-map FSC crosses
/// `threshold`. If the curve starts below the threshold the volume is passed
/// through untouched (with a note in the result).
pub fn postprocess(
    volume: &VolumeCoeffs,
    fsc_halfmaps: &FscCurve,
    mask_radius: Option<f64>,
    threshold: f64,
) -> PostprocessResult {
    let n = volume.n();
    let cutoff = resolution_at_threshold(fsc_halfmaps, threshold);
    if cutoff <= 0.0 {
        return PostprocessResult {
            volume: volume.clone(),
            cutoff: None,
            passthrough: true,
        };
    }
    // Spherical soft mask: flat inside `radius`, cosine falloff over 3
    // voxels, zero beyond.
    let edge = 3.0;
    let radius = mask_radius.unwrap_or(n as f64 / 2.0 - edge);
    let center = (n as f64 - 1.0) / 2.0;
    let mut masked = volume.c.clone();
    for ((i, j, k), v) in masked.indexed_iter_mut() {
        let r = ((i as f64 - center).powi(2)
            + (j as f64 - center).powi(2)
            + (k as f64 - center).powi(2))
        .sqrt();
        let w = if r <= radius {
            1.0
        } else if r < radius + edge {
            0.5 * (1.0 + (std::f64::consts::PI * (r - radius) / edge).cos())
        } else {
            0.0
        };
        *v *= w;
    }
    // Sharp low-pass: zero every DFT bin whose lattice radius exceeds the
    // cutoff (cycles/voxel scaled back to lattice units). A cutoff at
    // Nyquist keeps the full spectrum (corner bins included).
    if cutoff >= 0.5 - 1e-12 {
        return PostprocessResult {
            volume: VolumeCoeffs {
                c: masked,
                basis: volume.basis,
            },
            cutoff: Some(cutoff),
            passthrough: false,
        };
    }
    let cut_lattice = cutoff * n as f64;
    let mut spec = masked.mapv(|r| num_complex::Complex::new(r, 0.0));
    fft3(&mut spec, false);
    for ((i, j, k), v) in spec.indexed_iter_mut() {
        let signed = |i: usize| -> f64 {
            let i = i as isize;
            let n = n as isize;
            (if i <= n / 2 { i } else { i - n }) as f64
        };
        let r = (signed(i).powi(2) + signed(j).powi(2) + signed(k).powi(2)).sqrt();
        if r > cut_lattice {
            *v = num_complex::Complex::new(0.0, 0.0);
        }
    }
    fft3(&mut spec, true);
    let out = spec.mapv(|z| z.re);
    PostprocessResult {
        volume: VolumeCoeffs {
            c: out,
            basis: volume.basis,
        },
        cutoff: Some(cutoff),
        passthrough: false,
    }
}
