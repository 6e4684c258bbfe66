//! Command-line front end: simulate -> reconstruct / joint-refine -> evaluate.
//!
//! Artifacts on disk:
//! - volumes: MRC mode-2 files holding the n^3 basis-coefficient grid,
//! - stacks: MRC mode-2 m x m x P files plus a CSV pose table and a JSON
//!   metadata sidecar (detector spacing, noise level, seed, basis params),
//! - traces: JSONL, one outer-iteration record per line (timing zeroed so
//!   identical runs produce identical bytes),
//! - curves/histograms: two-column CSVs, directly plottable.
//!
//! Exit codes: 0 success (including refinement stalls), 2 usage or
//! configuration error, 3 I/O error, 4 numerical failure (non-finite state,
//! reported with the iteration it appeared in).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cryojoint::forward::build_psi_tables;
use cryojoint::io::mrc::{read_mrc, stack_to_mrc, volume_to_mrc, write_mrc};
use cryojoint::io::poses::{read_poses, write_poses};
use cryojoint::io::{read_metadata, write_metadata, StackMetadata};
use cryojoint::joint::{half_split_refine, joint_refine, postprocess};
use cryojoint::metrics::{fsc, pose_error_pdf, resolution_at_threshold, DEFAULT_EPS_R};
use cryojoint::refine::refine_latents_batched;
use cryojoint::{
    CryoError, DetectorGrid, FscCurve, JointConfig, KbwfParams, NoiseSpec, ProjectionImage,
    ProjectionStack, SimConfig, VolumeCoeffs,
};

/// Full run configuration; any subset may be given, the rest defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    sim: SimConfig,
    joint: JointConfig,
}

#[derive(Parser)]
#[command(name = "cryojoint", version, about = "Joint pose refinement and TV-regularized reconstruction for cryo-EM projection data")]
struct Cli {
    /// Worker threads (default: CRYOJOINT_THREADS env var, then logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON config file (unknown keys rejected); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient-descent rounds per projection per outer iteration.
    #[arg(long)]
    k_gd: Option<usize>,
    /// Outer iteration cap.
    #[arg(long)]
    max_outer_iters: Option<usize>,
    /// ADMM rounds per volume update.
    #[arg(long)]
    k_admm: Option<usize>,
    /// TV regularization weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// ADMM penalty parameter.
    #[arg(long)]
    rho: Option<f64>,
    /// Projection batch size for the pose update.
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CryoError> {
        let mut cfg: RunConfig = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| CryoError::Config(format!("config file {}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.sim.seed = v;
        }
        if let Some(v) = self.k_gd {
            cfg.joint.gd.k_gd = v;
        }
        if let Some(v) = self.max_outer_iters {
            cfg.joint.max_outer_iters = v;
        }
        if let Some(v) = self.k_admm {
            cfg.joint.admm.k_admm = v;
        }
        if let Some(v) = self.lambda {
            cfg.joint.admm.lambda = v;
        }
        if let Some(v) = self.rho {
            cfg.joint.admm.rho = v;
        }
        if let Some(v) = self.batch_size {
            cfg.joint.batch_size = Some(v);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic projection stack from the built-in phantom.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (created if missing).
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of projections override.
        #[arg(long)]
        p: Option<usize>,
        /// Volume grid size override.
        #[arg(long)]
        n: Option<usize>,
        /// Maximum in-plane shift magnitude override (pixels).
        #[arg(long)]
        m_t: Option<f64>,
        /// Target dataset SNR in dB ("+inf" for noiseless).
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<String>,
        /// Explicit per-pixel noise standard deviation.
        #[arg(long, conflicts_with = "snr_db")]
        sigma: Option<f64>,
        /// Uniform orientation perturbation half-width (radians) for the
        /// initial pose table; shifts reset to zero. Omit to skip.
        #[arg(long)]
        perturb: Option<f64>,
    },
    /// TV-regularized reconstruction at fixed poses.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Metadata sidecar (default: metadata.json next to the stack).
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// One pass of per-projection pose refinement against a fixed volume.
    RefinePoses {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Output pose table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Alternating volume/pose refinement.
    Joint {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        metadata: Option<PathBuf>,
        /// Initial volume (default: zeros).
        #[arg(long)]
        volume: Option<PathBuf>,
        /// Ground-truth volume; adds an r_c column to the trace.
        #[arg(long)]
        truth_volume: Option<PathBuf>,
        /// Refine even/odd halves independently with FSC-based stopping.
        #[arg(long)]
        half_split: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fourier shell correlation between two volumes.
    Fsc {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Output CSV (frequency in cycles/voxel, correlation).
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of per-component pose errors (degrees for angles, pixels
    /// for shifts).
    PoseError {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ComponentArg::Theta2)]
        component: ComponentArg,
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Compensate the global in-plane angular degeneracy before
        /// differencing.
        #[arg(long)]
        align: bool,
    },
    /// Mask and FSC-filter a refined map using its two half maps.
    Postprocess {
        #[arg(long)]
        half_a: PathBuf,
        #[arg(long)]
        half_b: PathBuf,
        /// Volume to filter (default: voxel average of the halves).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Half-map FSC threshold for the low-pass cutoff.
        #[arg(long, default_value_t = 0.143)]
        threshold: f64,
        /// Soft-mask radius in voxels (default: n/2 - 3).
        #[arg(long)]
        mask_radius: Option<f64>,
        /// Also write the half-map FSC curve here.
        #[arg(long)]
        fsc_out: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ComponentArg {
    Theta1,
    Theta2,
    Theta3,
    T1,
    T2,
}

impl ComponentArg {
    fn to_component(self) -> cryojoint::PoseComponent {
        use cryojoint::PoseComponent::*;
        match self {
            ComponentArg::Theta1 => Theta1,
            ComponentArg::Theta2 => Theta2,
            ComponentArg::Theta3 => Theta3,
            ComponentArg::T1 => T1,
            ComponentArg::T2 => T2,
        }
    }
}

fn exit_code_for(err: &CryoError) -> i32 {
    match err {
        CryoError::Config(_) | CryoError::Shape(_) | CryoError::TableExtent(_) => 2,
        CryoError::Io(_) | CryoError::Mrc(_) | CryoError::PoseTable { .. } | CryoError::Json(_) => {
            3
        }
        CryoError::NonFinite(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("CRYOJOINT_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(num_threads_default);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();
    if let Err(err) = run(cli.command) {
        eprintln!("cryojoint: {err}");
        std::process::exit(exit_code_for(&err));
    }
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Reads the metadata sidecar: explicit path, or metadata.json next to the
/// stack file.
fn load_metadata(stack: &Path, metadata: &Option<PathBuf>) -> Result<StackMetadata, CryoError> {
    let path = match metadata {
        Some(p) => p.clone(),
        None => stack
            .parent()
            .unwrap_or(Path::new("."))
            .join("metadata.json"),
    };
    read_metadata(&path)
}

/// Assembles a ProjectionStack from a stack MRC and a pose table, validated
/// against the metadata.
fn load_stack(
    stack_path: &Path,
    poses_path: &Path,
    meta: &StackMetadata,
) -> Result<ProjectionStack, CryoError> {
    let mrc = read_mrc(stack_path)?;
    let images = mrc.as_stack()?;
    let (nx, _, nz) = mrc.dims();
    if nx != meta.m || nz != meta.p {
        return Err(CryoError::Shape(format!(
            "stack file is {nx} x {nx} x {nz} but metadata says m = {}, P = {}",
            meta.m, meta.p
        )));
    }
    let table = read_poses(poses_path)?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    if table.poses.len() != meta.p {
        return Err(CryoError::Shape(format!(
            "pose table has {} rows but metadata says P = {}",
            table.poses.len(),
            meta.p
        )));
    }
    let grid = DetectorGrid::new(meta.m, meta.delta)?;
    let images = images
        .into_iter()
        .map(|img| ProjectionImage::new(img, grid))
        .collect::<Result<Vec<_>, _>>()?;
    ProjectionStack::new(images, table.poses)
}

fn load_volume(path: &Path, basis: &KbwfParams) -> Result<VolumeCoeffs, CryoError> {
    VolumeCoeffs::new(read_mrc(path)?.as_volume()?, *basis)
}

fn write_volume(path: &Path, v: &VolumeCoeffs) -> Result<(), CryoError> {
    write_mrc(path, &volume_to_mrc(&v.c, 1.0))
}

fn write_fsc_csv(path: &Path, curve: &FscCurve) -> Result<(), CryoError> {
    let mut out = String::from("frequency_per_voxel,fsc\n");
    for (r, v) in curve.radii.iter().zip(&curve.values) {
        out.push_str(&format!("{r:.17e},{v:.17e}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn run(command: Command) -> Result<(), CryoError> {
    match command {
        Command::Simulate {
            cfg,
            out_dir,
            p,
            n,
            m_t,
            snr_db,
            sigma,
            perturb,
        } => {
            let mut rc = cfg.load()?;
            if let Some(v) = p {
                rc.sim.p = v;
            }
            if let Some(v) = n {
                rc.sim.n = v;
            }
            if let Some(v) = m_t {
                rc.sim.m_t = v;
            }
            if let Some(raw) = snr_db {
                rc.sim.noise = parse_snr(&raw)?;
            }
            if let Some(s) = sigma {
                rc.sim.noise = NoiseSpec::Sigma(s);
            }
            cmd_simulate(&rc, &out_dir, perturb)
        }
        Command::Reconstruct {
            cfg,
            stack,
            poses,
            metadata,
            out_dir,
        } => {
            let mut rc = cfg.load()?;
            rc.joint.gd.k_gd = 0; // fixed poses by definition
            rc.joint.half_split = false;
            let meta = load_metadata(&stack, &metadata)?;
            let stack = load_stack(&stack, &poses, &meta)?;
            cmd_joint(&rc, &meta, stack, None, None, &out_dir)
        }
        Command::RefinePoses {
            cfg,
            stack,
            volume,
            poses,
            metadata,
            out,
        } => {
            let rc = cfg.load()?;
            let meta = load_metadata(&stack, &metadata)?;
            let stack = load_stack(&stack, &poses, &meta)?;
            let vol = load_volume(&volume, &meta.basis)?;
            cmd_refine_poses(&rc, &meta, &stack, &vol, &out)
        }
        Command::Joint {
            cfg,
            stack,
            poses,
            metadata,
            volume,
            truth_volume,
            half_split,
            out_dir,
        } => {
            let mut rc = cfg.load()?;
            if half_split {
                rc.joint.half_split = true;
            }
            let meta = load_metadata(&stack, &metadata)?;
            let stack = load_stack(&stack, &poses, &meta)?;
            let init = volume
                .map(|p| load_volume(&p, &meta.basis))
                .transpose()?;
            let truth = truth_volume
                .map(|p| load_volume(&p, &meta.basis))
                .transpose()?;
            cmd_joint(&rc, &meta, stack, init, truth, &out_dir)
        }
        Command::Fsc { a, b, out } => {
            let va = read_mrc(&a)?.as_volume()?;
            let vb = read_mrc(&b)?.as_volume()?;
            let curve = fsc(&va, &vb, DEFAULT_EPS_R)?;
            write_fsc_csv(&out, &curve)?;
            println!(
                "fsc: {} shells, area {:.4}, 0.5-crossing at {:.4} cycles/voxel",
                curve.values.len(),
                curve.area(),
                resolution_at_threshold(&curve, 0.5)
            );
            Ok(())
        }
        Command::PoseError {
            truth,
            est,
            out,
            component,
            bins,
            align,
        } => cmd_pose_error(&truth, &est, &out, component, bins, align),
        Command::Postprocess {
            half_a,
            half_b,
            input,
            out,
            threshold,
            mask_radius,
            fsc_out,
        } => {
            let basis = KbwfParams::default();
            let a = load_volume(&half_a, &basis)?;
            let b = load_volume(&half_b, &basis)?;
            let curve = fsc(&a.c, &b.c, DEFAULT_EPS_R)?;
            let vol = match input {
                Some(p) => load_volume(&p, &basis)?,
                None => VolumeCoeffs::new((&a.c + &b.c).mapv(|v| 0.5 * v), basis)?,
            };
            let result = postprocess(&vol, &curve, mask_radius, threshold);
            write_volume(&out, &result.volume)?;
            if let Some(p) = fsc_out {
                write_fsc_csv(&p, &curve)?;
            }
            match result.cutoff {
                Some(c) => println!("postprocess: low-pass cutoff {c:.4} cycles/voxel"),
                None => println!("postprocess: FSC below threshold everywhere; passthrough"),
            }
            Ok(())
        }
    }
}

fn parse_snr(raw: &str) -> Result<NoiseSpec, CryoError> {
    let t = raw.trim();
    if t.eq_ignore_ascii_case("+inf") || t.eq_ignore_ascii_case("inf") {
        return Ok(NoiseSpec::Noiseless);
    }
    let db: f64 = t
        .parse()
        .map_err(|_| CryoError::Config(format!("bad --snr-db value {raw:?}")))?;
    if db.is_infinite() && db > 0.0 {
        Ok(NoiseSpec::Noiseless)
    } else if db.is_finite() {
        Ok(NoiseSpec::SnrDb(db))
    } else {
        Err(CryoError::Config(format!("bad --snr-db value {raw:?}")))
    }
}

fn cmd_simulate(rc: &RunConfig, out_dir: &Path, perturb: Option<f64>) -> Result<(), CryoError> {
    rc.sim.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let basis = KbwfParams::default();
    let (coeffs, tables, dataset) = cryojoint::simulate::simulate(&rc.sim, &basis)?;
    let grid = tables.grid();

    let images: Vec<_> = dataset
        .stack
        .images
        .iter()
        .map(|img| img.data.clone())
        .collect();
    let delta = [grid.delta[0] as f32, grid.delta[1] as f32];
    write_mrc(&out_dir.join("stack.mrc"), &stack_to_mrc(&images, delta))?;
    write_poses(&out_dir.join("poses_true.csv"), &dataset.stack.poses, None)?;
    write_volume(&out_dir.join("volume_true.mrc"), &coeffs)?;
    if let Some(e) = perturb {
        let init =
            cryojoint::simulate::perturb_poses_init1(&dataset.stack.poses, e, rc.sim.seed);
        write_poses(&out_dir.join("poses_init.csv"), &init, None)?;
    }
    let pixels = (grid.m * grid.m) as f64;
    let snr_db_achieved = if dataset.sigma > 0.0 {
        10.0 * (dataset.mean_clean_energy / (dataset.sigma * dataset.sigma * pixels)).log10()
    } else {
        f64::INFINITY
    };
    let meta = StackMetadata {
        n: rc.sim.n,
        p: rc.sim.p,
        m: grid.m,
        delta: grid.delta,
        sigma: dataset.sigma,
        noise: rc.sim.noise,
        seed: rc.sim.seed,
        basis,
    };
    write_metadata(&out_dir.join("metadata.json"), &meta)?;
    println!(
        "simulate: wrote {} projections ({} x {}) at sigma {:.6e} (SNR {:.2} dB) to {}",
        rc.sim.p,
        grid.m,
        grid.m,
        dataset.sigma,
        snr_db_achieved,
        out_dir.display()
    );
    Ok(())
}

fn build_tables(
    meta: &StackMetadata,
) -> Result<cryojoint::PsiTables, CryoError> {
    let grid = DetectorGrid::new(meta.m, meta.delta)?;
    build_psi_tables(&meta.basis, &cryojoint::forward::Psf::Identity, &grid, None)
}

fn cmd_refine_poses(
    rc: &RunConfig,
    meta: &StackMetadata,
    stack: &ProjectionStack,
    vol: &VolumeCoeffs,
    out: &Path,
) -> Result<(), CryoError> {
    let tables = build_tables(meta)?;
    let batch = rc.joint.batch_size.unwrap_or(stack.len());
    let (poses, diags) = refine_latents_batched(&vol, stack, &tables, &rc.joint.gd, batch)?;
    write_poses(out, &poses, None)?;
    let stalled = diags.iter().filter(|d| d.stalled_rounds > 0).count();
    println!(
        "refine-poses: {} projections refined ({} with exhausted backtracking)",
        poses.len(),
        stalled
    );
    Ok(())
}

fn cmd_joint(
    rc: &RunConfig,
    meta: &StackMetadata,
    stack: ProjectionStack,
    init: Option<VolumeCoeffs>,
    truth: Option<VolumeCoeffs>,
    out_dir: &Path,
) -> Result<(), CryoError> {
    rc.joint.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let tables = build_tables(meta)?;
    let c0 = match init {
        Some(v) => v,
        None => VolumeCoeffs::zeros(meta.n, meta.basis),
    };
    if rc.joint.half_split {
        let result = half_split_refine(&stack, &c0, &tables, &rc.joint, truth.as_ref())?;
        write_volume(&out_dir.join("half_a.mrc"), &result.half_a)?;
        write_volume(&out_dir.join("half_b.mrc"), &result.half_b)?;
        write_volume(&out_dir.join("volume.mrc"), &result.average)?;
        write_poses(&out_dir.join("poses.csv"), &result.poses, None)?;
        write_fsc_csv(&out_dir.join("fsc_halfmaps.csv"), &result.fsc_halfmaps)?;
        std::fs::write(
            out_dir.join("trace_a.jsonl"),
            result.trace_a.to_jsonl(false),
        )?;
        std::fs::write(
            out_dir.join("trace_b.jsonl"),
            result.trace_b.to_jsonl(false),
        )?;
        println!(
            "joint (half-split): stopped after {} outer iterations, half-map FSC area {:.4}",
            result.stopped_after,
            result.fsc_halfmaps.area()
        );
    } else {
        let (volume, poses, trace) = joint_refine(&stack, &c0, &tables, &rc.joint, truth.as_ref())?;
        write_volume(&out_dir.join("volume.mrc"), &volume)?;
        write_poses(&out_dir.join("poses.csv"), &poses, None)?;
        std::fs::write(out_dir.join("trace.jsonl"), trace.to_jsonl(false))?;
        let last = trace.records.last();
        println!(
            "joint: {} outer iterations, final objective {}",
            trace.records.len(),
            last.map(|r| format!("{:.6e}", r.objective))
                .unwrap_or_else(|| "n/a".into())
        );
        for note in &trace.notes {
            println!("note: {note}");
        }
    }
    Ok(())
}

fn cmd_pose_error(
    truth: &Path,
    est: &Path,
    out: &Path,
    component: ComponentArg,
    bins: usize,
    align: bool,
) -> Result<(), CryoError> {
    let t = read_poses(truth)?;
    let e = read_poses(est)?;
    let comp = component.to_component();
    let hist = pose_error_pdf(&t.poses, &e.poses, comp, bins, align)?;
    // Angles are reported in degrees; densities rescale so the histogram
    // still integrates to 1 over the converted axis.
    let (scale, unit) = if comp.is_angle() {
        (180.0 / std::f64::consts::PI, "degrees")
    } else {
        (1.0, "px")
    };
    let mut csv = format!("error_{unit},density\n");
    for i in 0..hist.density.len() {
        let center = 0.5 * (hist.edges[i] + hist.edges[i + 1]) * scale;
        let density = hist.density[i] / scale;
        csv.push_str(&format!("{center:.17e},{density:.17e}\n"));
    }
    std::fs::write(out, csv)?;
    println!(
        "pose-error: {} std dev {:.4} {unit}",
        comp.label(),
        hist.std_dev() * scale
    );
    Ok(())
}
