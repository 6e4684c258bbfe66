//! Synthetic data generation: procedural phantoms rendered into basis
//! coefficients, equi-distributed pose sampling, noise at a target dataset
//! SNR, and the uniform pose perturbation used to initialize refinement.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::cg_solve;
use crate::basis::KbwfParams;
use crate::error::CryoError;
use crate::fft::Conv3;
use crate::forward::{
    build_psi_tables, project, DetectorGrid, ProjectionImage, ProjectionStack, Psf, PsiTables,
    VolumeCoeffs,
};
use crate::geometry::{EulerAngles, InPlaneShift, Pose};

/// Noise level specification for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    /// No noise (sigma = 0).
    Noiseless,
    /// Dataset SNR target in dB: mean clean-image energy over expected
    /// noise energy, SNR_data = (1/P) sum_p ||g*_p||^2 / (m^2 sigma^2).
    SnrDb(f64),
    /// Explicit per-pixel noise standard deviation.
    Sigma(f64),
}

/// Serializable point-spread-function description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsfConfig {
    Identity,
    /// Odd-sized kernel given as rows.
    Kernel(Vec<Vec<f64>>),
}

impl Default for PsfConfig {
    fn default() -> Self {
        PsfConfig::Identity
    }
}

impl PsfConfig {
    pub fn to_psf(&self) -> Result<Psf, CryoError> {
        match self {
            PsfConfig::Identity => Ok(Psf::Identity),
            PsfConfig::Kernel(rows) => {
                let h = rows.len();
                let w = rows.first().map(|r| r.len()).unwrap_or(0);
                if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
                    return Err(CryoError::Config("ragged or empty PSF kernel".into()));
                }
                let mut k = Array2::<f64>::zeros((h, w));
                for (i, row) in rows.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        k[(i, j)] = *v;
                    }
                }
                Ok(Psf::Kernel(k))
            }
        }
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Volume coefficient grid size (n^3).
    pub n: usize,
    /// Number of projection images.
    pub p: usize,
    /// Maximum in-plane shift magnitude per axis (detector pixels).
    pub m_t: f64,
    /// Noise specification.
    pub noise: NoiseSpec,
    /// Master seed; every random stream is keyed by (seed, purpose, index).
    pub seed: u64,
    /// Point-spread function applied by the detector.
    pub psf: PsfConfig,
    /// Detector size override (odd); derived from n and m_t when absent.
    pub m: Option<usize>,
    /// Detector pixel spacing per axis.
    pub delta: [f64; 2],
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 32,
            p: 100,
            m_t: 0.0,
            noise: NoiseSpec::Noiseless,
            seed: 0,
            psf: PsfConfig::Identity,
            m: None,
            delta: [1.0, 1.0],
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), CryoError> {
        if self.p == 0 || self.n == 0 {
            return Err(CryoError::Config("need n >= 1 and P >= 1".into()));
        }
        if self.m_t < 0.0 {
            return Err(CryoError::Config("m_t must be >= 0".into()));
        }
        if let NoiseSpec::Sigma(s) = self.noise {
            if s < 0.0 {
                return Err(CryoError::Config("sigma must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Detector grid: explicit m when set, otherwise the smallest odd size
    /// covering every basis function under any orientation and shift.
    pub fn detector_grid(&self, basis: &KbwfParams) -> Result<DetectorGrid, CryoError> {
        let m = match self.m {
            Some(m) => m,
            None => {
                let extent =
                    (self.n as f64 - 1.0) / 2.0 * 3f64.sqrt() + basis.a + self.m_t + 1.0;
                let mut m = (2.0 * extent / self.delta[0].min(self.delta[1])).ceil() as usize + 1;
                if m % 2 == 0 {
                    m += 1;
                }
                m
            }
        };
        DetectorGrid::new(m, self.delta)
    }
}

/// Purpose tags separating the per-projection RNG streams.
const STREAM_THETA3: u64 = 1 << 32;
const STREAM_SHIFTS: u64 = 2 << 32;
const STREAM_NOISE: u64 = 3 << 32;
const STREAM_PERTURB: u64 = 4 << 32;
const STREAM_PHANTOM: u64 = 5 << 32;

fn stream_rng(seed: u64, purpose: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose | index as u64);
    rng
}

/// Orientations equi-distributed over the sphere: (theta1, theta2) from a
/// spherical Fibonacci lattice of P points (azimuth, polar), theta3 i.i.d.
/// uniform on [0, 2pi).
pub fn sample_orientations(p: usize, seed: u64) -> Vec<EulerAngles> {
    assert!(p >= 1);
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    (0..p)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / p as f64;
            let theta2 = z.clamp(-1.0, 1.0).acos();
            let theta1 = std::f64::consts::TAU * ((i as f64 / golden).fract());
            let theta3 = stream_rng(seed, STREAM_THETA3, i)
                .gen_range(0.0..std::f64::consts::TAU);
            EulerAngles::new(theta1, theta2, theta3)
        })
        .collect()
}

/// In-plane shifts with each component i.i.d. uniform on [-m_t, m_t].
pub fn sample_shifts(p: usize, m_t: f64, seed: u64) -> Vec<InPlaneShift> {
    assert!(m_t >= 0.0);
    (0..p)
        .map(|i| {
            if m_t == 0.0 {
                return InPlaneShift::default();
            }
            let mut rng = stream_rng(seed, STREAM_SHIFTS, i);
            InPlaneShift {
                t1: rng.gen_range(-m_t..=m_t),
                t2: rng.gen_range(-m_t..=m_t),
            }
        })
        .collect()
}

/// A generated dataset: noisy stack carrying the true poses, plus the clean
/// images and the noise level used.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Noisy projection images with the true poses attached.
    pub stack: ProjectionStack,
    /// Noiseless images in the same order.
    pub clean: Vec<ProjectionImage>,
    /// Per-pixel noise standard deviation applied.
    pub sigma: f64,
    /// Mean clean-image energy (1/P) sum ||g*_p||^2.
    pub mean_clean_energy: f64,
}

/// Generates P projections of the phantom under sampled poses and adds
/// Gaussian noise per the noise spec. Parallel across projections with
/// per-projection RNG streams, so the output never depends on scheduling.
pub fn generate_dataset(
    phantom: &VolumeCoeffs,
    cfg: &SimConfig,
    tables: &PsiTables,
) -> Result<Dataset, CryoError> {
    cfg.validate()?;
    if phantom.n() != cfg.n {
        return Err(CryoError::Shape(format!(
            "phantom n = {} but config n = {}",
            phantom.n(),
            cfg.n
        )));
    }
    let grid = *tables.grid();
    let angles = sample_orientations(cfg.p, cfg.seed);
    let shifts = sample_shifts(cfg.p, cfg.m_t, cfg.seed);
    let poses: Vec<Pose> = angles
        .into_iter()
        .zip(shifts)
        .map(|(a, s)| Pose::new(a, s))
        .collect();
    let clean: Vec<ProjectionImage> = poses
        .par_iter()
        .map(|pose| project(phantom, pose, tables, &grid))
        .collect();
    let mean_energy = clean
        .iter()
        .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / cfg.p as f64;
    let sigma = match cfg.noise {
        NoiseSpec::Noiseless => 0.0,
        NoiseSpec::Sigma(s) => s,
        NoiseSpec::SnrDb(db) => {
            if mean_energy <= 0.0 {
                return Err(CryoError::Config(
                    "SNR target undefined: clean images have zero energy".into(),
                ));
            }
            let pixels = (grid.m * grid.m) as f64;
            (mean_energy / (10f64.powf(db / 10.0) * pixels)).sqrt()
        }
    };
    let images: Vec<ProjectionImage> = if sigma == 0.0 {
        clean.clone()
    } else {
        clean
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let mut rng = stream_rng(cfg.seed, STREAM_NOISE, i);
                let normal = Normal::new(0.0, sigma).expect("sigma validated");
                let data = g.data.mapv(|v| v + normal.sample(&mut rng));
                ProjectionImage { data, grid }
            })
            .collect()
    };
    Ok(Dataset {
        stack: ProjectionStack::new(images, poses)?,
        clean,
        sigma,
        mean_clean_energy: mean_energy,
    })
}

/// Initialization model 1: each Euler component of each true pose gets an
/// independent uniform perturbation in [-e_theta, e_theta]; shifts start at
/// zero. Results are canonicalized.
pub fn perturb_poses_init1(true_poses: &[Pose], e_theta: f64, seed: u64) -> Vec<Pose> {
    assert!(e_theta >= 0.0);
    true_poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let a = if e_theta == 0.0 {
                p.angles
            } else {
                let mut rng = stream_rng(seed, STREAM_PERTURB, i);
                EulerAngles::new(
                    p.angles.theta1 + rng.gen_range(-e_theta..=e_theta),
                    p.angles.theta2 + rng.gen_range(-e_theta..=e_theta),
                    p.angles.theta3 + rng.gen_range(-e_theta..=e_theta),
                )
            };
            Pose::new(a, InPlaneShift::default())
        })
        .collect()
}

/// Procedural ground-truth density: a pseudo-atomic cloud of small isotropic
/// Gaussians (widths on the order of one voxel, so the volume keeps spectral
/// content out to a large fraction of Nyquist, like a real macromolecule)
/// plus a thin off-center spherical shell. Sampled on the n^3 voxel grid and
/// reproducible from the seed.
pub fn phantom_volume(n: usize, seed: u64) -> Array3<f64> {
    let mut rng = stream_rng(seed, STREAM_PHANTOM, 0);
    let c = (n as f64 - 1.0) / 2.0;
    let r_max = n as f64 / 2.0;
    // Centers stay well inside the grid so the density decays before the
    // edge (the basis fit degrades at the boundary otherwise).
    let r_centers = (0.55 * r_max).min(r_max - 5.0).max(0.2 * r_max);
    let n_atoms = (n * n * n / 500).max(6);
    let atoms: Vec<([f64; 3], f64, f64)> = (0..n_atoms)
        .map(|_| {
            let center = loop {
                let p = [
                    rng.gen_range(-r_centers..r_centers),
                    rng.gen_range(-r_centers..r_centers),
                    rng.gen_range(-r_centers..r_centers),
                ];
                if p.iter().map(|x| x * x).sum::<f64>() <= r_centers * r_centers {
                    break p;
                }
            };
            (center, rng.gen_range(0.9..1.3), rng.gen_range(0.5..1.5))
        })
        .collect();
    let shell_center = [
        rng.gen_range(-0.15..0.15) * r_max,
        rng.gen_range(-0.15..0.15) * r_max,
        rng.gen_range(-0.15..0.15) * r_max,
    ];
    let shell_radius = (rng.gen_range(0.35..0.5) * r_max).min(r_max - 5.0).max(1.0);
    let shell_width = 1.2;
    Array3::from_shape_fn((n, n, n), |(i, j, k)| {
        let x = [i as f64 - c, j as f64 - c, k as f64 - c];
        let mut v = 0.0;
        for (center, sigma, amp) in &atoms {
            let q = (0..3)
                .map(|d| (x[d] - center[d]).powi(2))
                .sum::<f64>()
                / (sigma * sigma);
            v += amp * (-0.5 * q).exp();
        }
        let r = (0..3)
            .map(|d| (x[d] - shell_center[d]).powi(2))
            .sum::<f64>()
            .sqrt();
        v += 0.8 * (-0.5 * ((r - shell_radius) / shell_width).powi(2)).exp();
        v
    })
}

/// Least-squares fit of basis coefficients to a voxel-sampled volume.
///
/// The synthesis operator A maps coefficients to voxel samples by convolution
/// with the basis function evaluated at integer offsets; A is symmetric, so
/// the normal equations A^T A c = A^T v are solved with A applied twice
/// inside the conjugate-direction solver.
pub fn fit_coefficients(
    volume: &Array3<f64>,
    basis: &KbwfParams,
    tol: f64,
    max_iters: usize,
) -> Result<VolumeCoeffs, CryoError> {
    let (n0, n1, n2) = volume.dim();
    if n0 != n1 || n1 != n2 {
        return Err(CryoError::Shape(format!(
            "fit needs a cubic volume, got {:?}",
            volume.dim()
        )));
    }
    let n = n0;
    let conv = synthesis_conv(basis, n);
    let b = conv.apply(volume);
    let apply = |x: &Array3<f64>| conv.apply(&conv.apply(x));
    let x0 = Array3::<f64>::zeros((n, n, n));
    let (c, _residuals) = cg_solve(apply, &b, &x0, max_iters, tol);
    VolumeCoeffs::new(c, *basis)
}

/// Synthesis operator A: convolution with the basis function sampled at
/// integer offsets. Maps coefficients to voxel samples of the density map.
fn synthesis_conv(basis: &KbwfParams, n: usize) -> Conv3 {
    let radius = basis.a.ceil() as isize;
    let k = 2 * n - 1;
    let off = n as isize - 1;
    let mut kernel = Array3::<f64>::zeros((k, k, k));
    for d0 in -radius..=radius {
        for d1 in -radius..=radius {
            for d2 in -radius..=radius {
                let r = ((d0 * d0 + d1 * d1 + d2 * d2) as f64).sqrt();
                if r <= basis.a {
                    kernel[(
                        (d0 + off) as usize,
                        (d1 + off) as usize,
                        (d2 + off) as usize,
                    )] = basis.value(r);
                }
            }
        }
    }
    Conv3::new(&kernel, n)
}

/// Renders the density map: voxel samples of the basis expansion on the
/// coefficient grid. Map-space comparisons (SNR, FSC) use this, since the
/// physically meaningful object is the map, not the coefficient array.
pub fn synthesize_volume(c: &VolumeCoeffs) -> Array3<f64> {
    synthesis_conv(&c.basis, c.n()).apply(&c.c)
}

/// Relative voxel-grid residual ||Ac - v|| / ||v|| of a coefficient fit.
pub fn fit_residual(c: &VolumeCoeffs, volume: &Array3<f64>) -> f64 {
    let rendered = synthesize_volume(c);
    let num = rendered
        .iter()
        .zip(volume.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den = volume.iter().map(|v| v * v).sum::<f64>().sqrt();
    num / den
}

/// Convenience: phantom, fitted coefficients, tables, and dataset in one go.
pub fn simulate(
    cfg: &SimConfig,
    basis: &KbwfParams,
) -> Result<(VolumeCoeffs, PsiTables, Dataset), CryoError> {
    cfg.validate()?;
    let target = phantom_volume(cfg.n, cfg.seed);
    let coeffs = fit_coefficients(&target, basis, 1e-8, 200)?;
    let grid = cfg.detector_grid(basis)?;
    let tables = build_psi_tables(basis, &cfg.psf.to_psf()?, &grid, None)?;
    let dataset = generate_dataset(&coeffs, cfg, &tables)?;
    Ok((coeffs, tables, dataset))
}
