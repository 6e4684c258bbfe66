//! TV-regularized volume update: ADMM with an inner conjugate-direction
//! linear solve.
//!
//! Minimizes 1/2 ||g - H c||^2 + lambda ||L c||_{2,1} over the expansion
//! coefficients c at fixed poses, where L is the forward-difference gradient.
//! Each round applies the proximal update of the auxiliary variable u ~ Lc,
//! a quadratic c-update solved through the cached normal-operator
//! convolution, and a dual ascent step.

use ndarray::{Array3, Array4, Axis};

use crate::error::CryoError;
use crate::forward::HthOperator;

/// Volume-update parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    /// TV regularization weight (>= 0).
    pub lambda: f64,
    /// ADMM penalty parameter (> 0).
    pub rho: f64,
    /// Outer ADMM rounds per volume update.
    pub k_admm: usize,
    /// Inner linear-solver iteration cap.
    pub cg_iters: usize,
    /// Inner linear-solver relative-residual tolerance.
    pub cg_tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            lambda: 0.0,
            rho: 1.0,
            k_admm: 2,
            cg_iters: 20,
            cg_tol: 1e-6,
        }
    }
}

impl AdmmConfig {
    /// Noise-scaled defaults: lambda = 0.01 * sigma * sqrt(P), rho = 10 * lambda.
    /// Falls back to rho = 1 when sigma = 0 (noiseless data).
    pub fn from_noise(sigma: f64, p: usize) -> Self {
        let lambda = 0.01 * sigma * (p as f64).sqrt();
        AdmmConfig {
            lambda,
            rho: if lambda > 0.0 { 10.0 * lambda } else { 1.0 },
            ..AdmmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), CryoError> {
        if self.lambda < 0.0 || !(self.rho > 0.0) || !(self.cg_tol > 0.0) {
            return Err(CryoError::Config(format!(
                "ADMM needs lambda >= 0, rho > 0, cg_tol > 0; got lambda = {}, rho = {}, cg_tol = {}",
                self.lambda, self.rho, self.cg_tol
            )));
        }
        Ok(())
    }
}

/// Split variables carried across warm-started volume updates.
#[derive(Debug, Clone)]
pub struct TvState {
    /// Auxiliary gradient-domain variable u ~ Lc (3 channels).
    pub u: Array4<f64>,
    /// Lagrange multiplier of the constraint u = Lc.
    pub u_dual: Array4<f64>,
}

impl TvState {
    /// Cold start as in the volume-update algorithm: u = Lc0, dual = u.
    pub fn init(c0: &Array3<f64>) -> Self {
        let u = grad3d(c0);
        TvState {
            u_dual: u.clone(),
            u,
        }
    }
}

/// Per-run diagnostics.
#[derive(Debug, Clone, Default)]
pub struct AdmmDiagnostics {
    /// Composite objective after each round, from the quadratic expansion
    /// 1/2 c^T (W*c) - c^T (H^T g) + 1/2 ||g||^2 + lambda TV(c).
    pub objective: Vec<f64>,
    /// Final relative residual of each inner linear solve.
    pub cg_residuals: Vec<f64>,
}

/// Forward-difference gradient with Neumann boundary (zero difference at the
/// far face). Output channel v holds c[k + e_v] - c[k].
pub fn grad3d(c: &Array3<f64>) -> Array4<f64> {
    let (n0, n1, n2) = c.dim();
    let mut out = Array4::<f64>::zeros((3, n0, n1, n2));
    for ((i, j, k), &v) in c.indexed_iter() {
        if i + 1 < n0 {
            out[(0, i, j, k)] = c[(i + 1, j, k)] - v;
        }
        if j + 1 < n1 {
            out[(1, i, j, k)] = c[(i, j + 1, k)] - v;
        }
        if k + 1 < n2 {
            out[(2, i, j, k)] = c[(i, j, k + 1)] - v;
        }
    }
    out
}

/// Exact discrete adjoint of `grad3d` (negative divergence):
/// <grad3d(c), u> = <c, grad3d_adjoint(u)> for all c, u.
pub fn grad3d_adjoint(u: &Array4<f64>) -> Array3<f64> {
    let (_, n0, n1, n2) = u.dim();
    let mut out = Array3::<f64>::zeros((n0, n1, n2));
    for ((i, j, k), o) in out.indexed_iter_mut() {
        let mut acc = 0.0;
        if i + 1 < n0 {
            acc -= u[(0, i, j, k)];
        }
        if i >= 1 {
            acc += u[(0, i - 1, j, k)];
        }
        if j + 1 < n1 {
            acc -= u[(1, i, j, k)];
        }
        if j >= 1 {
            acc += u[(1, i, j - 1, k)];
        }
        if k + 1 < n2 {
            acc -= u[(2, i, j, k)];
        }
        if k >= 1 {
            acc += u[(2, i, j, k - 1)];
        }
        *o = acc;
    }
    out
}

/// Isotropic TV value of a gradient field: sum over voxels of the Euclidean
/// norm of the 3-vector.
pub fn tv_norm(u: &Array4<f64>) -> f64 {
    let g0 = u.index_axis(Axis(0), 0);
    let g1 = u.index_axis(Axis(0), 1);
    let g2 = u.index_axis(Axis(0), 2);
    g0.iter()
        .zip(g1.iter())
        .zip(g2.iter())
        .map(|((a, b), c)| (a * a + b * b + c * c).sqrt())
        .sum()
}

/// TV of a coefficient volume.
pub fn tv_of(c: &Array3<f64>) -> f64 {
    tv_norm(&grad3d(c))
}

/// Proximity operator of mu * ||.||_{2,1}: per-voxel vector shrinkage
/// z_v <- z_v * max(0, 1 - mu / ||z_v||).
pub fn prox_l21(z: &Array4<f64>, mu: f64) -> Array4<f64> {
    assert!(mu >= 0.0);
    let mut out = z.clone();
    let (_, n0, n1, n2) = z.dim();
    for i in 0..n0 {
        for j in 0..n1 {
            for k in 0..n2 {
                let v = [z[(0, i, j, k)], z[(1, i, j, k)], z[(2, i, j, k)]];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let scale = if norm > mu { 1.0 - mu / norm } else { 0.0 };
                for ch in 0..3 {
                    out[(ch, i, j, k)] = v[ch] * scale;
                }
            }
        }
    }
    out
}

fn dot(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &Array3<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Solves A x = b for a symmetric positive semi-definite operator by the
/// conjugate-residual method (the conjugate-direction variant that minimizes
/// the residual norm, so the residual is non-increasing per iteration).
///
/// Returns the solution and the history of relative residuals (one entry per
/// completed iteration); the last entry is the achieved residual.
pub fn cg_solve<A>(
    apply_a: A,
    b: &Array3<f64>,
    x0: &Array3<f64>,
    max_iters: usize,
    tol: f64,
) -> (Array3<f64>, Vec<f64>)
where
    A: Fn(&Array3<f64>) -> Array3<f64>,
{
    let b_norm = norm(b);
    let mut x = x0.clone();
    if b_norm == 0.0 {
        // Minimum-norm convention: zero right-hand side yields x0 itself if
        // it already solves the system, else descend from x0 as usual.
        if norm(&apply_a(&x)) == 0.0 {
            return (x, vec![0.0]);
        }
    }
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let mut r = b - &apply_a(&x);
    let mut history = vec![norm(&r) / scale];
    if history[0] <= tol {
        return (x, history);
    }
    let mut p = r.clone();
    let mut ar = apply_a(&r);
    let mut ap = ar.clone();
    let mut rar = dot(&r, &ar);
    for _ in 0..max_iters {
        let apap = dot(&ap, &ap);
        if apap <= 0.0 || rar.abs() < f64::MIN_POSITIVE {
            break;
        }
        let alpha = rar / apap;
        x.zip_mut_with(&p, |xi, pi| *xi += alpha * pi);
        r.zip_mut_with(&ap, |ri, api| *ri -= alpha * api);
        let res = norm(&r) / scale;
        history.push(res);
        if res <= tol {
            break;
        }
        let ar_new = apply_a(&r);
        let rar_new = dot(&r, &ar_new);
        let beta = rar_new / rar;
        rar = rar_new;
        p.zip_mut_with(&r, |pi, ri| *pi = ri + beta * *pi);
        ap.zip_mut_with(&ar_new, |api, ari| *api = ari + beta * *api);
        ar = ar_new;
        let _ = &ar;
    }
    (x, history)
}

/// One TV-regularized volume update (a fixed number of ADMM rounds).
///
/// `htg` is H^T g for the current poses, `op` the matching normal operator,
/// `g_norm_sq` the squared norm of the measurement stack (used only for the
/// reported objective). `state` carries the split/dual variables for warm
/// starts; pass `None` to cold-start from c0.
pub fn admm_reconstruct(
    op: &HthOperator,
    htg: &Array3<f64>,
    c0: &Array3<f64>,
    state: Option<TvState>,
    cfg: &AdmmConfig,
    g_norm_sq: f64,
) -> Result<(Array3<f64>, TvState, AdmmDiagnostics), CryoError> {
    cfg.validate()?;
    let n = op.n();
    if c0.dim() != (n, n, n) || htg.dim() != (n, n, n) {
        return Err(CryoError::Shape(format!(
            "c0 {:?} / htg {:?} do not match operator n = {n}",
            c0.dim(),
            htg.dim()
        )));
    }
    let rho = cfg.rho;
    let mut c = c0.clone();
    let mut st = state.unwrap_or_else(|| TvState::init(&c));
    let mut diag = AdmmDiagnostics::default();
    for _ in 0..cfg.k_admm {
        // u-update: prox of the regularizer at Lc + dual/rho (the sign that
        // is consistent with the augmented Lagrangian +dual^T (Lc - u); with
        // the opposite sign the iteration diverges geometrically).
        let lc = grad3d(&c);
        let z = &lc + &st.u_dual.mapv(|v| v / rho);
        st.u = prox_l21(&z, cfg.lambda / rho);
        // c-update: (H^T H + rho L^T L) c = H^T g + rho L^T (u - dual/rho).
        let rhs_u = &st.u - &st.u_dual.mapv(|v| v / rho);
        let b = htg + &grad3d_adjoint(&rhs_u).mapv(|v| v * rho);
        let apply = |x: &Array3<f64>| {
            let mut y = op.apply(x).expect("shape checked above");
            let lap = grad3d_adjoint(&grad3d(x));
            y.zip_mut_with(&lap, |yi, li| *yi += rho * li);
            y
        };
        let (c_new, residuals) = cg_solve(apply, &b, &c, cfg.cg_iters, cfg.cg_tol);
        c = c_new;
        diag.cg_residuals.push(*residuals.last().unwrap());
        // Dual ascent along the constraint residual Lc - u.
        let lc = grad3d(&c);
        st.u_dual
            .zip_mut_with(&(&lc - &st.u), |d, gap| *d += rho * gap);
        let fidelity = 0.5 * dot(&c, &op.apply(&c)?) - dot(&c, htg) + 0.5 * g_norm_sq;
        diag.objective.push(fidelity + cfg.lambda * tv_norm(&lc));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(CryoError::NonFinite("ADMM coefficient update".into()));
    }
    Ok((c, st, diag))
}
