//! Contraction systems, the rescaled process family, the limit set of the
//! functional iterated-logarithm law, and its desk-scale benchmark.
//!
//! The rescaling is `Z_u(t) = Gamma_{phi(u)}(Y(ut))` with
//! `phi(u) = sqrt(u log log u)`, `u > 3`. The limit set is
//! `K = { Phi(h) : ||h_dot||_2^2 <= 2 }` for the skeleton of the
//! transformed limit coefficients; distances to `K` come from a projected
//! descent over discretized controls and are upper bounds by construction.

use crate::error::{Error, Result};
use crate::measure_ops::EmpiricalMeasure;
use crate::model::{CoefficientSet, ModelCard};
use crate::mvsde_solver::{BrownianDriver, SimGrid};
use crate::optim;
use crate::path_space::{holder_norm, CameronMartinPath, Path};
use crate::rng::{tags, Stream};
use crate::skeleton_rate::SkeletonOptions;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// `phi(u) = sqrt(u log log u)`; requires `u > 3` (the spec's domain, on
/// which `log log u > 0`).
pub fn phi(u: f64) -> Result<f64> {
    if !(u > 3.0) {
        return Err(Error::invalid(format!("phi needs u > 3, got {u}")));
    }
    Ok((u * u.ln().ln()).sqrt())
}

type PointMap = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// A family of bijections `Gamma_alpha` fixing a center, contracting
/// second differences as `alpha` grows, with `Gamma_alpha^{-1} = Gamma_{1/alpha}`.
#[derive(Clone)]
pub struct ContractionSystem {
    center: Vec<f64>,
    apply_fn: Arc<PointMap>,
    /// Jacobian of `Gamma_alpha` at a point, row-major `d x d`.
    grad_fn: Option<Arc<PointMap>>,
    /// Hessian, layout `[(i,j), k]`, all `d^3` entries.
    hess_fn: Option<Arc<PointMap>>,
    pub is_linear: bool,
}

impl ContractionSystem {
    /// The linear system `Gamma_alpha(y) = (y - x)/alpha + x`.
    pub fn linear(center: Vec<f64>) -> Self {
        let d = center.len();
        let c1 = center.clone();
        let apply_fn = Arc::new(move |alpha: f64, y: &[f64], out: &mut [f64]| {
            for i in 0..d {
                out[i] = (y[i] - c1[i]) / alpha + c1[i];
            }
        });
        let grad_fn = Arc::new(move |alpha: f64, _y: &[f64], out: &mut [f64]| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = 1.0 / alpha;
            }
        });
        let hess_fn = Arc::new(move |_alpha: f64, _y: &[f64], out: &mut [f64]| out.fill(0.0));
        ContractionSystem {
            center,
            apply_fn,
            grad_fn: Some(grad_fn),
            hess_fn: Some(hess_fn),
            is_linear: true,
        }
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn apply(&self, alpha: f64, y: &[f64], out: &mut [f64]) {
        (self.apply_fn)(alpha, y, out);
    }

    pub fn apply_vec(&self, alpha: f64, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; y.len()];
        self.apply(alpha, y, &mut out);
        out
    }

    pub fn is_differentiable(&self) -> bool {
        self.grad_fn.is_some() && self.hess_fn.is_some()
    }

    /// Pushforward of `mu` under `Gamma_alpha^{-1} = Gamma_{1/alpha}`
    /// (the measure written `mu ∘ Gamma_alpha`).
    pub fn pushforward_inverse(&self, alpha: f64, mu: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
        let d = mu.dim();
        let mut atoms = Vec::with_capacity(mu.len() * d);
        let mut out = vec![0.0; d];
        for i in 0..mu.len() {
            self.apply(1.0 / alpha, mu.atom(i), &mut out);
            atoms.extend_from_slice(&out);
        }
        EmpiricalMeasure::new(d, atoms, mu.weights().to_vec())
    }
}

/// Probe report for the contraction-system axioms on random quadruples.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionProbeReport {
    pub samples: usize,
    pub worst_center_fix: f64,
    pub worst_identity: f64,
    pub worst_inversion: f64,
    pub worst_second_difference: f64,
    pub pass: bool,
}

/// Check: center fixed, `Gamma_1 = id`, `Gamma_alpha ∘ Gamma_{1/alpha} = id`
/// (within 1e-10), and the second-difference monotonicity for
/// `alpha >= beta` on random quadruples.
pub fn probe_contraction_system(
    sys: &ContractionSystem,
    samples: usize,
    box_radius: f64,
    seed: u64,
) -> ContractionProbeReport {
    let d = sys.dim();
    let mut worst_center = 0.0f64;
    let mut worst_id = 0.0f64;
    let mut worst_inv = 0.0f64;
    let mut worst_sd = 0.0f64;
    let mut buf = vec![0.0; d];
    let mut buf2 = vec![0.0; d];
    for i in 0..samples {
        let mut s = Stream::new(seed, tags::PROBE, i as u64, 3);
        let alpha = (s.next_uniform() * 3.0).exp(); // in [1, e^3)
        let beta = 1.0 + (alpha - 1.0) * s.next_uniform();
        let draw = |s: &mut Stream| -> Vec<f64> {
            (0..d).map(|_| s.next_symmetric(box_radius)).collect()
        };
        // center fixed
        sys.apply(alpha, &sys.center.clone(), &mut buf);
        worst_center = worst_center.max(dist(&buf, &sys.center));
        // Gamma_1 identity
        let y = draw(&mut s);
        sys.apply(1.0, &y, &mut buf);
        worst_id = worst_id.max(dist(&buf, &y));
        // inversion
        sys.apply(1.0 / alpha, &y, &mut buf);
        sys.apply(alpha, &buf.clone(), &mut buf2);
        worst_inv = worst_inv.max(dist(&buf2, &y));
        // second difference monotonicity: alpha >= beta
        let (y1, y2, z1, z2) = (draw(&mut s), draw(&mut s), draw(&mut s), draw(&mut s));
        let sd = |a: f64| -> f64 {
            let mut acc = vec![0.0; d];
            let mut t = vec![0.0; d];
            sys.apply(a, &y1, &mut t);
            for i in 0..d {
                acc[i] += t[i];
            }
            sys.apply(a, &y2, &mut t);
            for i in 0..d {
                acc[i] -= t[i];
            }
            sys.apply(a, &z1, &mut t);
            for i in 0..d {
                acc[i] -= t[i];
            }
            sys.apply(a, &z2, &mut t);
            for i in 0..d {
                acc[i] += t[i];
            }
            acc.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let excess = sd(alpha) - sd(beta);
        worst_sd = worst_sd.max(excess);
    }
    ContractionProbeReport {
        samples,
        worst_center_fix: worst_center,
        worst_identity: worst_id,
        worst_inversion: worst_inv,
        worst_second_difference: worst_sd,
        pass: worst_center <= 1e-10 && worst_id <= 1e-10 && worst_inv <= 1e-10 && worst_sd <= 1e-12,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `Z_u(t_k) = Gamma_{phi(u)}(Y(u t_k))` on a `[0, 1]` grid with `n_z`
/// cells. `u` must be grid-exact: `u * k / n_z` has to land on the long
/// grid for every `k`.
pub fn rescale(
    gamma: &ContractionSystem,
    y_path: &Path,
    u: f64,
    n_z: usize,
) -> Result<Path> {
    let ph = phi(u)?;
    let big_u = y_path.horizon();
    if u > big_u * (1.0 + 1e-12) {
        return Err(Error::invalid(format!("u = {u} beyond the horizon {big_u}")));
    }
    let steps_per_unit = y_path.grid_size() as f64 / big_u;
    let step_ratio = u * steps_per_unit / n_z as f64;
    if (step_ratio - step_ratio.round()).abs() > 1e-9 || step_ratio < 1.0 - 1e-9 {
        return Err(Error::GridIncompatible(format!(
            "u = {u} is not grid-exact for n_z = {n_z} at {steps_per_unit} steps per unit"
        )));
    }
    let ratio = step_ratio.round() as usize;
    let d = y_path.dim();
    let mut values = vec![0.0f64; (n_z + 1) * d];
    let mut out = vec![0.0; d];
    for k in 0..=n_z {
        gamma.apply(ph, y_path.value(k * ratio), &mut out);
        values[k * d..(k + 1) * d].copy_from_slice(&out);
    }
    Path::new(1.0, d, values)
}

// ---------------------------------------------------------------------------
// Transformed coefficients
// ---------------------------------------------------------------------------

/// `sigma_hat_u(y, mu) = phi(u) ∇Gamma_{phi(u)}(z)^T sigma(z, mu ∘ Gamma_{phi(u)})`
/// with `z = Gamma_{1/phi(u)}(y)`; row-major `d x d_w` into `out`.
pub fn sigma_hat_u(
    gamma: &ContractionSystem,
    cs: &CoefficientSet,
    u: f64,
    y: &[f64],
    mu: &EmpiricalMeasure,
    out: &mut [f64],
) -> Result<()> {
    let ph = phi(u)?;
    let grad = gamma
        .grad_fn
        .as_ref()
        .ok_or_else(|| Error::UnsupportedConfiguration("contraction system is not differentiable".into()))?;
    let d = cs.dim_x;
    let dw = cs.dim_w;
    let z = gamma.apply_vec(1.0 / ph, y);
    let nu = gamma.pushforward_inverse(ph, mu)?;
    let mut jac = vec![0.0; d * d];
    grad(ph, &z, &mut jac);
    let mut sig = vec![0.0; d * dw];
    cs.diffusion(0.0, &z, &nu, &mut sig);
    for i in 0..d {
        for k in 0..dw {
            let mut acc = 0.0;
            for j in 0..d {
                // (J^T sigma)_{ik} = sum_j J_{ji} sigma_{jk}
                acc += jac[j * d + i] * sig[j * dw + k];
            }
            out[i * dw + k] = ph * acc;
        }
    }
    Ok(())
}

/// `b_hat_u(y, mu) = u [ ∇Gamma^T b + 1/2 (sigma sigma^T) : Hess Gamma ]`
/// evaluated at `z = Gamma_{1/phi(u)}(y)` with the pushforward measure.
pub fn b_hat_u(
    gamma: &ContractionSystem,
    cs: &CoefficientSet,
    u: f64,
    y: &[f64],
    mu: &EmpiricalMeasure,
    out: &mut [f64],
) -> Result<()> {
    let ph = phi(u)?;
    let (grad, hess) = match (&gamma.grad_fn, &gamma.hess_fn) {
        (Some(g), Some(h)) => (g, h),
        _ => {
            return Err(Error::UnsupportedConfiguration(
                "contraction system is not twice differentiable".into(),
            ))
        }
    };
    let d = cs.dim_x;
    let dw = cs.dim_w;
    let z = gamma.apply_vec(1.0 / ph, y);
    let nu = gamma.pushforward_inverse(ph, mu)?;
    let mut jac = vec![0.0; d * d];
    grad(ph, &z, &mut jac);
    let mut hmat = vec![0.0; d * d * d];
    hess(ph, &z, &mut hmat);
    let mut b = vec![0.0; d];
    cs.drift(0.0, &z, &nu, &mut b);
    let mut sig = vec![0.0; d * dw];
    cs.diffusion(0.0, &z, &nu, &mut sig);
    // a = sigma sigma^T
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..dw {
                acc += sig[i * dw + k] * sig[j * dw + k];
            }
            a[i * d + j] = acc;
        }
    }
    for comp in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += jac[comp * d + j] * b[j];
        }
        let mut hess_term = 0.0;
        for i in 0..d {
            for j in 0..d {
                hess_term += a[i * d + j] * hmat[(i * d + j) * d + comp];
            }
        }
        out[comp] = u * (acc + 0.5 * hess_term);
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TransformedRow {
    pub u: f64,
    pub sigma_gap_to_limit: Option<f64>,
    pub b_gap_to_limit: Option<f64>,
    pub sigma_hat_norm: f64,
    pub b_hat_norm: f64,
}

/// Evaluate `sigma_hat_u`, `b_hat_u` on probe points along increasing `u`
/// and report gaps to the declared limits, when given.
#[allow(clippy::type_complexity)]
pub fn transformed_coefficients_report(
    gamma: &ContractionSystem,
    cs: &CoefficientSet,
    u_list: &[f64],
    probe_points: &[Vec<f64>],
    mu: &EmpiricalMeasure,
    limit_sigma: Option<&dyn Fn(&[f64], &EmpiricalMeasure, &mut [f64])>,
    limit_b: Option<&dyn Fn(&[f64], &EmpiricalMeasure, &mut [f64])>,
) -> Result<Vec<TransformedRow>> {
    let d = cs.dim_x;
    let dw = cs.dim_w;
    let mut rows = Vec::with_capacity(u_list.len());
    for &u in u_list {
        let mut sig_gap: f64 = 0.0;
        let mut b_gap: f64 = 0.0;
        let mut sig_norm: f64 = 0.0;
        let mut b_norm: f64 = 0.0;
        let mut sh = vec![0.0; d * dw];
        let mut bh = vec![0.0; d];
        let mut sref = vec![0.0; d * dw];
        let mut bref = vec![0.0; d];
        for y in probe_points {
            sigma_hat_u(gamma, cs, u, y, mu, &mut sh)?;
            b_hat_u(gamma, cs, u, y, mu, &mut bh)?;
            sig_norm = sig_norm.max(sh.iter().map(|v| v * v).sum::<f64>().sqrt());
            b_norm = b_norm.max(bh.iter().map(|v| v * v).sum::<f64>().sqrt());
            if let Some(ls) = limit_sigma {
                ls(y, mu, &mut sref);
                sig_gap = sig_gap.max(dist(&sh, &sref));
            }
            if let Some(lb) = limit_b {
                lb(y, mu, &mut bref);
                b_gap = b_gap.max(dist(&bh, &bref));
            }
        }
        rows.push(TransformedRow {
            u,
            sigma_gap_to_limit: limit_sigma.map(|_| sig_gap),
            b_gap_to_limit: limit_b.map(|_| b_gap),
            sigma_hat_norm: sig_norm,
            b_hat_norm: b_norm,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// The limit set and distances to it
// ---------------------------------------------------------------------------

/// `K = { Phi(h) : ||h_dot||_2^2 <= energy_cap }` explored through the
/// optimizer (never enumerated; all distances are upper bounds).
#[derive(Clone)]
pub struct LimitSetK {
    /// Limit coefficients `(b_hat, sigma_hat)` generating the skeleton.
    pub cs: CoefficientSet,
    pub x: Vec<f64>,
    pub energy_cap: f64,
    pub control_cells: usize,
}

impl LimitSetK {
    pub fn new(cs: CoefficientSet, x: Vec<f64>, control_cells: usize) -> Self {
        LimitSetK {
            cs,
            x,
            energy_cap: 2.0,
            control_cells,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistanceResult {
    /// Upper bound on `d_alpha(z, K)`.
    pub distance: f64,
    pub minimizer: CameronMartinPath,
    pub minimizer_energy: f64,
    /// Set when the descent was still improving when the budget ran out.
    pub budget_flag: bool,
}

struct DistanceModel<'a> {
    cs: &'a CoefficientSet,
    x: &'a [f64],
    psi: Vec<f64>,
    z: &'a Path,
    alpha: f64,
    n: usize,
    m: usize,
    dt: f64,
}

impl<'a> DistanceModel<'a> {
    fn forward(&self, u: &[f64]) -> Vec<f64> {
        let d = self.cs.dim_x;
        let dw = self.cs.dim_w;
        let ratio = self.n / self.m;
        let mut f = vec![0.0f64; (self.n + 1) * d];
        f[..d].copy_from_slice(self.x);
        let mut b = vec![0.0f64; d];
        let mut sg = vec![0.0f64; d * dw];
        for k in 0..self.n {
            let cell = k / ratio;
            let t = k as f64 * self.dt;
            let mu = EmpiricalMeasure::dirac(&self.psi[k * d..(k + 1) * d]);
            let xk = f[k * d..(k + 1) * d].to_vec();
            self.cs.drift(t, &xk, &mu, &mut b);
            self.cs.diffusion(t, &xk, &mu, &mut sg);
            for i in 0..d {
                let mut add = 0.0;
                for c in 0..dw {
                    add += sg[i * dw + c] * u[cell * dw + c];
                }
                f[(k + 1) * d + i] = f[k * d + i] + (b[i] + add) * self.dt;
            }
        }
        f
    }

    /// Hard objective `||z - f(u)||_alpha` with its argmax-pair subgradient.
    fn objective(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.cs.dim_x;
        let dw = self.cs.dim_w;
        let ratio = self.n / self.m;
        let f = self.forward(u);
        // diff = z - f at nodes
        let zv = self.z.values();
        let diff: Vec<f64> = zv.iter().zip(&f).map(|(a, b)| a - b).collect();
        let mut best = -1.0f64;
        let mut arg = (0usize, 1usize);
        for i in 0..self.n {
            for j in (i + 1)..=self.n {
                let mut n2 = 0.0;
                for c in 0..d {
                    let dd = diff[j * d + c] - diff[i * d + c];
                    n2 += dd * dd;
                }
                let q = n2.sqrt() * (((j - i) as f64) * self.dt).powf(-self.alpha);
                if q > best {
                    best = q;
                    arg = (i, j);
                }
            }
        }
        let (i, j) = arg;
        let gap = (((j - i) as f64) * self.dt).powf(-self.alpha);
        let mut dir = vec![0.0; d];
        let mut n2 = 0.0;
        for c in 0..d {
            dir[c] = diff[j * d + c] - diff[i * d + c];
            n2 += dir[c] * dir[c];
        }
        let nrm = n2.sqrt().max(1e-300);
        // seed on f-nodes: d|..|/df_j = -gap * dir/nrm, d/df_i = +gap * dir/nrm
        let mut seed = vec![0.0f64; (self.n + 1) * d];
        for c in 0..d {
            seed[j * d + c] = -gap * dir[c] / nrm;
            seed[i * d + c] = gap * dir[c] / nrm;
        }
        // adjoint through the Euler recursion
        grad.fill(0.0);
        let mut lambda = vec![0.0f64; d];
        for c in 0..d {
            lambda[c] = seed[self.n * d + c];
        }
        let mut jac_b = vec![0.0f64; d * d];
        let mut jac_s = vec![0.0f64; d * dw * d];
        let mut sg = vec![0.0f64; d * dw];
        for k in (0..self.n).rev() {
            let cell = k / ratio;
            let t = k as f64 * self.dt;
            let mu = EmpiricalMeasure::dirac(&self.psi[k * d..(k + 1) * d]);
            let xk = &f[k * d..(k + 1) * d];
            self.cs.diffusion(t, xk, &mu, &mut sg);
            for c in 0..dw {
                let mut acc = 0.0;
                for ii in 0..d {
                    acc += sg[ii * dw + c] * lambda[ii];
                }
                grad[cell * dw + c] += self.dt * acc;
            }
            self.cs
                .drift_jacobian(t, xk, &mu, &mut jac_b)
                .expect("distance model needs Jacobians");
            self.cs
                .diffusion_jacobian(t, xk, &mu, &mut jac_s)
                .expect("distance model needs Jacobians");
            let mut new_lambda = vec![0.0f64; d];
            for jj in 0..d {
                let mut pull = 0.0;
                for ii in 0..d {
                    let mut jij = if ii == jj { 1.0 } else { 0.0 };
                    jij += self.dt * jac_b[ii * d + jj];
                    let mut st = 0.0;
                    for c in 0..dw {
                        st += jac_s[(ii * dw + c) * d + jj] * u[cell * dw + c];
                    }
                    jij += self.dt * st;
                    pull += jij * lambda[ii];
                }
                new_lambda[jj] = pull + seed[k * d + jj];
            }
            lambda = new_lambda;
        }
        best
    }
}

/// Upper bound on `d_alpha(z, K)`: projected quasi-Newton descent (argmax
/// subgradients) plus a subgradient polish, multi-start, projection by
/// energy rescaling onto the cap. A warm start can be supplied to couple
/// solutions along a sweep.
pub fn distance_to_k(
    z: &Path,
    k_set: &LimitSetK,
    alpha: f64,
    budget_iters: usize,
    seed: u64,
    warm_start: Option<&CameronMartinPath>,
    skel_opts: &SkeletonOptions,
) -> Result<DistanceResult> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid("alpha must lie in (0, 1/2)"));
    }
    let cs = &k_set.cs;
    if !cs.has_jacobians() {
        return Err(Error::UnsupportedConfiguration(
            "distance_to_k needs coefficient Jacobians".into(),
        ));
    }
    let n = z.grid_size();
    let m = k_set.control_cells;
    if n % m != 0 {
        return Err(Error::GridIncompatible("control cells must divide the z grid".into()));
    }
    let dw = cs.dim_w;
    let psi = crate::skeleton_rate::solve_psi(cs, &k_set.x, n, z.horizon(), skel_opts)?.path;
    let model = DistanceModel {
        cs,
        x: &k_set.x,
        psi: psi.values().to_vec(),
        z,
        alpha,
        n,
        m,
        dt: z.horizon() / n as f64,
    };
    let cap = k_set.energy_cap;
    let dt_h = z.horizon() / m as f64;
    let project = move |u: &mut [f64]| {
        let e: f64 = u.iter().map(|v| v * v).sum::<f64>() * dt_h;
        if e > cap {
            let s = (cap / e).sqrt();
            for v in u.iter_mut() {
                *v *= s;
            }
        }
    };

    // block-derivative init: the control that tracks z cell-averages
    let ratio = n / m;
    let mut block_init = vec![0.0f64; m * dw];
    if dw == z.dim() {
        for c in 0..m {
            for w in 0..dw {
                let a = z.value(c * ratio)[w];
                let b = z.value((c + 1) * ratio)[w];
                block_init[c * dw + w] = (b - a) / dt_h;
            }
        }
    }
    let mut starts: Vec<Vec<f64>> = vec![block_init.clone(), vec![0.0; m * dw]];
    if let Some(wstart) = warm_start {
        starts.insert(0, wstart.derivative().to_vec());
    }
    let mut s = Stream::new(seed, tags::OPTIMIZER, 1, 1);
    starts.push(
        block_init
            .iter()
            .map(|v| v + 0.2 * s.next_normal())
            .collect(),
    );

    let results: Vec<(f64, Vec<f64>, bool)> = starts
        .into_par_iter()
        .map(|start| {
            let lb = optim::minimize(
                |u, g| model.objective(u, g),
                start,
                Some(&project),
                &optim::LbfgsOptions {
                    max_iters: budget_iters / 2,
                    ..Default::default()
                },
            );
            let before_polish = lb.value;
            let po = optim::subgradient_polish(
                |u, g| model.objective(u, g),
                lb.x,
                &project,
                budget_iters / 2,
                0.05 * (1.0 + before_polish),
            );
            let still_improving = before_polish - po.value > 1e-6 * (1.0 + po.value);
            (po.value, po.x, still_improving)
        })
        .collect();

    let mut best = results[0].clone();
    for cand in results.into_iter().skip(1) {
        if cand.0 < best.0 - 1e-15 || ((cand.0 - best.0).abs() <= 1e-15 && cand.1 < best.1) {
            best = cand;
        }
    }
    let h = CameronMartinPath::new(z.horizon(), dw, best.1)?;
    Ok(DistanceResult {
        distance: best.0,
        minimizer_energy: h.energy(),
        minimizer: h,
        budget_flag: best.2,
    })
}

// ---------------------------------------------------------------------------
// The benchmark experiment
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StrassenOptions {
    /// Long-grid resolution per unit time (the halving study simulates at
    /// `2 * n_per_unit` once and subsamples, so both levels observe the
    /// same trajectory).
    pub n_per_unit: usize,
    /// Grid cells of each rescaled path on `[0, 1]`.
    pub n_z: usize,
    /// Control cells for the limit-set distance.
    pub n_h: usize,
    pub c: f64,
    pub alpha: f64,
    /// u-samples per octave for the within-level oscillation.
    pub u_samples: usize,
    pub distance_iters: usize,
    pub epsilon: f64,
    pub halving_study: bool,
}

impl Default for StrassenOptions {
    fn default() -> Self {
        StrassenOptions {
            n_per_unit: 64,
            n_z: 256,
            n_h: 32,
            c: 2.0,
            alpha: 0.25,
            u_samples: 4,
            distance_iters: 160,
            epsilon: 1.0,
            halving_study: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct JLevelStats {
    pub j: u32,
    pub u: f64,
    pub median_d_alpha: f64,
    pub median_a_jc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrassenReport {
    pub trajectories: usize,
    pub horizon: f64,
    pub c: f64,
    pub alpha: f64,
    pub j_levels: Vec<JLevelStats>,
    /// Per-trajectory sup over grid `u` in `[sqrt(U), U]` of
    /// `|Z_u(1) - x|`: the window that makes the statistic a consistent
    /// estimator of the iterated-logarithm limit.
    pub per_traj_sup: Vec<f64>,
    pub limsup_proxy_mean: f64,
    pub limsup_proxy_median: f64,
    pub limsup_proxy_min: f64,
    pub limsup_proxy_max: f64,
    /// Same statistic observed on the coarse (subsampled) grid.
    pub limsup_proxy_mean_coarse: Option<f64>,
    pub halving_delta: Option<f64>,
    pub d_alpha_last5_nonincreasing: bool,
    /// Least-squares slope of median d_alpha against j.
    pub d_alpha_trend_slope: f64,
    pub a_jc_last5_nonincreasing: bool,
}

/// Run the iterated-logarithm benchmark: one long trajectory per seed,
/// rescaled at the levels `u_j = c^j`, with distances to the limit set and
/// the within-octave oscillation, plus the windowed limsup proxy.
pub fn strassen_experiment(
    card: &ModelCard,
    gamma: &ContractionSystem,
    big_u: f64,
    trajectories: usize,
    seed: u64,
    opts: &StrassenOptions,
    skel_opts: &SkeletonOptions,
) -> Result<StrassenReport> {
    let cs = &card.coefficients;
    let d = cs.dim_x;
    if !(opts.c > 1.0) {
        return Err(Error::invalid("c must exceed 1"));
    }
    let j_levels: Vec<u32> = (1..64)
        .filter(|j| {
            let u = opts.c.powi(*j as i32);
            u > 3.0 && u <= big_u
        })
        .map(|j| j as u32)
        .collect();
    if j_levels.len() < 8 {
        return Err(Error::invalid("horizon too short for 8 contraction levels"));
    }
    // grid-exactness of u: u must be a multiple of n_z / n_per_unit units
    let quantum = opts.n_z as f64 / opts.n_per_unit as f64;
    let snap_u = |u: f64| -> f64 { (u / quantum).round().max(1.0) * quantum };

    let mut level_us: Vec<f64> = Vec::new();
    let mut sample_us: Vec<Vec<f64>> = Vec::new();
    for &j in &j_levels {
        let u = snap_u(opts.c.powi(j as i32));
        level_us.push(u);
        let lo = opts.c.powi(j as i32 - 1);
        let mut us: Vec<f64> = (1..=opts.u_samples)
            .map(|q| {
                let frac = q as f64 / opts.u_samples as f64;
                snap_u(lo * (u / lo).powf(frac))
            })
            .filter(|v| *v > 3.0 && *v <= u)
            .collect();
        us.dedup();
        sample_us.push(us);
    }

    let fine_per_unit = if opts.halving_study {
        2 * opts.n_per_unit
    } else {
        opts.n_per_unit
    };
    let window_lo = big_u.sqrt();

    // all long-grid step indices that must be recorded
    let mut needed: Vec<u64> = Vec::new();
    for (li, &u) in level_us.iter().enumerate() {
        for k in 0..=opts.n_z {
            needed.push((u * fine_per_unit as f64 * k as f64 / opts.n_z as f64).round() as u64);
        }
        for &us in &sample_us[li] {
            for k in 0..=opts.n_z {
                needed.push((us * fine_per_unit as f64 * k as f64 / opts.n_z as f64).round() as u64);
            }
        }
    }
    needed.sort_unstable();
    needed.dedup();

    let center = gamma.center().to_vec();
    struct TrajOut {
        recorded: Vec<f64>,
        sup_fine: f64,
        sup_coarse: f64,
    }

    let total_steps = (big_u * fine_per_unit as f64).round() as u64;
    let grid = SimGrid::new(big_u, total_steps as usize)?;
    let traj_outputs: Vec<TrajOut> = (0..trajectories)
        .into_par_iter()
        .map(|traj| -> Result<TrajOut> {
            let driver = BrownianDriver::new(seed, cs.dim_w, grid);
            let dt = grid.dt();
            let sqrt_eps = opts.epsilon.sqrt();
            let mut x = card.default_x0.clone();
            let mut recorded = vec![0.0f64; needed.len() * d];
            let mut next_needed = 0usize;
            if !needed.is_empty() && needed[0] == 0 {
                recorded[..d].copy_from_slice(&x);
                next_needed = 1;
            }
            let mut dw = vec![0.0f64; cs.dim_w];
            let mut b = vec![0.0f64; d];
            let mut sg = vec![0.0f64; d * cs.dim_w];
            let dummy = EmpiricalMeasure::dirac(&vec![0.0; d]);
            let law_dep = cs.is_law_dependent();
            let mut sup_fine = 0.0f64;
            let mut sup_coarse = 0.0f64;
            let mut zbuf = vec![0.0; d];
            for k in 0..total_steps {
                let t = k as f64 * dt;
                driver.increments(traj as u64, k, &mut dw);
                if law_dep {
                    let mu = EmpiricalMeasure::dirac(&x);
                    crate::mvsde_solver::step_particle(
                        cs, t, dt, sqrt_eps, &mut x, &mu, &dw, &mut b, &mut sg,
                    );
                } else {
                    crate::mvsde_solver::step_particle(
                        cs, t, dt, sqrt_eps, &mut x, &dummy, &dw, &mut b, &mut sg,
                    );
                }
                let step = k + 1;
                if next_needed < needed.len() && needed[next_needed] == step {
                    recorded[next_needed * d..(next_needed + 1) * d].copy_from_slice(&x);
                    next_needed += 1;
                }
                let u_now = step as f64 / fine_per_unit as f64;
                if u_now >= window_lo {
                    let ph = (u_now * u_now.ln().ln()).sqrt();
                    gamma.apply(ph, &x, &mut zbuf);
                    let r = dist(&zbuf, &center);
                    if r > sup_fine {
                        sup_fine = r;
                    }
                    if step % 2 == 0 || fine_per_unit == opts.n_per_unit {
                        if r > sup_coarse {
                            sup_coarse = r;
                        }
                    }
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        step: step as usize,
                        context: format!("long trajectory {traj}"),
                    });
                }
            }
            Ok(TrajOut {
                recorded,
                sup_fine,
                sup_coarse,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // limit coefficients: for the linear system the built-ins declare
    // sigma_hat = sigma; drift limit is zero for drift-free models.
    let k_set = LimitSetK::new(cs.clone(), card.default_x0.clone(), opts.n_h);

    let lookup = |rec: &[f64], step: u64| -> Vec<f64> {
        let idx = needed.binary_search(&step).expect("recorded step");
        rec[idx * d..(idx + 1) * d].to_vec()
    };
    let z_path_at = |rec: &[f64], u: f64| -> Result<Path> {
        let ph = phi(u)?;
        let mut values = vec![0.0f64; (opts.n_z + 1) * d];
        let mut out = vec![0.0; d];
        for k in 0..=opts.n_z {
            let step = (u * fine_per_unit as f64 * k as f64 / opts.n_z as f64).round() as u64;
            let y = lookup(rec, step);
            gamma.apply(ph, &y, &mut out);
            values[k * d..(k + 1) * d].copy_from_slice(&out);
        }
        Path::new(1.0, d, values)
    };

    // per-trajectory sweep over levels (warm-started distances)
    let per_traj: Vec<(Vec<f64>, Vec<f64>)> = traj_outputs
        .par_iter()
        .enumerate()
        .map(|(traj, out)| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut d_alphas = Vec::with_capacity(level_us.len());
            let mut a_jcs = Vec::with_capacity(level_us.len());
            let mut warm: Option<CameronMartinPath> = None;
            for (li, &u) in level_us.iter().enumerate() {
                let z = z_path_at(&out.recorded, u)?;
                let dres = distance_to_k(
                    &z,
                    &k_set,
                    opts.alpha,
                    opts.distance_iters,
                    seed ^ (traj as u64) << 20 ^ (li as u64),
                    warm.as_ref(),
                    skel_opts,
                )?;
                warm = Some(dres.minimizer.clone());
                d_alphas.push(dres.distance);

                let ph_j = phi(u)?;
                let mut a_jc = 0.0f64;
                for &us in &sample_us[li] {
                    if us >= u {
                        continue;
                    }
                    let zu = z_path_at(&out.recorded, us)?;
                    let ph_u = phi(us)?;
                    // Gamma_{phi(u)} ∘ Gamma_{phi(c^j)}^{-1} applied to Z_{c^j}
                    let mut target = vec![0.0f64; (opts.n_z + 1) * d];
                    let mut t1 = vec![0.0; d];
                    let mut t2 = vec![0.0; d];
                    let zj = z_path_at(&out.recorded, u)?;
                    for k in 0..=opts.n_z {
                        gamma.apply(1.0 / ph_j, zj.value(k), &mut t1);
                        gamma.apply(ph_u, &t1, &mut t2);
                        target[k * d..(k + 1) * d].copy_from_slice(&t2);
                    }
                    let diff: Vec<f64> = zu
                        .values()
                        .iter()
                        .zip(&target)
                        .map(|(a, b)| a - b)
                        .collect();
                    let dp = Path::new(1.0, d, diff)?;
                    a_jc = a_jc.max(holder_norm(&dp, opts.alpha)?);
                }
                a_jcs.push(a_jc);
            }
            Ok((d_alphas, a_jcs))
        })
        .collect::<Result<Vec<_>>>()?;

    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };

    let mut j_stats = Vec::with_capacity(level_us.len());
    let mut d_medians = Vec::new();
    let mut a_medians = Vec::new();
    for li in 0..level_us.len() {
        let mut ds: Vec<f64> = per_traj.iter().map(|p| p.0[li]).collect();
        let mut asv: Vec<f64> = per_traj.iter().map(|p| p.1[li]).collect();
        let dm = median(&mut ds);
        let am = median(&mut asv);
        d_medians.push(dm);
        a_medians.push(am);
        j_stats.push(JLevelStats {
            j: j_levels[li],
            u: level_us[li],
            median_d_alpha: dm,
            median_a_jc: am,
        });
    }

    let last5 = d_medians.len().saturating_sub(5);
    let d_last5_noninc = d_medians[last5..].windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let a_last5_noninc = a_medians[last5..].windows(2).all(|w| w[1] <= w[0] + 1e-12);
    // least-squares slope of the d_alpha medians against j
    let xs: Vec<f64> = j_levels.iter().map(|j| *j as f64).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = d_medians.iter().sum::<f64>() / d_medians.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&d_medians)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum();
    let slope = sxy / sxx;

    let sups: Vec<f64> = traj_outputs.iter().map(|t| t.sup_fine).collect();
    let sup_mean = sups.iter().sum::<f64>() / sups.len() as f64;
    let mut sorted = sups.clone();
    let sup_median = median(&mut sorted);
    let coarse_mean = if opts.halving_study {
        Some(traj_outputs.iter().map(|t| t.sup_coarse).sum::<f64>() / trajectories as f64)
    } else {
        None
    };

    Ok(StrassenReport {
        trajectories,
        horizon: big_u,
        c: opts.c,
        alpha: opts.alpha,
        j_levels: j_stats,
        limsup_proxy_mean: sup_mean,
        limsup_proxy_median: sup_median,
        limsup_proxy_min: sups.iter().cloned().fold(f64::INFINITY, f64::min),
        limsup_proxy_max: sups.iter().cloned().fold(0.0, f64::max),
        per_traj_sup: sups,
        limsup_proxy_mean_coarse: coarse_mean,
        halving_delta: coarse_mean.map(|c| (c - sup_mean).abs()),
        d_alpha_last5_nonincreasing: d_last5_noninc,
        d_alpha_trend_slope: slope,
        a_jc_last5_nonincreasing: a_last5_noninc,
    })
}
