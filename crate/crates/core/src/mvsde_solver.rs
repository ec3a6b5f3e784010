//! Tamed Euler particle systems and Picard iteration on the law.
//!
//! The step rule is
//! `x_{k+1} = x_k + b/(1 + dt |b|) dt + sqrt(eps) sigma(t_k, x_k, mu_k) dW_k`
//! with `mu_k` the current empirical marginal. Taming keeps the explicit
//! scheme stable under the superlinear monotone drifts this crate targets.
//!
//! Randomness: particle `i` draws its step-`k` increment from
//! `stream(seed, BROWNIAN, replica_base + i, k)`, so results are identical
//! for any thread count and particles can be re-simulated in isolation.

use crate::error::{Error, Result};
use crate::measure_ops::{wasserstein2, EmpiricalMeasure};
use crate::model::CoefficientSet;
use crate::path_space::Path;
use crate::rng::{tags, Stream};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

/// Uniform time grid on `[0, horizon]` with `steps` cells.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SimGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl SimGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid("horizon must be positive"));
        }
        if steps < 2 {
            return Err(Error::invalid("grid needs at least 2 steps"));
        }
        Ok(SimGrid { horizon, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }
}

/// Reproducible Brownian increments, `N(0, dt I)` per (replica, step).
#[derive(Clone, Copy, Debug)]
pub struct BrownianDriver {
    pub seed: u64,
    pub dim_w: usize,
    pub grid: SimGrid,
}

impl BrownianDriver {
    pub fn new(seed: u64, dim_w: usize, grid: SimGrid) -> Self {
        BrownianDriver { seed, dim_w, grid }
    }

    #[inline]
    pub fn increments(&self, replica: u64, step: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim_w);
        let mut s = Stream::new(self.seed, tags::BROWNIAN, replica, step);
        s.fill_normal(out);
        let sd = self.grid.dt().sqrt();
        for v in out.iter_mut() {
            *v *= sd;
        }
    }
}

/// Initial condition: a fixed point, an explicit per-particle cloud, or a
/// sampler drawing from the replica stream. Samplers must declare the
/// finite moment order of their law.
#[derive(Clone)]
pub enum InitialCondition {
    Point(Vec<f64>),
    Cloud(Vec<Vec<f64>>),
    Sampler {
        sample: Arc<dyn Fn(&mut Stream, &mut [f64]) + Send + Sync>,
        moment_order: f64,
    },
}

impl InitialCondition {
    fn materialize(&self, seed: u64, replica: u64, dim: usize, slot: usize, out: &mut [f64]) -> Result<()> {
        match self {
            InitialCondition::Point(x) => {
                if x.len() != dim {
                    return Err(Error::DimensionMismatch("x0 dimension".into()));
                }
                out.copy_from_slice(x);
            }
            InitialCondition::Cloud(cloud) => {
                let x = cloud
                    .get(slot)
                    .ok_or_else(|| Error::invalid("initial cloud smaller than particle count"))?;
                if x.len() != dim {
                    return Err(Error::DimensionMismatch("x0 dimension".into()));
                }
                out.copy_from_slice(x);
            }
            InitialCondition::Sampler { sample, .. } => {
                let mut s = Stream::new(seed, tags::INIT_SAMPLER, replica, 0);
                sample(&mut s, out);
            }
        }
        Ok(())
    }
}

/// Simulation options shared by the particle and decoupled schemes.
#[derive(Clone, Debug)]
pub struct SimOptions {
    pub epsilon: f64,
    pub seed: u64,
    /// Offset added to every particle's replica index.
    pub replica_base: u64,
    /// Explicit per-slot replica indices (overrides `replica_base + i`);
    /// used to keep noise attached to particle identity under relabeling.
    pub replica_ids: Option<Vec<u64>>,
}

impl SimOptions {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        SimOptions {
            epsilon,
            seed,
            replica_base: 0,
            replica_ids: None,
        }
    }

    fn replica(&self, slot: usize) -> u64 {
        match &self.replica_ids {
            Some(ids) => ids[slot],
            None => self.replica_base + slot as u64,
        }
    }
}

/// An interacting particle system with full path storage.
#[derive(Clone, Debug)]
pub struct ParticleSystem {
    pub epsilon: f64,
    pub grid: SimGrid,
    pub paths: Vec<Path>,
}

impl ParticleSystem {
    pub fn n_particles(&self) -> usize {
        self.paths.len()
    }

    /// Uniform empirical marginal at grid node `k`.
    pub fn marginal(&self, k: usize) -> EmpiricalMeasure {
        let d = self.paths[0].dim();
        let mut atoms = Vec::with_capacity(self.paths.len() * d);
        for p in &self.paths {
            atoms.extend_from_slice(p.value(k));
        }
        EmpiricalMeasure::uniform(d, atoms).expect("finite states")
    }
}

#[inline]
pub(crate) fn tame_drift(b: &mut [f64], dt: f64) {
    let n2: f64 = b.iter().map(|v| v * v).sum();
    let f = 1.0 / (1.0 + dt * n2.sqrt());
    for v in b.iter_mut() {
        *v *= f;
    }
}

#[inline]
pub(crate) fn step_particle(
    cs: &CoefficientSet,
    t: f64,
    dt: f64,
    sqrt_eps: f64,
    x: &mut [f64],
    mu: &EmpiricalMeasure,
    dw: &[f64],
    scratch_b: &mut [f64],
    scratch_s: &mut [f64],
) {
    let d = cs.dim_x;
    let dw_n = cs.dim_w;
    cs.drift(t, x, mu, scratch_b);
    tame_drift(scratch_b, dt);
    if sqrt_eps > 0.0 {
        cs.diffusion(t, x, mu, scratch_s);
        for i in 0..d {
            let mut noise = 0.0;
            for k in 0..dw_n {
                noise += scratch_s[i * dw_n + k] * dw[k];
            }
            x[i] += scratch_b[i] * dt + sqrt_eps * noise;
        }
    } else {
        for i in 0..d {
            x[i] += scratch_b[i] * dt;
        }
    }
}

/// Simulate the `N`-particle tamed Euler system. `N = 1` degenerates to a
/// decoupled SDE whose law argument is its own Dirac.
pub fn simulate_particles(
    cs: &CoefficientSet,
    x0: &InitialCondition,
    n_particles: usize,
    grid: SimGrid,
    opts: &SimOptions,
) -> Result<ParticleSystem> {
    if n_particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    if opts.epsilon < 0.0 {
        return Err(Error::invalid("epsilon must be nonnegative"));
    }
    if let Some(ids) = &opts.replica_ids {
        if ids.len() != n_particles {
            return Err(Error::invalid("replica_ids length must equal particle count"));
        }
    }
    let d = cs.dim_x;
    let n = grid.steps;
    let dt = grid.dt();
    let sqrt_eps = opts.epsilon.sqrt();
    let driver = BrownianDriver::new(opts.seed, cs.dim_w, grid);

    // history[i * (n+1) * d ..] is particle i's path
    let stride = (n + 1) * d;
    let mut history = vec![0.0f64; n_particles * stride];
    for i in 0..n_particles {
        let (head, _) = history[i * stride..].split_at_mut(d);
        x0.materialize(opts.seed, opts.replica(i), d, i, head)?;
    }

    let dummy = EmpiricalMeasure::dirac(&vec![0.0; d]);
    for k in 0..n {
        let t = grid.time(k);
        let mu = if cs.is_law_dependent() {
            let mut atoms = Vec::with_capacity(n_particles * d);
            for i in 0..n_particles {
                atoms.extend_from_slice(&history[i * stride + k * d..i * stride + (k + 1) * d]);
            }
            EmpiricalMeasure::uniform(d, atoms)?
        } else {
            dummy.clone()
        };
        history
            .par_chunks_mut(stride)
            .enumerate()
            .for_each(|(i, chunk)| {
                let (prev, next) = chunk.split_at_mut((k + 1) * d);
                let mut x: Vec<f64> = prev[k * d..].to_vec();
                let mut dw = vec![0.0f64; cs.dim_w];
                let mut b = vec![0.0f64; d];
                let mut s = vec![0.0f64; d * cs.dim_w];
                driver.increments(opts.replica(i), k as u64, &mut dw);
                step_particle(cs, t, dt, sqrt_eps, &mut x, &mu, &dw, &mut b, &mut s);
                next[..d].copy_from_slice(&x);
            });
        // finiteness check over the states just written
        for i in 0..n_particles {
            let st = &history[i * stride + (k + 1) * d..i * stride + (k + 2) * d];
            if st.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: k + 1,
                    context: format!("particle {i}"),
                });
            }
        }
    }

    let paths = (0..n_particles)
        .map(|i| Path::new(grid.horizon, d, history[i * stride..(i + 1) * stride].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParticleSystem {
        epsilon: opts.epsilon,
        grid,
        paths,
    })
}

/// A precomputed Dirac flow `t_k -> delta_{psi(t_k)}` used by the
/// decoupled scheme.
#[derive(Clone, Debug)]
pub struct DiracFlow {
    pub grid: SimGrid,
    /// `(steps+1) x d` row-major values of the flow center.
    pub centers: Vec<f64>,
    pub dim: usize,
}

impl DiracFlow {
    pub fn from_path(p: &Path) -> Self {
        DiracFlow {
            grid: SimGrid {
                horizon: p.horizon(),
                steps: p.grid_size(),
            },
            centers: p.values().to_vec(),
            dim: p.dim(),
        }
    }

    #[inline]
    pub fn measure_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::dirac(&self.centers[k * self.dim..(k + 1) * self.dim])
    }
}

/// Simulate one replica of the decoupled process: the SDE with the law
/// frozen at the given Dirac flow, driven by `stream(seed, replica, .)`.
/// Writes the path into `out` (length `(steps+1) * d`).
pub fn simulate_frozen_law(
    cs: &CoefficientSet,
    x0: &[f64],
    flow: &DiracFlow,
    epsilon: f64,
    seed: u64,
    replica: u64,
    out: &mut [f64],
) -> Result<()> {
    let d = cs.dim_x;
    let n = flow.grid.steps;
    debug_assert_eq!(out.len(), (n + 1) * d);
    let dt = flow.grid.dt();
    let sqrt_eps = epsilon.sqrt();
    let driver = BrownianDriver::new(seed, cs.dim_w, flow.grid);
    out[..d].copy_from_slice(x0);
    let mut x = x0.to_vec();
    let mut dw = vec![0.0f64; cs.dim_w];
    let mut b = vec![0.0f64; d];
    let mut s = vec![0.0f64; d * cs.dim_w];
    for k in 0..n {
        let mu = flow.measure_at(k);
        driver.increments(replica, k as u64, &mut dw);
        step_particle(cs, flow.grid.time(k), dt, sqrt_eps, &mut x, &mu, &dw, &mut b, &mut s);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: k + 1,
                context: format!("replica {replica}"),
            });
        }
        out[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
    }
    Ok(())
}

/// Result of the Picard iteration on the law.
#[derive(Clone, Debug)]
pub struct PicardSolution {
    pub iterations: usize,
    pub converged: bool,
    /// Final-iteration empirical law at every grid node.
    pub law_flow: Vec<EmpiricalMeasure>,
    pub final_paths: Vec<Path>,
    /// `sup_t W2(law_k(t), law_{k-1}(t))` per iteration.
    pub convergence_trace: Vec<f64>,
}

/// Picard iteration: re-simulate `M` paths with the law frozen at the
/// previous iteration's empirical flow, using common random numbers across
/// iterations so the law map is a deterministic function of the frozen
/// flow. Iteration stops when the sup-over-time W2 between successive
/// flows drops below `tol`.
pub fn solve_picard(
    cs: &CoefficientSet,
    x0: &InitialCondition,
    m_paths: usize,
    grid: SimGrid,
    opts: &SimOptions,
    tol: f64,
    max_iter: usize,
) -> Result<PicardSolution> {
    if m_paths < 2 {
        return Err(Error::invalid("Picard needs at least 2 paths"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let d = cs.dim_x;
    let n = grid.steps;
    let dt = grid.dt();
    let sqrt_eps = opts.epsilon.sqrt();
    let driver = BrownianDriver::new(opts.seed, cs.dim_w, grid);
    let stride = (n + 1) * d;

    let mut x0_states = vec![0.0f64; m_paths * d];
    for i in 0..m_paths {
        x0.materialize(opts.seed, opts.replica(i), d, i, &mut x0_states[i * d..(i + 1) * d])?;
    }

    // iteration 0 law: the initial cloud frozen in time
    let init_measure = EmpiricalMeasure::uniform(d, x0_states.clone())?;
    let mut law: Vec<EmpiricalMeasure> = vec![init_measure; n + 1];

    let mut trace = Vec::new();
    let mut history = vec![0.0f64; m_paths * stride];
    let mut converged = false;
    let mut iterations = 0;

    for _it in 0..max_iter {
        iterations += 1;
        // simulate all paths against the frozen flow
        history
            .par_chunks_mut(stride)
            .enumerate()
            .try_for_each(|(i, chunk)| -> Result<()> {
                chunk[..d].copy_from_slice(&x0_states[i * d..(i + 1) * d]);
                let mut x = x0_states[i * d..(i + 1) * d].to_vec();
                let mut dw = vec![0.0f64; cs.dim_w];
                let mut b = vec![0.0f64; d];
                let mut s = vec![0.0f64; d * cs.dim_w];
                for k in 0..n {
                    driver.increments(opts.replica(i), k as u64, &mut dw);
                    step_particle(cs, grid.time(k), dt, sqrt_eps, &mut x, &law[k], &dw, &mut b, &mut s);
                    if x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            step: k + 1,
                            context: format!("picard path {i}"),
                        });
                    }
                    chunk[(k + 1) * d..(k + 2) * d].copy_from_slice(&x);
                }
                Ok(())
            })?;

        // new flow and sup-over-time W2 against the previous one
        let new_law: Vec<EmpiricalMeasure> = (0..=n)
            .into_par_iter()
            .map(|k| {
                let mut atoms = Vec::with_capacity(m_paths * d);
                for i in 0..m_paths {
                    atoms.extend_from_slice(&history[i * stride + k * d..i * stride + (k + 1) * d]);
                }
                EmpiricalMeasure::uniform(d, atoms).expect("finite states")
            })
            .collect();
        let mut sup_w2 = 0.0f64;
        for k in 0..=n {
            sup_w2 = sup_w2.max(wasserstein2(&new_law[k], &law[k])?);
        }
        law = new_law;
        trace.push(sup_w2);
        if sup_w2 <= tol {
            converged = true;
            break;
        }
    }

    let final_paths = (0..m_paths)
        .map(|i| Path::new(grid.horizon, d, history[i * stride..(i + 1) * stride].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(PicardSolution {
        iterations,
        converged,
        law_flow: law,
        final_paths,
        convergence_trace: trace,
    })
}

/// Monte Carlo estimate of `E[sup_t |Y(t)|^p]` with its standard error.
pub fn moment_diagnostic(ps: &ParticleSystem, p: u32) -> Result<(f64, f64)> {
    if !matches!(p, 2 | 4 | 6 | 8) {
        return Err(Error::invalid("moment order must be one of 2, 4, 6, 8"));
    }
    let vals: Vec<f64> = ps
        .paths
        .iter()
        .map(|path| crate::path_space::sup_norm(path).powi(p as i32))
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Fitted exponent of `E|Y(t) - Y(s)|^2` against `|t - s|` on a log-log
/// scale, with a 2-standard-error half width.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ContinuityFit {
    pub slope: f64,
    pub half_width: f64,
}

pub fn continuity_diagnostic(ps: &ParticleSystem, pairs: &[(usize, usize)]) -> Result<ContinuityFit> {
    if pairs.len() < 5 {
        return Err(Error::invalid("need at least 5 (s, t) pairs"));
    }
    let d = ps.paths[0].dim();
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ys = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a >= b || b > ps.grid.steps {
            return Err(Error::invalid("degenerate lag pair"));
        }
        let lag = ps.grid.time(b) - ps.grid.time(a);
        let m2: f64 = ps
            .paths
            .iter()
            .map(|p| {
                p.value(b)
                    .iter()
                    .zip(p.value(a))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / ps.paths.len() as f64;
        if m2 <= 0.0 {
            return Err(Error::invalid("degenerate lags: zero mean-square increment"));
        }
        xs.push(lag.ln());
        ys.push((m2 / d as f64).ln());
    }
    let nf = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let resid2: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - my - slope * (x - mx);
            e * e
        })
        .sum();
    let se = (resid2 / (nf - 2.0).max(1.0) / sxx).sqrt();
    Ok(ContinuityFit {
        slope,
        half_width: 2.0 * se,
    })
}
