//! Coefficient sets `(b, sigma)`, their declared regularity constants, the
//! small-noise perturbation family, and randomized probes that try to
//! falsify the standing assumptions.
//!
//! Probes are falsifiers, not verifiers: the assumptions quantify over all
//! of `R^d x P_2(R^d)`, so a failed probe is a violation certificate while
//! a passed probe is sampled evidence only.

use crate::error::{Error, Result};
use crate::measure_ops::{wasserstein2, EmpiricalMeasure};
use crate::report::AssertionRecord;
use crate::rng::{tags, Stream};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

pub type DriftFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;
pub type DiffusionFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;
/// Spatial Jacobian of the drift, row-major `d x d`.
pub type DriftJacFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;
/// Spatial Jacobian of the diffusion, layout `[(i,k), j] = d sigma_{ik} / d x_j`.
pub type DiffusionJacFn = dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync;

/// Declared regularity constants of a coefficient set.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CoefficientConstants {
    /// Lipschitz / monotonicity constant L.
    pub lipschitz: f64,
    /// Polynomial growth degree q (>= 2).
    pub poly_degree: u32,
    /// Uniform diffusion bound M, when declared.
    pub diffusion_bound: Option<f64>,
    /// Hölder exponent in time, when declared.
    pub time_holder: Option<f64>,
}

impl CoefficientConstants {
    fn validate(&self) -> Result<()> {
        if !(self.lipschitz >= 0.0) || !self.lipschitz.is_finite() {
            return Err(Error::invalid("lipschitz constant must be finite and nonnegative"));
        }
        if self.poly_degree < 2 {
            return Err(Error::invalid("poly_degree must be at least 2"));
        }
        if let Some(m) = self.diffusion_bound {
            if !(m > 0.0) {
                return Err(Error::invalid("diffusion bound must be positive"));
            }
        }
        if let Some(b) = self.time_holder {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::invalid("time Hölder exponent must lie in (0,1]"));
            }
        }
        Ok(())
    }
}

/// The pair `(b, sigma)` with declared constants. Coefficients are
/// deterministic functions of `(t, x, mu)` and must be pure and reentrant.
#[derive(Clone)]
pub struct CoefficientSet {
    pub dim_x: usize,
    pub dim_w: usize,
    pub constants: CoefficientConstants,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    drift_jac: Option<Arc<DriftJacFn>>,
    diffusion_jac: Option<Arc<DiffusionJacFn>>,
    law_dependent: bool,
}

impl CoefficientSet {
    pub fn new(
        dim_x: usize,
        dim_w: usize,
        constants: CoefficientConstants,
        drift: Arc<DriftFn>,
        diffusion: Arc<DiffusionFn>,
    ) -> Result<Self> {
        constants.validate()?;
        if dim_x == 0 || dim_w == 0 {
            return Err(Error::invalid("dimensions must be at least 1"));
        }
        Ok(CoefficientSet {
            dim_x,
            dim_w,
            constants,
            drift,
            diffusion,
            drift_jac: None,
            diffusion_jac: None,
            law_dependent: true,
        })
    }

    pub fn with_jacobians(
        mut self,
        drift_jac: Arc<DriftJacFn>,
        diffusion_jac: Arc<DiffusionJacFn>,
    ) -> Self {
        self.drift_jac = Some(drift_jac);
        self.diffusion_jac = Some(diffusion_jac);
        self
    }

    pub fn law_independent(mut self) -> Self {
        self.law_dependent = false;
        self
    }

    /// Whether the coefficients actually read the measure argument.
    pub fn is_law_dependent(&self) -> bool {
        self.law_dependent
    }

    #[inline]
    pub fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.drift)(t, x, mu, out);
    }

    #[inline]
    pub fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        (self.diffusion)(t, x, mu, out);
    }

    pub fn has_jacobians(&self) -> bool {
        self.drift_jac.is_some() && self.diffusion_jac.is_some()
    }

    pub fn drift_jacobian(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        match &self.drift_jac {
            Some(f) => {
                f(t, x, mu, out);
                Ok(())
            }
            None => Err(Error::UnsupportedConfiguration(
                "coefficient set declares no drift Jacobian".into(),
            )),
        }
    }

    pub fn diffusion_jacobian(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        match &self.diffusion_jac {
            Some(f) => {
                f(t, x, mu, out);
                Ok(())
            }
            None => Err(Error::UnsupportedConfiguration(
                "coefficient set declares no diffusion Jacobian".into(),
            )),
        }
    }
}

/// The `epsilon`-indexed perturbation family `(b_eps, sigma_eps)` with its
/// declared uniform gap `eta(eps)`.
#[derive(Clone)]
pub struct EpsilonFamily {
    pub base: CoefficientSet,
    perturbed: Arc<dyn Fn(f64) -> CoefficientSet + Send + Sync>,
    eta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl EpsilonFamily {
    pub fn new(
        base: CoefficientSet,
        perturbed: Arc<dyn Fn(f64) -> CoefficientSet + Send + Sync>,
        eta: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    ) -> Self {
        EpsilonFamily { base, perturbed, eta }
    }

    /// The unperturbed family: `b_eps = b`, `eta = 0`.
    pub fn trivial(base: CoefficientSet) -> Self {
        let b = base.clone();
        EpsilonFamily {
            base,
            perturbed: Arc::new(move |_| b.clone()),
            eta: Arc::new(|_| 0.0),
        }
    }

    pub fn at(&self, eps: f64) -> CoefficientSet {
        (self.perturbed)(eps)
    }

    pub fn eta(&self, eps: f64) -> f64 {
        (self.eta)(eps)
    }
}

/// A known closed-form fact about a built-in model, with a provenance note.
#[derive(Clone, Debug, Serialize)]
pub struct ModelFact {
    pub name: String,
    pub value: f64,
    pub note: String,
}

/// A named built-in model with its scale constants for the harness bands.
#[derive(Clone)]
pub struct ModelCard {
    pub name: &'static str,
    pub description: &'static str,
    pub coefficients: CoefficientSet,
    pub default_x0: Vec<f64>,
    pub facts: Vec<ModelFact>,
    /// Scale constant for the Picard/particle agreement band.
    pub picard_particle_scale: f64,
    /// Gronwall-style constant for the p-moment bound evaluation.
    pub moment_bound_constant: f64,
    /// Whether the terminal law has an exact Gaussian tail (no-MC path).
    pub exact_gaussian_tail: bool,
}

/// Built-in model registry. User models are compiled in; there is no
/// runtime expression parser.
pub fn builtin_models() -> Vec<ModelCard> {
    vec![brownian_card(), brownian2d_card(), mean_field_ou_card(1.0), double_well_card(0.5)]
}

pub fn model_by_name(name: &str) -> Result<ModelCard> {
    builtin_models()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| {
            Error::invalid(format!(
                "unknown model {name:?}; built-ins: brownian, brownian2d, mf-ou, double-well"
            ))
        })
}

/// Pure Brownian motion: `b = 0`, `sigma = 1` in dimension one.
pub fn brownian_card() -> ModelCard {
    let constants = CoefficientConstants {
        lipschitz: 1.0,
        poly_degree: 2,
        diffusion_bound: Some(1.0),
        time_holder: Some(1.0),
    };
    let cs = CoefficientSet::new(
        1,
        1,
        constants,
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 0.0),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 1.0),
    )
    .unwrap()
    .with_jacobians(
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 0.0),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 0.0),
    )
    .law_independent();
    ModelCard {
        name: "brownian",
        description: "b = 0, sigma = 1 (scalar Brownian motion)",
        coefficients: cs,
        default_x0: vec![0.0],
        facts: vec![ModelFact {
            name: "terminal_variance_per_eps".into(),
            value: 1.0,
            note: "Var X_eps(T) = eps * T for T = 1".into(),
        }],
        picard_particle_scale: 1.0,
        moment_bound_constant: 2.0,
        exact_gaussian_tail: true,
    }
}

/// Planar Brownian motion: `b = 0`, `sigma = I_2`.
pub fn brownian2d_card() -> ModelCard {
    let constants = CoefficientConstants {
        lipschitz: 1.0,
        poly_degree: 2,
        diffusion_bound: Some(2.0),
        time_holder: Some(1.0),
    };
    let cs = CoefficientSet::new(
        2,
        2,
        constants,
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out.fill(0.0)),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| {
            out.fill(0.0);
            out[0] = 1.0;
            out[3] = 1.0;
        }),
    )
    .unwrap()
    .with_jacobians(
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out.fill(0.0)),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out.fill(0.0)),
    )
    .law_independent();
    ModelCard {
        name: "brownian2d",
        description: "b = 0, sigma = I in R^2",
        coefficients: cs,
        default_x0: vec![0.0, 0.0],
        facts: vec![],
        picard_particle_scale: 1.0,
        moment_bound_constant: 2.0,
        exact_gaussian_tail: false,
    }
}

/// Mean-field Ornstein-Uhlenbeck: `b(x, mu) = a (mean(mu) - x)`, `sigma = 1`.
pub fn mean_field_ou_card(a: f64) -> ModelCard {
    let constants = CoefficientConstants {
        lipschitz: a.max(1.0),
        poly_degree: 2,
        diffusion_bound: Some(1.0),
        time_holder: Some(1.0),
    };
    let cs = CoefficientSet::new(
        1,
        1,
        constants,
        Arc::new(move |_t, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]| {
            out[0] = a * (mu.mean()[0] - x[0]);
        }),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 1.0),
    )
    .unwrap()
    .with_jacobians(
        Arc::new(move |_t, _x, _mu, out: &mut [f64]| out[0] = -a),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 0.0),
    );
    ModelCard {
        name: "mf-ou",
        description: "mean-field Ornstein-Uhlenbeck: b(x, mu) = a (mean(mu) - x), sigma = 1",
        coefficients: cs,
        default_x0: vec![0.0],
        facts: vec![
            ModelFact {
                name: "stationary_mean".into(),
                value: 0.0,
                note: "mean flow is frozen at mean(x0)".into(),
            },
            ModelFact {
                name: "terminal_variance_per_eps".into(),
                value: (1.0 - (-2.0f64).exp()) / 2.0,
                note: "Var X_eps(1) = eps (1 - e^{-2a})/(2a) for a = 1, x0 deterministic".into(),
            },
        ],
        picard_particle_scale: 1.0,
        moment_bound_constant: 2.0,
        exact_gaussian_tail: false,
    }
}

/// Double-well with linear attraction: `b(x, mu) = -(x^3 - x) - beta (x - mean(mu))`,
/// `sigma = 1`. Drift has cubic growth and satisfies the one-sided
/// monotonicity bound with `L = 1`.
pub fn double_well_card(beta: f64) -> ModelCard {
    let constants = CoefficientConstants {
        lipschitz: (1.0 + beta).max(1.0),
        poly_degree: 3,
        diffusion_bound: Some(1.0),
        time_holder: Some(1.0),
    };
    let cs = CoefficientSet::new(
        1,
        1,
        constants,
        Arc::new(move |_t, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]| {
            let v = x[0];
            out[0] = -(v * v * v - v) - beta * (v - mu.mean()[0]);
        }),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 1.0),
    )
    .unwrap()
    .with_jacobians(
        Arc::new(move |_t, x: &[f64], _mu, out: &mut [f64]| {
            out[0] = -(3.0 * x[0] * x[0] - 1.0) - beta;
        }),
        Arc::new(|_t, _x, _mu, out: &mut [f64]| out[0] = 0.0),
    );
    ModelCard {
        name: "double-well",
        description: "self-stabilizing double well: b = -(x^3 - x) - beta (x - mean(mu)), sigma = 1",
        coefficients: cs,
        default_x0: vec![0.0],
        facts: vec![],
        picard_particle_scale: 2.0,
        moment_bound_constant: 4.0,
        exact_gaussian_tail: false,
    }
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// Outcome of a randomized assumption probe.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub name: String,
    pub samples: usize,
    pub max_quotient: f64,
    pub declared_bound: f64,
    /// `false` is a violation certificate; `true` is sampled evidence.
    pub pass: bool,
    /// Sample index attaining the maximum quotient.
    pub argmax_sample: usize,
}

impl ProbeReport {
    pub fn assertion(&self) -> AssertionRecord {
        AssertionRecord::at_most(self.name.clone(), self.max_quotient, self.declared_bound)
    }
}

/// An excess within roundoff of the declared constant is not a violation
/// certificate.
fn passes_bound(observed: f64, declared: f64) -> bool {
    observed <= declared + 1e-9 * (1.0 + declared.abs())
}

fn random_point(stream: &mut Stream, dim: usize, radius: f64) -> Vec<f64> {
    (0..dim).map(|_| stream.next_symmetric(radius)).collect()
}

/// Random cloud of 8 atoms in the probe box; small support keeps W2 exact
/// and probes fast.
fn random_cloud(stream: &mut Stream, dim: usize, radius: f64) -> EmpiricalMeasure {
    let mut atoms = Vec::with_capacity(8 * dim);
    for _ in 0..8 {
        for _ in 0..dim {
            atoms.push(stream.next_symmetric(radius));
        }
    }
    EmpiricalMeasure::uniform(dim, atoms).expect("finite cloud")
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn probe_max<F>(samples: usize, per_sample: F) -> (f64, usize)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let quotients: Vec<f64> = (0..samples).into_par_iter().map(per_sample).collect();
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, q) in quotients.iter().enumerate() {
        if *q > best {
            best = *q;
            arg = i;
        }
    }
    (best, arg)
}

/// Probe the one-sided monotonicity bound
/// `<x - x', b(t,x,mu) - b(t,x',mu)> <= L |x - x'|^2`
/// on random `(t, x, x', mu)` tuples.
pub fn probe_monotonicity(
    cs: &CoefficientSet,
    samples: usize,
    box_radius: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let d = cs.dim_x;
    let (max_q, arg) = probe_max(samples, |i| {
        let mut s = Stream::new(seed, tags::PROBE, i as u64, 0);
        let t = s.next_uniform();
        let x = random_point(&mut s, d, box_radius);
        let mut x2 = random_point(&mut s, d, box_radius);
        if x == x2 {
            x2[0] += box_radius * 1e-3;
        }
        let mu = random_cloud(&mut s, d, box_radius);
        let mut bx = vec![0.0; d];
        let mut bx2 = vec![0.0; d];
        cs.drift(t, &x, &mu, &mut bx);
        cs.drift(t, &x2, &mu, &mut bx2);
        let mut inner = 0.0;
        let mut dist2 = 0.0;
        for c in 0..d {
            let dx = x[c] - x2[c];
            inner += dx * (bx[c] - bx2[c]);
            dist2 += dx * dx;
        }
        inner / dist2
    });
    let bound = cs.constants.lipschitz;
    Ok(ProbeReport {
        name: "monotonicity".into(),
        samples,
        max_quotient: max_q,
        declared_bound: bound,
        pass: passes_bound(max_q, bound),
        argmax_sample: arg,
    })
}

/// Probe the diffusion Lipschitz bound
/// `|sigma(t,x,mu) - sigma(t,x',mu')| <= L (|x - x'| + W2(mu, mu'))`.
pub fn probe_lipschitz_sigma(
    cs: &CoefficientSet,
    samples: usize,
    box_radius: f64,
    seed: u64,
) -> Result<ProbeReport> {
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let d = cs.dim_x;
    let dw = cs.dim_w;
    let (max_q, arg) = probe_max(samples, |i| {
        let mut s = Stream::new(seed, tags::PROBE, i as u64, 1);
        let t = s.next_uniform();
        let x = random_point(&mut s, d, box_radius);
        let mut x2 = random_point(&mut s, d, box_radius);
        if x == x2 {
            x2[0] += box_radius * 1e-3;
        }
        let mu = random_cloud(&mut s, d, box_radius);
        let mu2 = random_cloud(&mut s, d, box_radius);
        let mut sx = vec![0.0; d * dw];
        let mut sx2 = vec![0.0; d * dw];
        cs.diffusion(t, &x, &mu, &mut sx);
        cs.diffusion(t, &x2, &mu2, &mut sx2);
        let num: f64 = sx
            .iter()
            .zip(&sx2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let dx: f64 = x
            .iter()
            .zip(&x2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let w2 = wasserstein2(&mu, &mu2).expect("probe clouds are compatible");
        num / (dx + w2)
    });
    let bound = cs.constants.lipschitz;
    Ok(ProbeReport {
        name: "sigma_lipschitz".into(),
        samples,
        max_quotient: max_q,
        declared_bound: bound,
        pass: passes_bound(max_q, bound),
        argmax_sample: arg,
    })
}

/// Per-epsilon empirical sup gap report for the perturbation family.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceReport {
    pub eps: Vec<f64>,
    pub observed_gap: Vec<f64>,
    pub declared_eta: Vec<f64>,
    pub within_eta: bool,
    pub monotone_trend: bool,
}

/// Probe uniform convergence `b_eps -> b`, `sigma_eps -> sigma`: empirical
/// sup of the coefficient gap over sampled `(t, x, mu)` per epsilon.
pub fn probe_uniform_convergence(
    fam: &EpsilonFamily,
    eps_list: &[f64],
    samples: usize,
    box_radius: f64,
    seed: u64,
) -> Result<ConvergenceReport> {
    if eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("eps_list must be strictly decreasing"));
    }
    if samples == 0 {
        return Err(Error::invalid("samples must be at least 1"));
    }
    let base = &fam.base;
    let d = base.dim_x;
    let dw = base.dim_w;
    let mut observed = Vec::with_capacity(eps_list.len());
    let mut declared = Vec::with_capacity(eps_list.len());
    for (ei, &eps) in eps_list.iter().enumerate() {
        let pert = fam.at(eps);
        let (gap, _) = probe_max(samples, |i| {
            let mut s = Stream::new(seed, tags::PROBE, i as u64, 2 + ei as u64);
            let t = s.next_uniform();
            let x = random_point(&mut s, d, box_radius);
            let mu = random_cloud(&mut s, d, box_radius);
            let mut b0 = vec![0.0; d];
            let mut b1 = vec![0.0; d];
            base.drift(t, &x, &mu, &mut b0);
            pert.drift(t, &x, &mu, &mut b1);
            let mut g = norm(&b0.iter().zip(&b1).map(|(a, b)| a - b).collect::<Vec<_>>());
            let mut s0 = vec![0.0; d * dw];
            let mut s1 = vec![0.0; d * dw];
            base.diffusion(t, &x, &mu, &mut s0);
            pert.diffusion(t, &x, &mu, &mut s1);
            g = g.max(norm(
                &s0.iter().zip(&s1).map(|(a, b)| a - b).collect::<Vec<_>>(),
            ));
            g
        });
        observed.push(gap);
        declared.push(fam.eta(eps));
    }
    let within = observed
        .iter()
        .zip(&declared)
        .all(|(o, e)| *o <= *e + 1e-12);
    let monotone = observed.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    Ok(ConvergenceReport {
        eps: eps_list.to_vec(),
        observed_gap: observed,
        declared_eta: declared,
        within_eta: within,
        monotone_trend: monotone,
    })
}
