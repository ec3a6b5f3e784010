use mvsde_core::model::*;
use std::sync::Arc;

fn scalar_cs(
    lipschitz: f64,
    drift: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    diffusion: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> CoefficientSet {
    CoefficientSet::new(
        1,
        1,
        CoefficientConstants {
            lipschitz,
            poly_degree: 3,
            diffusion_bound: None,
            time_holder: None,
        },
        Arc::new(move |t, x: &[f64], _mu, out: &mut [f64]| out[0] = drift(t, x[0])),
        Arc::new(move |t, x: &[f64], _mu, out: &mut [f64]| out[0] = diffusion(t, x[0])),
    )
    .unwrap()
}

#[test]
fn monotonicity_cubic_drift_passes_with_margin() {
    // <x - x', -x^3 + x'^3> = -(x - x')^2 (x^2 + x x' + x'^2) <= 0
    let cs = scalar_cs(0.0, |_, x| -x * x * x, |_, _| 1.0);
    let rep = probe_monotonicity(&cs, 20_000, 5.0, 1).unwrap();
    assert!(rep.pass, "max quotient {}", rep.max_quotient);
    assert!(rep.max_quotient <= 0.0);
}

#[test]
fn monotonicity_square_drift_yields_certificate() {
    // quotient (x - x')(x^2 - x'^2)/(x - x')^2 = x + x' reaches ~20 on the box
    let cs = scalar_cs(1.0, |_, x| x * x, |_, _| 1.0);
    let rep = probe_monotonicity(&cs, 20_000, 10.0, 2).unwrap();
    assert!(!rep.pass);
    assert!(rep.max_quotient > 1.0);
}

#[test]
fn monotonicity_linear_drift_attains_declared_constant() {
    let l = 0.7;
    let cs = scalar_cs(l, move |_, x| l * x, |_, _| 1.0);
    let rep = probe_monotonicity(&cs, 5_000, 3.0, 3).unwrap();
    assert!(rep.pass);
    assert!((rep.max_quotient - l).abs() < 1e-12, "{}", rep.max_quotient);
}

#[test]
fn sigma_lipschitz_constant_diffusion() {
    let cs = scalar_cs(1.0, |_, x| -x, |_, _| 2.0);
    let rep = probe_lipschitz_sigma(&cs, 5_000, 4.0, 4).unwrap();
    assert!(rep.pass);
    assert_eq!(rep.max_quotient, 0.0);
}

#[test]
fn sigma_lipschitz_sine_diffusion() {
    let cs = scalar_cs(1.0, |_, x| -x, |_, x| x.sin());
    let rep = probe_lipschitz_sigma(&cs, 20_000, 4.0, 5).unwrap();
    assert!(rep.pass, "max quotient {}", rep.max_quotient);
    assert!(rep.max_quotient <= 1.0);
}

#[test]
fn sigma_lipschitz_square_diffusion_fails() {
    let cs = scalar_cs(1.0, |_, x| -x, |_, x| x * x);
    let rep = probe_lipschitz_sigma(&cs, 20_000, 10.0, 6).unwrap();
    assert!(!rep.pass);
}

#[test]
fn uniform_convergence_trivial_family() {
    let fam = EpsilonFamily::trivial(scalar_cs(1.0, |_, x| -x, |_, _| 1.0));
    let rep = probe_uniform_convergence(&fam, &[0.4, 0.2, 0.1], 2_000, 3.0, 7).unwrap();
    assert!(rep.within_eta);
    assert!(rep.observed_gap.iter().all(|g| *g == 0.0));
}

#[test]
fn uniform_convergence_constant_offset() {
    let base = scalar_cs(1.0, |_, x| -x, |_, _| 1.0);
    let fam = EpsilonFamily::new(
        base,
        Arc::new(|eps| scalar_cs(1.0, move |_, x| -x + eps, |_, _| 1.0)),
        Arc::new(|eps| eps),
    );
    let rep = probe_uniform_convergence(&fam, &[0.4, 0.2, 0.1], 2_000, 3.0, 8).unwrap();
    assert!(rep.within_eta);
    assert!(rep.monotone_trend);
    for (g, e) in rep.observed_gap.iter().zip(&rep.eps) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn uniform_convergence_sine_perturbation() {
    let base = scalar_cs(1.0, |_, x| -x, |_, _| 1.0);
    let fam = EpsilonFamily::new(
        base,
        Arc::new(|eps| scalar_cs(1.0, move |_, x| -x + eps * x.sin(), |_, _| 1.0)),
        Arc::new(|eps| eps),
    );
    let rep = probe_uniform_convergence(&fam, &[0.4, 0.2, 0.1], 20_000, 4.0, 9).unwrap();
    assert!(rep.within_eta);
    for (g, e) in rep.observed_gap.iter().zip(&rep.eps) {
        assert!(*g <= *e + 1e-12);
        assert!(*g > 0.98 * e, "observed {g} for eps {e}");
    }
}

/// Every built-in model passes all probes against its declared constants,
/// at 1e4 samples over 8 seeds.
#[test]
fn builtin_models_pass_probes_across_seeds() {
    for card in builtin_models() {
        for seed in 0..8u64 {
            let mono = probe_monotonicity(&card.coefficients, 10_000, 3.0, seed).unwrap();
            assert!(
                mono.pass,
                "{} monotonicity seed {seed}: {}",
                card.name, mono.max_quotient
            );
            let lip = probe_lipschitz_sigma(&card.coefficients, 10_000, 3.0, seed).unwrap();
            assert!(
                lip.pass,
                "{} sigma seed {seed}: {}",
                card.name, lip.max_quotient
            );
        }
    }
}

#[test]
fn probe_reports_are_deterministic() {
    let cs = scalar_cs(1.0, |_, x| -x, |_, x| x.sin());
    let a = probe_monotonicity(&cs, 5_000, 3.0, 42).unwrap();
    let b = probe_monotonicity(&cs, 5_000, 3.0, 42).unwrap();
    assert_eq!(a.max_quotient.to_bits(), b.max_quotient.to_bits());
    assert_eq!(a.argmax_sample, b.argmax_sample);
}

#[test]
fn model_registry_lookup() {
    assert!(model_by_name("brownian").is_ok());
    assert!(model_by_name("mf-ou").is_ok());
    assert!(model_by_name("double-well").is_ok());
    assert!(model_by_name("nope").is_err());
}
