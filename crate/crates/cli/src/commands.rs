//! Command implementations: merge configuration, run the experiment inside
//! the requested thread pool, write outputs, and return overall pass/fail.

use crate::config::{Config, ConfigError, ConfigResult};
use crate::report::{emit_plot_data, fmt_num, ExperimentReport, PlotKind};
use clap::ArgMatches;
use mvsde_core::ldp_harness::{self, GapKind, NormKind};
use mvsde_core::model::{self, ModelCard};
use mvsde_core::mvsde_solver::{self, InitialCondition, SimGrid, SimOptions};
use mvsde_core::path_space;
use mvsde_core::report::AssertionRecord;
use mvsde_core::skeleton_rate::{self, EventRateOptions, EventSpec, RateOutcome, SkeletonOptions};
use mvsde_core::strassen_lil::{self, ContractionSystem, StrassenOptions};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;

const COMMON_KEYS: [&str; 4] = ["config", "out", "threads", "precision"];

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

fn core_err(e: mvsde_core::Error) -> ConfigError {
    ConfigError(e.to_string())
}

/// Merge the optional config file with CLI flags (flags win).
fn merge_config(sub: &ArgMatches, flag_keys: &[(&str, &str)]) -> ConfigResult<Config> {
    let mut cfg = match sub.get_one::<String>("config") {
        Some(path) => Config::from_file(Path::new(path))?,
        None => Config::new(),
    };
    for (flag, key) in flag_keys {
        if let Some(v) = sub.get_one::<String>(flag) {
            cfg.set(key, v);
        }
    }
    for common in ["out", "threads", "precision"] {
        if let Some(v) = sub.get_one::<String>(common) {
            cfg.set(common, v);
        }
    }
    Ok(cfg)
}

fn out_dir(cfg: &Config) -> ConfigResult<PathBuf> {
    Ok(PathBuf::from(cfg.parse_or::<String>("out", "out".into())?))
}

fn parse_x0(cfg: &Config, card: &ModelCard) -> ConfigResult<Vec<f64>> {
    match cfg.get("x0") {
        None => Ok(card.default_x0.clone()),
        Some(_) => {
            let v: Vec<f64> = cfg.parse_list("x0")?;
            if v.len() != card.coefficients.dim_x {
                return Err(err(format!(
                    "x0 has {} components, model {} needs {}",
                    v.len(),
                    card.name,
                    card.coefficients.dim_x
                )));
            }
            Ok(v)
        }
    }
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    if threads == 0 {
        f()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(f)
    }
}

pub fn dispatch(name: &str, sub: &ArgMatches) -> ConfigResult<bool> {
    match name {
        "simulate" => cmd_simulate(sub),
        "picard" => cmd_picard(sub),
        "skeleton" => cmd_skeleton(sub),
        "rate" => cmd_rate(sub),
        "ldp-verify" => cmd_ldp_verify(sub),
        "strassen" => cmd_strassen(sub),
        "probe" => cmd_probe(sub),
        "selftest" => cmd_selftest(sub),
        other => Err(err(format!("unknown subcommand {other:?}"))),
    }
}

fn finish(
    command: &str,
    cfg: &Config,
    assertions: Vec<AssertionRecord>,
    outputs: serde_json::Value,
    started: Instant,
    dir: &Path,
) -> ConfigResult<bool> {
    let report = ExperimentReport::new(
        command,
        cfg,
        assertions,
        outputs,
        started.elapsed().as_millis() as u64,
    );
    report
        .write(dir)
        .map_err(|e| err(format!("cannot write report: {e}")))?;
    for a in &report.assertions {
        println!(
            "{} {}: observed {} vs reference {} -> {}",
            command,
            a.name,
            fmt_num(a.observed, 6),
            fmt_num(a.reference, 6),
            if a.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(report.pass)
}

// ---------------------------------------------------------------------------

fn cmd_simulate(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(
        sub,
        &[
            ("model", "model"),
            ("N", "n"),
            ("steps", "steps"),
            ("eps", "eps"),
            ("seed", "seed"),
            ("x0", "x0"),
            ("horizon", "horizon"),
            ("max-path-files", "max-path-files"),
        ],
    )?;
    let mut allowed = vec!["model", "n", "steps", "eps", "seed", "x0", "horizon", "max-path-files"];
    allowed.extend(COMMON_KEYS);
    cfg.check_schema(&allowed)?;

    let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
    let n: usize = cfg.parse("n")?;
    let steps: usize = cfg.parse_or("steps", 512)?;
    let eps: f64 = cfg.parse("eps")?;
    let seed: u64 = cfg.parse("seed")?;
    let horizon: f64 = cfg.parse_or("horizon", 1.0)?;
    let x0 = parse_x0(&cfg, &card)?;
    let threads: usize = cfg.parse_or("threads", 0)?;
    let precision: usize = cfg.parse_or("precision", 17)?;
    let max_files: usize = cfg.parse_or("max-path-files", 16)?;
    let dir = out_dir(&cfg)?;
    let grid = SimGrid::new(horizon, steps).map_err(core_err)?;

    let ps = in_pool(threads, || {
        mvsde_solver::simulate_particles(
            &card.coefficients,
            &InitialCondition::Point(x0.clone()),
            n,
            grid,
            &SimOptions::new(eps, seed),
        )
    })
    .map_err(core_err)?;

    std::fs::create_dir_all(&dir).map_err(|e| err(e.to_string()))?;
    for (i, p) in ps.paths.iter().take(max_files).enumerate() {
        let mut f = std::fs::File::create(dir.join(format!("path_{i:04}.csv")))
            .map_err(|e| err(e.to_string()))?;
        path_space::write_path_csv(p, precision, &mut f).map_err(core_err)?;
    }

    let (m2, se2) = mvsde_solver::moment_diagnostic(&ps, 2).map_err(core_err)?;
    let terminal = ps.marginal(steps);
    let mut outputs = json!({
        "n_particles": n,
        "sup_moment_p2": m2,
        "sup_moment_p2_se": se2,
        "terminal_second_moment": terminal.second_moment(),
        "terminal_mean": terminal.mean(),
    });
    if eps > 0.0 && steps >= 64 {
        let pairs: Vec<(usize, usize)> = [1usize, 2, 4, 8, 16, 32]
            .iter()
            .map(|l| (steps / 2, steps / 2 + l))
            .collect();
        if let Ok(fit) = mvsde_solver::continuity_diagnostic(&ps, &pairs) {
            outputs["continuity_slope"] = json!(fit.slope);
            outputs["continuity_half_width"] = json!(fit.half_width);
            let rows: Vec<Vec<f64>> = pairs
                .iter()
                .map(|(a, b)| {
                    let lag = grid.time(*b) - grid.time(*a);
                    let msq: f64 = ps
                        .paths
                        .iter()
                        .map(|p| {
                            p.value(*b)
                                .iter()
                                .zip(p.value(*a))
                                .map(|(x, y)| (x - y) * (x - y))
                                .sum::<f64>()
                        })
                        .sum::<f64>()
                        / ps.paths.len() as f64;
                    let fitted = (fit.slope * lag.ln()).exp();
                    vec![lag, msq, fitted]
                })
                .collect();
            emit_plot_data(&dir, PlotKind::ContinuityFit, &rows, precision)
                .map_err(|e| err(e.to_string()))?;
        }
    }
    finish("simulate", &cfg, Vec::new(), outputs, started, &dir)
}

fn cmd_picard(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(
        sub,
        &[
            ("model", "model"),
            ("M", "m"),
            ("steps", "steps"),
            ("eps", "eps"),
            ("tol", "tol"),
            ("max-iter", "max-iter"),
            ("seed", "seed"),
            ("x0", "x0"),
            ("horizon", "horizon"),
        ],
    )?;
    let mut allowed = vec!["model", "m", "steps", "eps", "tol", "max-iter", "seed", "x0", "horizon"];
    allowed.extend(COMMON_KEYS);
    cfg.check_schema(&allowed)?;

    let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
    let m: usize = cfg.parse_or("m", 2048)?;
    let steps: usize = cfg.parse_or("steps", 256)?;
    let eps: f64 = cfg.parse("eps")?;
    let tol: f64 = cfg.parse_or("tol", 1e-3)?;
    let max_iter: usize = cfg.parse_or("max-iter", 12)?;
    let seed: u64 = cfg.parse("seed")?;
    let horizon: f64 = cfg.parse_or("horizon", 1.0)?;
    let x0 = parse_x0(&cfg, &card)?;
    let threads: usize = cfg.parse_or("threads", 0)?;
    let precision: usize = cfg.parse_or("precision", 17)?;
    let dir = out_dir(&cfg)?;
    let grid = SimGrid::new(horizon, steps).map_err(core_err)?;

    let sol = in_pool(threads, || {
        mvsde_solver::solve_picard(
            &card.coefficients,
            &InitialCondition::Point(x0.clone()),
            m,
            grid,
            &SimOptions::new(eps, seed),
            tol,
            max_iter,
        )
    })
    .map_err(core_err)?;

    let rows: Vec<Vec<f64>> = sol
        .convergence_trace
        .iter()
        .enumerate()
        .map(|(i, w)| vec![(i + 1) as f64, *w])
        .collect();
    emit_plot_data(&dir, PlotKind::PicardTrace, &rows, precision).map_err(|e| err(e.to_string()))?;

    let tail_decreasing = sol.convergence_trace.len() < 3
        || sol.convergence_trace[1..].windows(2).all(|w| w[1] <= w[0]);
    let assertions = vec![
        AssertionRecord::boolean("picard_converged", sol.converged),
        AssertionRecord::boolean("trace_decreasing_from_second_iteration", tail_decreasing),
    ];
    let outputs = json!({
        "iterations": sol.iterations,
        "convergence_trace": sol.convergence_trace,
        "terminal_mean": sol.law_flow.last().unwrap().mean(),
        "terminal_second_moment": sol.law_flow.last().unwrap().second_moment(),
    });
    finish("picard", &cfg, assertions, outputs, started, &dir)
}

fn cmd_skeleton(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(
        sub,
        &[
            ("model", "model"),
            ("x0", "x0"),
            ("hfile", "hfile"),
            ("steps", "steps"),
            ("horizon", "horizon"),
        ],
    )?;
    let mut allowed = vec!["model", "x0", "hfile", "steps", "horizon"];
    allowed.extend(COMMON_KEYS);
    cfg.check_schema(&allowed)?;

    let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
    let steps: usize = cfg.parse_or("steps", 512)?;
    let horizon: f64 = cfg.parse_or("horizon", 1.0)?;
    let x0 = parse_x0(&cfg, &card)?;
    let precision: usize = cfg.parse_or("precision", 17)?;
    let dir = out_dir(&cfg)?;
    let sopts = SkeletonOptions::default();

    let h = match cfg.get("hfile") {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|e| err(format!("hfile: {e}")))?;
            path_space::read_cm_csv(&mut std::io::BufReader::new(file), horizon).map_err(core_err)?
        }
        None => path_space::CameronMartinPath::zero(horizon, card.coefficients.dim_w, steps),
    };
    let psi = skeleton_rate::solve_psi(&card.coefficients, &x0, steps, horizon, &sopts).map_err(core_err)?;
    let skel = skeleton_rate::solve_skeleton(&card.coefficients, &x0, &h, steps, &sopts).map_err(core_err)?;

    std::fs::create_dir_all(&dir).map_err(|e| err(e.to_string()))?;
    let mut f = std::fs::File::create(dir.join("psi.csv")).map_err(|e| err(e.to_string()))?;
    path_space::write_path_csv(&psi.path, precision, &mut f).map_err(core_err)?;
    let mut f = std::fs::File::create(dir.join("skeleton.csv")).map_err(|e| err(e.to_string()))?;
    path_space::write_path_csv(&skel.path, precision, &mut f).map_err(core_err)?;

    let assertions = vec![AssertionRecord::at_most(
        "integrator_defect",
        skel.residual.max(psi.residual),
        SkeletonOptions::default().defect_tol,
    )];
    let outputs = json!({
        "psi_terminal": psi.path.terminal(),
        "skeleton_terminal": skel.path.terminal(),
        "control_energy": h.energy(),
        "residual": skel.residual,
    });
    finish("skeleton", &cfg, assertions, outputs, started, &dir)
}

fn cmd_rate(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(
        sub,
        &[
            ("model", "model"),
            ("event", "event"),
            ("x0", "x0"),
            ("seed", "seed"),
            ("horizon", "horizon"),
            ("control-cells", "control-cells"),
            ("fine-steps", "fine-steps"),
        ],
    )?;
    let mut allowed = vec!["model", "event", "x0", "seed", "horizon", "control-cells", "fine-steps"];
    allowed.extend(COMMON_KEYS);
    cfg.check_schema(&allowed)?;

    let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
    let event = EventSpec::parse(cfg.require("event")?).map_err(core_err)?;
    let seed: u64 = cfg.parse("seed")?;
    let horizon: f64 = cfg.parse_or("horizon", 1.0)?;
    let x0 = parse_x0(&cfg, &card)?;
    let threads: usize = cfg.parse_or("threads", 0)?;
    let dir = out_dir(&cfg)?;
    let opts = EventRateOptions {
        control_cells: cfg.parse_or("control-cells", 64)?,
        fine_steps: cfg.parse_or("fine-steps", 512)?,
        seed,
        ..Default::default()
    };
    let init = path_space::CameronMartinPath::zero(horizon, card.coefficients.dim_w, opts.control_cells);
    let rv = in_pool(threads, || {
        skeleton_rate::rate_of_event(
            &card.coefficients,
            &x0,
            &event,
            &init,
            horizon,
            &opts,
            &SkeletonOptions::default(),
        )
    })
    .map_err(core_err)?;

    let (value_json, feasible) = match rv.value {
        RateOutcome::Finite(v) => (json!(v), true),
        RateOutcome::Infinite => (json!("infinite"), false),
        RateOutcome::NoFeasiblePoint => (json!("no-feasible-point"), false),
    };
    let assertions = vec![AssertionRecord::boolean("feasible_point_found", feasible)];
    let outputs = json!({
        "value": value_json,
        "is_upper_bound": rv.is_upper_bound,
        "final_violation": rv.attainability_residual,
        "minimizer_energy": rv.minimizer.as_ref().map(|h| h.energy()),
    });
    finish("rate", &cfg, assertions, outputs, started, &dir)
}

// ---------------------------------------------------------------------------

fn parse_norm(cfg: &Config) -> ConfigResult<NormKind> {
    match cfg.parse_or::<String>("norm", "sup".into())?.as_str() {
        "sup" => Ok(NormKind::Sup),
        other => match other.strip_prefix("holder:") {
            Some(a) => Ok(NormKind::Holder(a.parse::<f64>().map_err(|e| err(e.to_string()))?)),
            None => Err(err(format!("norm must be sup or holder:<alpha>, got {other:?}"))),
        },
    }
}

fn write_cells_csv(dir: &Path, header: &str, rows: &[String]) -> ConfigResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(dir.join("cells.csv"), text).map_err(|e| err(e.to_string()))
}

fn cmd_ldp_verify(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(sub, &[])?;
    let mode = cfg.parse_or::<String>("mode", "event".into())?;
    let threads: usize = cfg.parse_or("threads", 0)?;
    let precision: usize = cfg.parse_or("precision", 17)?;
    let dir = out_dir(&cfg)?;
    let sopts = SkeletonOptions::default();

    match mode.as_str() {
        "event" => {
            let mut allowed = vec![
                "mode", "model", "event", "eps", "replicas", "seed", "steps", "horizon", "x0",
                "norm", "reference", "band",
            ];
            allowed.extend(COMMON_KEYS);
            cfg.check_schema(&allowed)?;
            let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
            let event = EventSpec::parse(cfg.require("event")?).map_err(core_err)?;
            let seed: u64 = cfg.parse("seed")?;
            let steps: usize = cfg.parse_or("steps", 512)?;
            let horizon: f64 = cfg.parse_or("horizon", 1.0)?;
            let x0 = parse_x0(&cfg, &card)?;
            let exp = ldp_harness::LdpExperiment {
                event: event.clone(),
                eps_schedule: cfg.parse_list("eps")?,
                replicas: cfg.parse_or("replicas", 10_000)?,
                norm: parse_norm(&cfg)?,
                seed,
                grid: SimGrid::new(horizon, steps).map_err(core_err)?,
                x0: x0.clone(),
            };
            let band: f64 = cfg.parse_or("band", 0.25)?;
            let reference = match cfg.parse_or::<String>("reference", "auto".into())?.as_str() {
                "none" => None,
                "auto" => {
                    let init =
                        path_space::CameronMartinPath::zero(horizon, card.coefficients.dim_w, 64);
                    let opts = EventRateOptions {
                        seed,
                        fine_steps: steps,
                        ..Default::default()
                    };
                    in_pool(threads, || {
                        skeleton_rate::rate_of_event(
                            &card.coefficients,
                            &x0,
                            &event,
                            &init,
                            horizon,
                            &opts,
                            &sopts,
                        )
                    })
                    .map_err(core_err)?
                    .value
                    .finite()
                }
                num => Some(num.parse::<f64>().map_err(|e| err(e.to_string()))?),
            };
            let est = in_pool(threads, || {
                ldp_harness::estimate_event_probability(&card, &exp, &sopts, reference)
            })
            .map_err(core_err)?;

            let rows: Vec<Vec<f64>> = est
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.eps,
                        r.minus_eps_log_p.unwrap_or(f64::NAN),
                        r.wilson.lo,
                        r.wilson.hi,
                        est.delta_ref.unwrap_or(f64::NAN),
                    ]
                })
                .collect();
            emit_plot_data(&dir, PlotKind::LdpCurve, &rows, precision)
                .map_err(|e| err(e.to_string()))?;
            let csv_rows: Vec<String> = est
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{},{},{}",
                        fmt_num(r.eps, precision),
                        fmt_num(r.p_hat, precision),
                        fmt_num(r.wilson.lo, precision),
                        fmt_num(r.wilson.hi, precision),
                        r.censored,
                        r.exact
                    )
                })
                .collect();
            write_cells_csv(&dir, "eps,p_hat,wilson_lo,wilson_hi,censored,exact", &csv_rows)?;

            let informative: Vec<f64> = est.rows.iter().filter_map(|r| r.minus_eps_log_p).collect();
            let monotone = informative.windows(2).all(|w| w[1] <= w[0]);
            let mut assertions = vec![AssertionRecord::boolean(
                "minus_eps_log_p_monotone_decreasing",
                monotone,
            )];
            if let (Some(reference), Some(extrap)) = (est.delta_ref, est.extrapolated) {
                assertions.push(AssertionRecord::within(
                    "extrapolated_rate_vs_reference",
                    extrap,
                    reference,
                    band * reference.abs().max(1e-12),
                ));
            }
            let outputs = serde_json::to_value(&est).expect("serializable");
            finish("ldp-verify", &cfg, assertions, outputs, started, &dir)
        }
        "gap" => {
            let mut allowed = vec![
                "mode", "model", "gap-kind", "eps", "m", "delta", "replicas", "seed", "steps",
                "horizon", "x0", "min-informative",
            ];
            allowed.extend(COMMON_KEYS);
            cfg.check_schema(&allowed)?;
            let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
            let kind = match cfg.parse_or::<String>("gap-kind", "step".into())?.as_str() {
                "discretization" => GapKind::Discretization,
                "step" => GapKind::StepProcess,
                "mean-field" => GapKind::MeanField,
                other => return Err(err(format!("unknown gap-kind {other:?}"))),
            };
            let x0 = parse_x0(&cfg, &card)?;
            let eps: Vec<f64> = cfg.parse_list("eps")?;
            let m: Vec<usize> = cfg.parse_list("m")?;
            let rep = in_pool(threads, || {
                ldp_harness::exponential_equivalence_gap(
                    &card.coefficients,
                    &x0,
                    kind,
                    &eps,
                    &m,
                    cfg.parse("delta")?,
                    cfg.parse_or("replicas", 10_000)?,
                    SimGrid::new(cfg.parse_or("horizon", 1.0)?, cfg.parse_or("steps", 512)?)
                        .map_err(core_err)?,
                    cfg.parse("seed")?,
                    &sopts,
                )
                .map_err(core_err)
            })?;
            let csv_rows: Vec<String> = rep
                .cells
                .iter()
                .map(|c| {
                    format!(
                        "{},{},{},{},{}",
                        fmt_num(c.eps, precision),
                        c.m,
                        fmt_num(c.p_hat, precision),
                        c.eps_log_p.map(|v| fmt_num(v, precision)).unwrap_or_else(|| "censored".into()),
                        c.censored
                    )
                })
                .collect();
            write_cells_csv(&dir, "eps,m,p_hat,eps_log_p,censored", &csv_rows)?;
            let min_informative: usize = cfg.parse_or("min-informative", 0)?;
            let assertions = vec![
                AssertionRecord::boolean("eps_log_p_decreasing_in_m", rep.decreasing_in_m),
                AssertionRecord::boolean(
                    "eps_log_p_decreasing_in_eps_at_finest_m",
                    rep.decreasing_in_eps_at_finest_m,
                ),
                AssertionRecord::at_most(
                    "min_informative_cells",
                    min_informative as f64,
                    rep.informative_cells as f64,
                ),
            ];
            let outputs = serde_json::to_value(&rep).expect("serializable");
            finish("ldp-verify", &cfg, assertions, outputs, started, &dir)
        }
        "sup-bound" => {
            let mut allowed = vec!["mode", "delta", "eps", "tau", "dim-w", "replicas", "steps", "seed"];
            allowed.extend(COMMON_KEYS);
            cfg.check_schema(&allowed)?;
            let rep = in_pool(threads, || {
                ldp_harness::check_brownian_sup_bound(
                    cfg.parse("delta")?,
                    cfg.parse("eps")?,
                    cfg.parse_or("tau", 1.0)?,
                    cfg.parse_or("dim-w", 1)?,
                    cfg.parse_or("replicas", 10_000)?,
                    cfg.parse_or("steps", 512)?,
                    cfg.parse("seed")?,
                )
                .map_err(core_err)
            })?;
            let assertions = vec![AssertionRecord::at_most(
                "empirical_probability_below_bound",
                rep.p_hat,
                rep.bound,
            )];
            let outputs = serde_json::to_value(&rep).expect("serializable");
            finish("ldp-verify", &cfg, assertions, outputs, started, &dir)
        }
        "holder-bound" => {
            let mut allowed = vec!["mode", "u", "v", "alpha", "replicas", "steps", "seed"];
            allowed.extend(COMMON_KEYS);
            cfg.check_schema(&allowed)?;
            let rep = in_pool(threads, || {
                ldp_harness::check_holder_event_bound(
                    cfg.parse("u")?,
                    cfg.parse("v")?,
                    cfg.parse("alpha")?,
                    cfg.parse_or("replicas", 10_000)?,
                    cfg.parse_or("steps", 1024)?,
                    cfg.parse("seed")?,
                )
                .map_err(core_err)
            })?;
            let assertions = vec![AssertionRecord::at_most(
                "empirical_probability_below_bound",
                rep.p_hat,
                rep.bound,
            )];
            let outputs = serde_json::to_value(&rep).expect("serializable");
            finish("ldp-verify", &cfg, assertions, outputs, started, &dir)
        }
        "skeleton-event" => {
            let mut allowed = vec![
                "mode", "model", "eps", "rho", "alpha", "rate-r", "slope", "cells", "replicas",
                "steps", "seed",
            ];
            allowed.extend(COMMON_KEYS);
            cfg.check_schema(&allowed)?;
            let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
            let cells: usize = cfg.parse_or("cells", 64)?;
            let slope: f64 = cfg.parse_or("slope", 1.0)?;
            let h = path_space::CameronMartinPath::line(1.0, &vec![slope; card.coefficients.dim_w], cells);
            let rep = in_pool(threads, || {
                ldp_harness::check_holder_skeleton_event(
                    &card,
                    &h,
                    cfg.parse("eps")?,
                    cfg.parse("rho")?,
                    cfg.parse("alpha")?,
                    cfg.parse_or("rate-r", 1.0)?,
                    cfg.parse_or("replicas", 10_000)?,
                    cfg.parse_or("steps", 512)?,
                    cfg.parse("seed")?,
                    &sopts,
                )
                .map_err(core_err)
            })?;
            let assertions = vec![AssertionRecord::at_most(
                "joint_probability_below_exp_rate",
                rep.p_hat,
                rep.bound,
            )];
            let outputs = serde_json::to_value(&rep).expect("serializable");
            finish("ldp-verify", &cfg, assertions, outputs, started, &dir)
        }
        other => Err(err(format!(
            "unknown mode {other:?} (event, gap, sup-bound, holder-bound, skeleton-event)"
        ))),
    }
}

fn cmd_strassen(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(
        sub,
        &[
            ("model", "model"),
            ("U", "u"),
            ("c", "c"),
            ("alpha", "alpha"),
            ("seeds", "seeds"),
            ("seed", "seed"),
            ("n-per-unit", "n-per-unit"),
            ("eps", "eps"),
        ],
    )?;
    let mut allowed = vec![
        "model", "u", "c", "alpha", "seeds", "seed", "n-per-unit", "n-z", "n-h", "u-samples",
        "distance-iters", "eps", "halving", "proxy-lo", "proxy-hi", "halving-tol",
    ];
    allowed.extend(COMMON_KEYS);
    cfg.check_schema(&allowed)?;

    let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
    let big_u: f64 = cfg.parse("u")?;
    let trajectories: usize = cfg.parse_or("seeds", 64)?;
    let seed: u64 = cfg.parse("seed")?;
    let threads: usize = cfg.parse_or("threads", 0)?;
    let precision: usize = cfg.parse_or("precision", 17)?;
    let dir = out_dir(&cfg)?;
    let opts = StrassenOptions {
        n_per_unit: cfg.parse_or("n-per-unit", 64)?,
        n_z: cfg.parse_or("n-z", 256)?,
        n_h: cfg.parse_or("n-h", 32)?,
        c: cfg.parse_or("c", 2.0)?,
        alpha: cfg.parse_or("alpha", 0.25)?,
        u_samples: cfg.parse_or("u-samples", 4)?,
        distance_iters: cfg.parse_or("distance-iters", 160)?,
        epsilon: cfg.parse_or("eps", 1.0)?,
        halving_study: cfg.parse_or("halving", true)?,
    };
    let gamma = ContractionSystem::linear(card.default_x0.clone());
    let rep = in_pool(threads, || {
        strassen_lil::strassen_experiment(
            &card,
            &gamma,
            big_u,
            trajectories,
            seed,
            &opts,
            &SkeletonOptions::default(),
        )
    })
    .map_err(core_err)?;

    let rows: Vec<Vec<f64>> = rep
        .j_levels
        .iter()
        .map(|r| vec![r.j as f64, r.u, r.median_d_alpha, r.median_a_jc])
        .collect();
    emit_plot_data(&dir, PlotKind::StrassenJSweep, &rows, precision)
        .map_err(|e| err(e.to_string()))?;
    let csv_rows: Vec<String> = rep
        .j_levels
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{}",
                r.j,
                fmt_num(r.u, precision),
                fmt_num(r.median_d_alpha, precision),
                fmt_num(r.median_a_jc, precision)
            )
        })
        .collect();
    write_cells_csv(&dir, "j,u,median_d_alpha,median_A_jc", &csv_rows)?;

    let proxy_lo: f64 = cfg.parse_or("proxy-lo", 0.0)?;
    let proxy_hi: f64 = cfg.parse_or("proxy-hi", f64::INFINITY)?;
    let halving_tol: f64 = cfg.parse_or("halving-tol", f64::INFINITY)?;
    let mut assertions = vec![
        AssertionRecord::boolean(
            "d_alpha_median_last5_nonincreasing",
            rep.d_alpha_last5_nonincreasing,
        ),
        AssertionRecord::boolean(
            "a_jc_median_last5_nonincreasing",
            rep.a_jc_last5_nonincreasing,
        ),
        AssertionRecord::boolean(
            "limsup_proxy_in_band",
            rep.limsup_proxy_mean >= proxy_lo && rep.limsup_proxy_mean <= proxy_hi,
        ),
    ];
    if let Some(delta) = rep.halving_delta {
        assertions.push(AssertionRecord::at_most("halving_delta", delta, halving_tol));
    }
    let outputs = serde_json::to_value(&rep).expect("serializable");
    finish("strassen", &cfg, assertions, outputs, started, &dir)
}

fn cmd_probe(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(
        sub,
        &[
            ("model", "model"),
            ("samples", "samples"),
            ("box", "box"),
            ("seed", "seed"),
        ],
    )?;
    let mut allowed = vec!["model", "samples", "box", "seed"];
    allowed.extend(COMMON_KEYS);
    cfg.check_schema(&allowed)?;

    let card = model::model_by_name(cfg.require("model")?).map_err(core_err)?;
    let samples: usize = cfg.parse_or("samples", 10_000)?;
    let box_radius: f64 = cfg.parse_or("box", 3.0)?;
    let seed: u64 = cfg.parse("seed")?;
    let threads: usize = cfg.parse_or("threads", 0)?;
    let dir = out_dir(&cfg)?;

    let (mono, lip) = in_pool(threads, || {
        let m = model::probe_monotonicity(&card.coefficients, samples, box_radius, seed);
        let l = model::probe_lipschitz_sigma(&card.coefficients, samples, box_radius, seed);
        (m, l)
    });
    let mono = mono.map_err(core_err)?;
    let lip = lip.map_err(core_err)?;
    let assertions = vec![mono.assertion(), lip.assertion()];
    let outputs = json!({ "monotonicity": mono, "sigma_lipschitz": lip });
    finish("probe", &cfg, assertions, outputs, started, &dir)
}

fn cmd_selftest(sub: &ArgMatches) -> ConfigResult<bool> {
    let started = Instant::now();
    let cfg = merge_config(sub, &[])?;
    let mut allowed = vec![];
    allowed.extend(COMMON_KEYS);
    cfg.check_schema(&allowed)?;
    let dir = out_dir(&cfg)?;

    let mut assertions = Vec::new();
    let mut check = |name: &str, pass: bool| {
        println!("selftest {name}: {}", if pass { "ok" } else { "FAIL" });
        assertions.push(AssertionRecord::boolean(name, pass));
    };

    // quick closed-form example battery
    let constant = path_space::Path::from_fn(1.0, 10, |_| 3.0).unwrap();
    check("sup_norm_constant", path_space::sup_norm(&constant) == 3.0);
    check(
        "holder_norm_constant_zero",
        path_space::holder_norm(&constant, 0.3).unwrap() == 0.0,
    );
    let line = path_space::Path::from_fn(1.0, 100, |t| t).unwrap();
    check("sup_norm_line", path_space::sup_norm(&line) == 1.0);
    let d0 = mvsde_core::EmpiricalMeasure::dirac(&[0.0]);
    let d1 = mvsde_core::EmpiricalMeasure::dirac(&[1.0]);
    check(
        "w2_between_diracs",
        (mvsde_core::measure_ops::wasserstein2(&d0, &d1).unwrap() - 1.0).abs() < 1e-12,
    );
    check(
        "modified_w2_saturates",
        (mvsde_core::measure_ops::modified_wasserstein(
            &d0,
            &mvsde_core::EmpiricalMeasure::dirac(&[5.0]),
        )
        .unwrap()
            - 1.0)
            .abs()
            < 1e-12,
    );
    let sum = mvsde_core::measure_ops::measure_add(&d1, &d1).unwrap();
    check("dirac_addition", (sum.atom(0)[0] - 2.0).abs() < 1e-12);
    let brown = model::brownian_card();
    let psi = skeleton_rate::solve_psi(&brown.coefficients, &[0.7], 32, 1.0, &SkeletonOptions::default())
        .unwrap()
        .path;
    check("psi_driftless_constant", psi.terminal()[0] == 0.7);
    let ou = model::mean_field_ou_card(1.0);
    let ps = mvsde_solver::simulate_particles(
        &ou.coefficients,
        &InitialCondition::Point(vec![2.0]),
        8,
        SimGrid::new(1.0, 32).unwrap(),
        &SimOptions::new(0.0, 1),
    )
    .unwrap();
    check("noiseless_ou_frozen", ps.paths.iter().all(|p| p.terminal()[0] == 2.0));
    check(
        "event_spec_parse",
        EventSpec::parse("terminal:v=1,c=1").is_ok() && EventSpec::parse("bogus").is_err(),
    );
    let sys = ContractionSystem::linear(vec![0.0]);
    check(
        "contraction_probe",
        strassen_lil::probe_contraction_system(&sys, 100, 3.0, 1).pass,
    );
    let h = path_space::CameronMartinPath::line(1.0, &[1.0], 16);
    let hp = path_space::cm_to_path(&h);
    check("cm_line_integrates", (hp.terminal()[0] - 1.0).abs() < 1e-12);
    check(
        "zero_rate_event_contains_flow",
        {
            let event = EventSpec::HolderBall { alpha: 0.3, r: 1.0 };
            let psi32 = skeleton_rate::solve_psi(
                &brown.coefficients,
                &[0.0],
                32,
                1.0,
                &SkeletonOptions::default(),
            )
            .unwrap()
            .path;
            event.is_member(&psi32, &psi32).unwrap()
        },
    );
    finish("selftest", &cfg, assertions, json!({}), started, &dir)
}
