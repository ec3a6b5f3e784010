use std::fs;
use std::path::Path;

fn run(args: &[&str]) -> i32 {
    let mut argv: Vec<String> = vec!["mvsde".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    mvsde_cli::run(&argv)
}

fn read_report(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Report JSON with the wall clock removed; the byte-reproducible part.
fn stripped_report(dir: &Path) -> String {
    let mut v = read_report(dir);
    v.as_object_mut().unwrap().remove("wall_clock_ms");
    serde_json::to_string(&v).unwrap()
}

#[test]
fn selftest_passes_on_fresh_checkout() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["selftest", "--out", dir.path().to_str().unwrap()]), 0);
    let rep = read_report(dir.path());
    assert_eq!(rep["pass"], serde_json::Value::Bool(true));
    assert_eq!(rep["rng_policy"], "ctr-v1");
}

#[test]
fn unknown_flag_exits_with_configuration_error() {
    assert_eq!(run(&["simulate", "--majestic", "1"]), 2);
}

#[test]
fn unknown_config_key_names_the_offender() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "model=brownian\nwibble=3\n").unwrap();
    let code = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--N",
        "4",
        "--eps",
        "1",
        "--seed",
        "1",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn missing_seed_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&[
        "simulate",
        "--model",
        "brownian",
        "--N",
        "4",
        "--eps",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn cli_flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.cfg");
    fs::write(
        &cfg,
        "# comment line\nmodel=brownian\nn=4\nsteps=16\neps=1.0\nseed=5\n",
    )
    .unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    assert_eq!(
        run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out1.to_str().unwrap()
        ]),
        0
    );
    assert_eq!(
        run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "6",
            "--out",
            out2.to_str().unwrap()
        ]),
        0
    );
    let a = read_report(&out1);
    let b = read_report(&out2);
    assert_eq!(a["config"]["seed"], "5");
    assert_eq!(b["config"]["seed"], "6");
    assert_ne!(
        a["outputs"]["terminal_second_moment"],
        b["outputs"]["terminal_second_moment"]
    );
}

#[test]
fn reports_are_byte_reproducible_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let mut captured = Vec::new();
    for _ in 0..2 {
        assert_eq!(
            run(&[
                "picard",
                "--model",
                "mf-ou",
                "--M",
                "128",
                "--steps",
                "64",
                "--eps",
                "0.25",
                "--seed",
                "11",
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
        captured.push(stripped_report(&out));
    }
    assert_eq!(captured[0], captured[1]);
}

#[test]
fn plot_data_schemas_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    assert_eq!(
        run(&[
            "picard",
            "--model",
            "brownian",
            "--M",
            "64",
            "--steps",
            "32",
            "--eps",
            "0.5",
            "--seed",
            "2",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let dat = fs::read_to_string(out.join("picard_trace.dat")).unwrap();
    let header = dat.lines().next().unwrap();
    assert_eq!(header, "# iteration sup_time_W2");
    for line in dat.lines().skip(1) {
        assert_eq!(line.split_whitespace().count(), 2);
    }

    let out_ldp = dir.path().join("l");
    let cfg = dir.path().join("ldp.cfg");
    fs::write(
        &cfg,
        "mode=event\nmodel=brownian\nevent=terminal:v=1,c=1\neps=0.02,0.01,0.005\nreplicas=100\nseed=3\nreference=0.5\n",
    )
    .unwrap();
    assert_eq!(
        run(&[
            "ldp-verify",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_ldp.to_str().unwrap()
        ]),
        0
    );
    let dat = fs::read_to_string(out_ldp.join("ldp_curve.dat")).unwrap();
    assert_eq!(
        dat.lines().next().unwrap(),
        "# eps minus_eps_log_p wilson_lo wilson_hi delta_ref"
    );
    assert!(out_ldp.join("cells.csv").exists());
}

#[test]
fn skeleton_command_writes_flow_and_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    assert_eq!(
        run(&[
            "skeleton",
            "--model",
            "mf-ou",
            "--x0",
            "2.0",
            "--steps",
            "64",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    assert!(out.join("psi.csv").exists());
    assert!(out.join("skeleton.csv").exists());
    let rep = read_report(&out);
    assert_eq!(rep["outputs"]["psi_terminal"][0], 2.0);
}

#[test]
fn probe_command_reports_model_probes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pr");
    assert_eq!(
        run(&[
            "probe",
            "--model",
            "double-well",
            "--samples",
            "2000",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let rep = read_report(&out);
    assert_eq!(rep["pass"], serde_json::Value::Bool(true));
}

#[test]
fn rate_command_brownian_terminal_event() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rt");
    assert_eq!(
        run(&[
            "rate",
            "--model",
            "brownian",
            "--event",
            "terminal:v=1,c=1",
            "--seed",
            "1",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let rep = read_report(&out);
    let v = rep["outputs"]["value"].as_f64().unwrap();
    assert!((v - 0.5).abs() < 0.005, "{v}");
}

#[test]
fn bad_event_spec_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&[
            "rate",
            "--model",
            "brownian",
            "--event",
            "nonsense",
            "--seed",
            "1",
            "--out",
            dir.path().to_str().unwrap()
        ]),
        2
    );
}
