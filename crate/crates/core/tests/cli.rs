//! End-to-end runs of the `wgqed` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn wgqed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wgqed")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "emitters": [
            {"gamma_ghz": 0.79, "beta": 0.8, "detuning_ghz": 0.0, "gamma_dephase_ghz": 0.03},
            {"gamma_ghz": 0.73, "beta": 0.8, "detuning_ghz": 0.0, "gamma_dephase_ghz": 0.03}
        ],
        "phases": {"phi_rad": 0.05},
        "simulation": {"t0_ns": 0.0, "t1_ns": 6.0, "n_points": 601},
        "diffusion": {"mode": "relative", "sigma_ghz": 0.2, "emitter": 0, "n_nodes": 15},
        "irf": {"preset": "snspd"},
        "normalize": "max",
        "ports": "both",
        "sweep": {"emitter": 0, "detunings_ghz": [-1.0, 0.0, 1.0]}
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = wgqed(&["simulate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("time_ns,intensity_port1,intensity_port2,pop_sup,pop_sub,pop_ee,pop_gg\n"));
    assert_eq!(text.lines().count(), 602);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let first = dir.path().join("first.csv");
    let o = wgqed(&["simulate", "--config", s(&cfg), "--out", s(&first), "--normalize", "sum", "--ports", "1"]);
    assert!(o.status.success());
    let resolved = dir.path().join("first.config.json");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&resolved).unwrap()).unwrap();
    assert_eq!(v["normalize"], "sum");
    assert_eq!(v["ports"], "1");

    let second = dir.path().join("second.csv");
    let o = wgqed(&["simulate", "--config", s(&resolved), "--out", s(&second)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    // port 2 column is empty when only port 1 is requested
    let row = std::fs::read_to_string(&first).unwrap().lines().nth(5).unwrap().to_owned();
    assert_eq!(row.split(',').nth(2), Some(""));
}

#[test]
fn one_point_sweep_equals_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"sweep": {"emitter": 0, "detunings_ghz": [0.0]}}));
    let sim = dir.path().join("sim.csv");
    let sweep = dir.path().join("sweep.csv");
    assert!(wgqed(&["simulate", "--config", s(&cfg), "--out", s(&sim)]).status.success());
    assert!(wgqed(&["sweep", "--config", s(&cfg), "--out", s(&sweep)]).status.success());

    let sim_text = std::fs::read_to_string(&sim).unwrap();
    let port1: Vec<&str> = sim_text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    let sweep_text = std::fs::read_to_string(&sweep).unwrap();
    let mut lines = sweep_text.lines();
    assert_eq!(
        lines.next(),
        Some("detuning_ghz,time_ns,port,intensity,pop_sup,pop_sub,pop_ee")
    );
    let swept: Vec<&str> = lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[2] == "1")
        .map(|f| f[3])
        .collect::<Vec<_>>();
    assert_eq!(port1, swept);
    assert!(dir.path().join("sweep_peaks.csv").exists());
}

#[test]
fn fit_of_simulated_trace_reports_two_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({"ports": "1"}));
    let sim = dir.path().join("sim.csv");
    assert!(wgqed(&["simulate", "--config", s(&cfg), "--out", s(&sim)]).status.success());
    // reshape to time_ns,counts
    let trace = dir.path().join("trace.csv");
    let body: String = std::iter::once("time_ns,counts".to_owned())
        .chain(
            std::fs::read_to_string(&sim)
                .unwrap()
                .lines()
                .skip(1)
                .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(",")),
        )
        .map(|l| l + "\n")
        .collect();
    std::fs::write(&trace, body).unwrap();

    let report = dir.path().join("fit.txt");
    let o = wgqed(&["fit", "--trace", s(&trace), "--config", s(&cfg), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("single_exponential=false"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    let fast = v["fit"]["gamma_fast"].as_f64().unwrap();
    let slow = v["fit"]["gamma_slow"].as_f64().unwrap();
    assert!(fast > 0.76 && slow < 0.76, "{fast} {slow}");
    assert_eq!(v["options"]["irf_fwhm_ns"], 0.2);
    assert_eq!(v["enhancement"]["kind"], "finite");
}

#[test]
fn oracle_check_passes_with_defaults() {
    let o = wgqed(&["oracle-check", "--draws", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max_abs_error="));
}

#[test]
fn invalid_config_exits_2_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), json!({}));
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["emitters"][1]["beta"] = json!(1.4);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = wgqed(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("emitters[1]") && err.contains("beta"), "{err}");

    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["emitters"][1]["beta"] = json!(0.8);
    v["simulation"]["n_pionts"] = json!(3);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = wgqed(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_pionts"));
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = wgqed(&["simulate", "--config", s(&missing), "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));

    let trace = dir.path().join("t.csv");
    std::fs::write(&trace, "time_ns,counts\n0.0,1\n0.1,oops\n").unwrap();
    let o = wgqed(&["fit", "--trace", s(&trace)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("t.csv:3:"));

    // too few samples to fit
    std::fs::write(&trace, "time_ns,counts\n0.0,1\n0.1,0.5\n0.2,0.25\n").unwrap();
    assert_eq!(wgqed(&["fit", "--trace", s(&trace)]).status.code(), Some(2));
}
