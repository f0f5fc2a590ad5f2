use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relperf")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn finite(extra_agent: Value) -> Value {
    let mut agent = json!({"sigma": [1.0], "sigma_star": [1.0], "theta": [0.2], "eta": 0.5, "xi": 1.0, "constraint": {"type": "full_space"}});
    for (k, v) in extra_agent.as_object().unwrap() {
        if v.is_null() {
            agent.as_object_mut().unwrap().remove(k);
        } else {
            agent[k] = v.clone();
        }
    }
    json!({"graph": {"type": "complete", "n": 3}, "agents": [agent], "tgrid": {"horizon": 1.0, "steps": 4}, "seed": 1})
}

#[test]
fn missing_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &finite(json!({"eta": null})));
    let out = run(&["solve-finite", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["field"], "eta");
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &finite(json!({"gamma": 2.0})));
    let out = run(&["solve-finite", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma"));
}

#[test]
fn out_of_range_parameter_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &finite(json!({"eta": 1.5})));
    assert_eq!(run(&["solve-finite", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(run(&["solve-finite", "--config", "/nonexistent/config.json"]).status.code(), Some(2));
}

#[test]
fn complete_graph_strategies() {
    let out = run(&["solve-finite", "--config", configs().join("finite_complete.json").to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let art: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(art["seed"], 3);
    assert_eq!(art["config_sha256"].as_str().unwrap().len(), 64);
    for agent in art["result"]["equilibrium"]["pi"].as_array().unwrap() {
        for step in agent.as_array().unwrap() {
            assert!((step[0].as_f64().unwrap() - 0.1).abs() < 1e-8);
        }
    }
}

#[test]
fn cut_norm_of_constants() {
    let out = run(&["cut-norm", "--config", configs().join("cut_norm.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let art: Value = serde_json::from_slice(&out.stdout).unwrap();
    let v = art["result"]["value"].as_f64().unwrap();
    assert!((v - 0.2).abs() < 1e-15, "{art}");
}

#[test]
fn chaos_csv_has_one_row_per_cell_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "graphon": {"kernel": "product"},
        "n_schedule": [4, 6],
        "beta_rule": {"rule": "constant", "beta": 1.0},
        "reps": 2,
        "seed": 1,
        "coeffs": {"sigma": [1.0], "sigma_star": [0.5], "theta": [0.2], "eta": 0.5, "xi": 1.0, "constraint": {"type": "full_space"}},
        "tgrid": {"horizon": 1.0, "steps": 3},
        "labels": 16,
        "xi_draws": 10
    });
    let path = write_config(dir.path(), "chaos.json", &cfg);
    let out_dir = dir.path().join("out");
    let out = run(&["chaos", "--config", &path, "--format", "csv", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("chaos.csv")).unwrap();
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data[0], "n,rep,metric,value");
    assert_eq!(data.len() - 1, 2 * 2 * 6);
    assert!(csv.lines().any(|l| l.starts_with("# seed")));
    assert!(out_dir.join("chaos.dat").exists());
}

#[test]
fn sampled_graph_round_trips_through_json() {
    let out = run(&["sample-graph", "--config", configs().join("sample_graph.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let art: Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = serde_json::to_string(&art).unwrap();
    let back: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(art, back);
    // the artifact parses back into a graph the finite solver accepts
    let mut graph = art["result"].clone();
    graph["type"] = json!("edges");
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = finite(json!({}));
    cfg["graph"] = graph;
    let path = write_config(dir.path(), "fin.json", &cfg);
    let o = run(&["solve-finite", "--config", &path]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn csv_and_json_agree_on_the_config_hash() {
    let cfg = configs().join("finite_complete.json");
    let j: Value = serde_json::from_slice(&run(&["solve-finite", "--config", cfg.to_str().unwrap()]).stdout).unwrap();
    let c = String::from_utf8(run(&["solve-finite", "--config", cfg.to_str().unwrap(), "--format", "csv"]).stdout).unwrap();
    let hash = j["config_sha256"].as_str().unwrap();
    assert!(c.lines().any(|l| l.contains(hash)));
}
