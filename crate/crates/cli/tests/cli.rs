//! Drives the `esb` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn esb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esb")).args(args).output().expect("esb runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn builtin_doc(id: &str) -> Value {
    let out = esb(&["scenarios", "--show", id]);
    assert!(out.status.success());
    stdout_json(&out)
}

fn write_doc(dir: &Path, name: &str, doc: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(doc).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn lists_six_builtins() {
    let out = esb(&["scenarios"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    let listed = stdout_json(&esb(&["scenarios", "--format", "json"]));
    let ids: Vec<&str> = listed.as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(
        ids,
        ["sim1_independent", "sim2_dependent", "sim3_switching", "sim4_insert_remove", "sim5_dynamic", "ex5_rank_loss"]
    );
}

#[test]
fn builtins_embed_schedules_and_bounds() {
    let sim3 = builtin_doc("sim3_switching");
    let ends: Vec<u64> = sim3["timeline"].as_array().unwrap().iter().map(|s| s["until_iteration"].as_u64().unwrap()).collect();
    assert_eq!(ends, [3333, 6666, 10000]);
    assert_eq!(builtin_doc("sim5_dynamic")["dynamics"]["u_max"], json!(60.0));
}

#[test]
fn run_sim1_converges_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = esb(&["run", "sim1_independent", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    for entry in summary["final_h"].as_array().unwrap() {
        assert!(entry[1].as_f64().unwrap().abs() < 1e-2, "{entry}");
    }
    let csv = std::fs::read_to_string(dir.path().join("sim1_independent.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "t,iter,segment,s,q1,q2,q3,qd1,qd2,qd3,u1,u2,u3,h_T1,h_T2,h_T3,delta_T1,delta_T2,delta_T3,v_1,v_2,z_1,z_2,V_gamma,V_z,rank,rank_drop,active_set,du_inf"
    );
    assert_eq!(csv.lines().count(), 10_001);
    let on_disk: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim1_independent.summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
}

#[test]
fn dt_override_and_json_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("short.json");
    let out = esb(&[
        "run",
        "sim2_dependent",
        "--override",
        "integrator.dt=0.005",
        "--override",
        "timeline.0.until_iteration=20",
        "--format",
        "json",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["dt"], json!(0.005));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(doc["records"].as_array().unwrap().len(), 20);
    assert!(dir.path().join("short.summary.json").exists());
}

#[test]
fn schema_errors_exit_two_with_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc = builtin_doc("sim1_independent");
    doc.as_object_mut().unwrap().remove("integrator");
    let path = write_doc(dir.path(), "broken.json", &doc);
    let out = esb(&["run", &path]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("integrator"), "{err}");

    let out = esb(&["run", "sim1_independent", "--override", "tasks.0.params.selector.kind=elbow"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/tasks/0"));

    let out = esb(&["run", "no_such_scenario"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_hard_constraints_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let goal = |id: &str, x: f64| {
        json!({ "id": id, "kind": "goal_point", "safety_critical": true,
                "params": { "selector": { "kind": "link_end", "index": 1 }, "target": [x, 0.0] } })
    };
    let doc = json!({
        "name": "opposed",
        "chain": { "kind": "cartesian", "lengths": [1.0, 1.0] },
        "tasks": [goal("left", -1.0), goal("right", 1.0)],
        "timeline": [{ "until_iteration": 10, "stack": { "order": [["left"], ["right"]] } }],
        "integrator": { "method": "euler", "dt": 0.01 },
        "initial": { "q": [0.0, 0.0] }
    });
    let path = write_doc(dir.path(), "opposed.json", &doc);
    let out = esb(&["run", &path, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 0"));
}

fn classifications(out: &Output) -> Vec<String> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    stdout_json(out)
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|at| at["pairs"].as_array().unwrap().clone())
        .map(|p| p["classification"].as_str().unwrap_or("error").to_string())
        .collect()
}

#[test]
fn classify_reports_relationships() {
    let sim1 = classifications(&esb(&["classify", "sim1_independent", "--format", "json"]));
    assert_eq!(sim1, ["independent"; 3]);

    // straight arm: the end-effector gradients of T1 and T2 are aligned
    let sim2 = classifications(&esb(&["classify", "sim2_dependent", "--q", "0.3,0,0", "--format", "json"]));
    assert!(sim2.iter().any(|c| c == "dependent"), "{sim2:?}");

    let dir = tempfile::tempdir().unwrap();
    let mut doc = builtin_doc("sim1_independent");
    let mut copy = doc["tasks"][0].clone();
    copy["id"] = json!("T1_copy");
    doc["tasks"].as_array_mut().unwrap().push(copy);
    let path = write_doc(dir.path(), "dup.json", &doc);
    let out = esb(&["classify", &path, "--format", "json"]);
    let table = stdout_json(&out);
    let dup = table[0]["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["pair"] == json!(["T1", "T1_copy"]))
        .unwrap();
    assert_eq!(dup["classification"], "dependent");

    let out = esb(&["classify", "sim1_independent", "--q", "1,2"]);
    assert_eq!(out.status.code(), Some(2));
}

fn toy_limit_doc() -> Value {
    json!({
        "name": "toy",
        "chain": { "lengths": [1.0] },
        "tasks": [
            { "id": "lim", "kind": "joint_limits", "params": { "upper": [1.0], "lower": [-1.0] } },
            { "id": "go", "kind": "goal_point", "params": { "selector": { "kind": "joint", "index": 1 }, "target": [2.0] } }
        ],
        "timeline": [{ "until_iteration": 100, "stack": { "order": [["lim"], ["go"]], "mode": "auto" } }],
        "integrator": { "method": "rk4", "dt": 0.001 },
        "initial": { "q": [0.0] },
        "dynamics": { "enabled": true, "u_max": 5.0 }
    })
}

#[test]
fn gamma_select_outcomes() {
    let out = esb(&["gamma-select", "sim5_dynamic"]);
    assert!(out.status.success());
    let r = stdout_json(&out);
    assert!(r["note"].as_str().unwrap().contains("unbounded"));
    assert!(r["gammas"].as_array().unwrap().iter().all(|g| g[1] == r["cap"]));

    let dir = tempfile::tempdir().unwrap();
    let path = write_doc(dir.path(), "toy.json", &toy_limit_doc());
    let r = stdout_json(&esb(&["gamma-select", &path, "--seed", "7"]));
    assert_eq!(r["feasible"], json!(true));
    assert!(r["min_margin"].as_f64().unwrap() >= 0.0);
    let limit_gain = r["gammas"][0][1].as_f64().unwrap();
    assert!(limit_gain < r["cap"].as_f64().unwrap());

    let single = esb(&["gamma-select", &path, "--override", r#"dynamics.gamma_select={"cap":1,"grid_points":1}"#]);
    let r = stdout_json(&single);
    assert_eq!(r["gammas"][0][1], json!(1.0));
    assert_eq!(r["feasible"], json!(true));

    let out = esb(&["gamma-select", "sim1_independent"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_reports_every_criterion() {
    let out = esb(&["verify", "--suite", "fast", "--seed", "1", "--format", "json"]);
    let doc = stdout_json(&out);
    let results = doc["report"]["results"].as_array().unwrap();
    assert_eq!(results.len(), 12);
    let all = results.iter().all(|r| r["passed"] == json!(true));
    assert_eq!(out.status.code(), Some(if all { 0 } else { 4 }));
    for r in results {
        assert!(r["passed"] == json!(true) || r["known_deviation"].is_string(), "{r}");
    }
    assert!(doc["runtime_s"].as_f64().unwrap() > 0.0);
}
