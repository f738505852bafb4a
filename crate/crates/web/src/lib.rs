//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every exported function has a plain Rust twin returning
//! `Result<String, String>` so the logic is testable natively; the bindings
//! only convert errors into JavaScript exceptions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use esb_core::manipulator::{Robot, Selector};
use esb_core::scenario::{builtin, load_scenario, summarize, ScenarioFile, TaskParams, TraceSummary, BUILTINS};
use esb_core::sim::run_scenario;
use esb_core::tasks::{classify_pair, RelationshipReport};
use esb_core::Vector;

/// Upper bound on the frames sent back to the page.
const MAX_FRAMES: usize = 400;

#[derive(Serialize)]
struct Listed {
    id: &'static str,
    description: &'static str,
}

#[derive(Serialize)]
struct Frame {
    iteration: usize,
    t: f64,
    q: Vec<f64>,
    /// Base followed by every link end.
    points: Vec<[f64; 2]>,
    h: Vec<f64>,
}

#[derive(Serialize)]
struct Simulation {
    name: String,
    task_ids: Vec<String>,
    targets: Vec<[f64; 2]>,
    frames: Vec<Frame>,
    summary: TraceSummary,
}

#[derive(Serialize)]
struct Pair {
    pair: (String, String),
    classification: Option<String>,
    angle: Option<f64>,
    error: Option<String>,
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

pub fn list_scenarios() -> Result<String, String> {
    let list: Vec<Listed> = BUILTINS
        .iter()
        .map(|b| Listed {
            id: b.id,
            description: b.description,
        })
        .collect();
    to_json(&list)
}

fn chain_points(robot: &Robot, q: &[f64]) -> Result<Vec<[f64; 2]>, String> {
    let q = Vector::from_column_slice(q);
    match robot {
        Robot::Planar(chain) => {
            let mut pts = vec![[0.0, 0.0]];
            for k in 1..=chain.dof() {
                let p = robot.forward_kinematics(&q, Selector::LinkEnd(k)).map_err(|e| e.to_string())?;
                pts.push([p[0], p[1]]);
            }
            Ok(pts)
        }
        Robot::Cartesian(_) => Ok(vec![[q[0], q.get(1).copied().unwrap_or(0.0)]]),
    }
}

fn goal_targets(file: &ScenarioFile) -> Vec<[f64; 2]> {
    file.tasks
        .iter()
        .filter_map(|t| match &t.params {
            TaskParams::GoalPoint {
                selector: Selector::LinkEnd(_) | Selector::LinkBase(_),
                target,
                ..
            } => Some([target[0], target.get(1).copied().unwrap_or(0.0)]),
            TaskParams::LookAtPoint { target, .. } => Some(*target),
            _ => None,
        })
        .collect()
}

/// Runs a builtin with `key=value` overrides (one per line) and returns a
/// downsampled trace for drawing.
pub fn simulate_scenario(id: &str, overrides: &str) -> Result<String, String> {
    let overrides: Vec<String> = overrides
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let file = load_scenario_builtin(id, &overrides)?;
    let scenario = file.build().map_err(|e| e.to_string())?;
    let trace = run_scenario(&scenario).map_err(|e| e.to_string())?;
    let stride = trace.records.len().div_ceil(MAX_FRAMES).max(1);
    let mut frames = Vec::with_capacity(MAX_FRAMES + 1);
    let last = trace.records.len().saturating_sub(1);
    for (k, r) in trace.records.iter().enumerate() {
        if k % stride == 0 || k == last {
            frames.push(Frame {
                iteration: r.iteration,
                t: r.t,
                q: r.q.clone(),
                points: chain_points(&scenario.robot, &r.q)?,
                h: r.h.clone(),
            });
        }
    }
    to_json(&Simulation {
        name: file.name.clone(),
        task_ids: trace.meta.task_ids.clone(),
        targets: goal_targets(&file),
        frames,
        summary: summarize(&trace, &scenario.tasks),
    })
}

fn load_scenario_builtin(id: &str, overrides: &[String]) -> Result<ScenarioFile, String> {
    if builtin(id).is_none() {
        return Err(format!("no builtin scenario `{id}`"));
    }
    load_scenario(id, overrides).map_err(|e| e.to_string())
}

/// Pairwise relationships of a builtin's tasks at `q` (comma separated).
pub fn classify_tasks(id: &str, q: &str) -> Result<String, String> {
    let file = load_scenario_builtin(id, &[])?;
    let robot = file.robot().map_err(|e| e.to_string())?;
    let tasks = file.build_tasks().map_err(|e| e.to_string())?;
    let values = q
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() != robot.dof() {
        return Err(format!("expected {} joint values, got {}", robot.dof(), values.len()));
    }
    let q = Vector::from_vec(values);
    let mut pairs = Vec::new();
    for i in 0..tasks.len() {
        for j in i + 1..tasks.len() {
            let pair = (tasks[i].id.clone(), tasks[j].id.clone());
            pairs.push(match classify_pair(&tasks[i], &tasks[j], &robot, &q, 0.0, file.diagnostics.rank_tol) {
                Ok(RelationshipReport {
                    classification,
                    gradient_angle,
                    ..
                }) => Pair {
                    pair,
                    classification: Some(format!("{classification:?}").to_lowercase()),
                    angle: Some(gradient_angle),
                    error: None,
                },
                Err(e) => Pair {
                    pair,
                    classification: None,
                    angle: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    to_json(&pairs)
}

#[wasm_bindgen]
pub fn scenarios() -> Result<String, JsValue> {
    list_scenarios().map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn simulate(id: &str, overrides: &str) -> Result<String, JsValue> {
    simulate_scenario(id, overrides).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn classify(id: &str, q: &str) -> Result<String, JsValue> {
    classify_tasks(id, q).map_err(|e| JsValue::from_str(&e))
}
