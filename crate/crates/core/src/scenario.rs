//! Scenario files, built-in scenarios and trace output.
//!
//! A scenario file is a JSON document validated against [`ScenarioFile`];
//! unknown fields are rejected and every error carries the JSON pointer of
//! the offending value.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::linalg::RankConvention;
use crate::manipulator::{CartesianRobot, LinkChain, Robot, Selector};
use crate::priority::{
    select_gammas, GammaSampling, GammaSelectionResult, StackMode, StackSpec, SwitchProfile, SwitchSchedule,
    TorqueBound, Weights,
};
use crate::qp::SolverConfig;
use crate::sim::{switch_continuity, ContinuityReport, Integrator, Method, ModelKind, Scenario, Segment, Trace, Tracking};
use crate::tasks::{joint_limit_tasks, ClassK, EsbTask, TaskKind, Trajectory, DEFAULT_RANK_TOL};
use crate::{Error, Result, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    Revolute,
    Cartesian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    #[serde(default = "default_chain_kind")]
    pub kind: ChainKind,
    /// Link lengths (revolute) or one entry per axis (Cartesian).
    pub lengths: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masses: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<[f64; 2]>,
}

fn default_chain_kind() -> ChainKind {
    ChainKind::Revolute
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskParams {
    GoalPoint {
        selector: Selector,
        target: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        velocity: Option<Vec<f64>>,
    },
    /// Expands to `<id>_upper_<i>` and `<id>_lower_<i>`; the group id may be
    /// used in stacks to place all of them on one level.
    JointLimits { upper: Vec<f64>, lower: Vec<f64> },
    Orientation { link: usize, theta_d: f64 },
    LookAtPoint { link: usize, target: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    #[serde(flatten)]
    pub params: TaskParams,
    #[serde(default)]
    pub gamma: ClassK,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_prime: Option<ClassK>,
    /// Defaults to 2 for the torque-controlled model and 1 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_degree: Option<u8>,
    /// Defaults to true for joint limits and false otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safety_critical: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_v: Option<f64>,
}

impl WeightsSpec {
    pub fn resolve(&self) -> Weights {
        let d = Weights::default();
        Weights {
            l_delta: self.l_delta.or(self.l).unwrap_or(d.l_delta),
            l_v: self.l_v.unwrap_or(d.l_v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSpec {
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_u: Option<f64>,
    /// Replace task gains with the result of the offline selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_select: Option<GammaSampling>,
    /// Track the kinematic controller's velocities with a PD torque loop
    /// instead of solving the torque QP.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_tracking: Option<Tracking>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qdot: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default = "default_rank_convention")]
    pub rank_convention: RankConvention,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}
fn default_rank_convention() -> RankConvention {
    RankConvention::Absolute
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            rank_convention: RankConvention::Absolute,
        }
    }
}

fn default_switch() -> SwitchSchedule {
    SwitchSchedule {
        duration_s: 0.0,
        profile: SwitchProfile::Linear,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub chain: ChainSpec,
    pub tasks: Vec<TaskSpec>,
    pub timeline: Vec<Segment>,
    #[serde(default = "default_switch")]
    pub switch: SwitchSchedule,
    pub integrator: Integrator,
    pub initial: InitialSpec,
    #[serde(default = "WeightsSpec::empty")]
    pub weights: WeightsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsSpec>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
}

impl WeightsSpec {
    fn empty() -> Self {
        Self {
            l: None,
            l_delta: None,
            l_v: None,
        }
    }
}

fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

/// `tasks[0].params` → `/tasks/0/params`.
fn path_to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment as S;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            S::Seq { index } => out.push_str(&format!("/{index}")),
            S::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            S::Enum { variant } => out.push_str(&format!("/{variant}")),
            S::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        "/".into()
    } else {
        out
    }
}

impl ScenarioFile {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| schema("/", format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let file: Self = serde_path_to_error::deserialize(value)
            .map_err(|e| schema(path_to_pointer(e.path()), e.inner().to_string()))?;
        file.check()?;
        Ok(file)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario serializes")
    }

    pub fn model(&self) -> ModelKind {
        match &self.dynamics {
            Some(d) if d.enabled && d.velocity_tracking.is_some() => ModelKind::DynamicWithVelocityTracking,
            Some(d) if d.enabled => ModelKind::Dynamic,
            _ => ModelKind::Kinematic,
        }
    }

    /// Structural checks that serde cannot express.
    fn check(&self) -> Result<()> {
        let n = self.chain.lengths.len();
        if n == 0 {
            return Err(schema("/chain/lengths", "at least one link is required"));
        }
        for (field, v) in [("masses", &self.chain.masses), ("friction", &self.chain.friction)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(schema(
                        format!("/chain/{field}"),
                        format!("expected {n} entries, got {}", v.len()),
                    ));
                }
            }
        }
        for (field, v) in [("q", Some(&self.initial.q)), ("qdot", self.initial.qdot.as_ref()), ("tau", self.initial.tau.as_ref())] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(schema(
                        format!("/initial/{field}"),
                        format!("expected {n} entries, got {}", v.len()),
                    ));
                }
            }
        }
        if self.timeline.is_empty() {
            return Err(schema("/timeline", "at least one segment is required"));
        }
        let ids = self.expanded_ids();
        for (s, seg) in self.timeline.iter().enumerate() {
            for (g, group) in seg.stack.order.iter().enumerate() {
                for (i, id) in group.iter().enumerate() {
                    if !ids.iter().any(|(group_id, _)| group_id == id) {
                        return Err(schema(
                            format!("/timeline/{s}/stack/order/{g}/{i}"),
                            format!("unknown task `{id}`"),
                        ));
                    }
                }
            }
        }
        if let Some(d) = &self.dynamics {
            if d.enabled && d.velocity_tracking.is_none() && d.u_max.is_none() {
                return Err(schema("/dynamics/u_max", "required when the torque model is enabled"));
            }
            if d.enabled && self.chain.kind == ChainKind::Cartesian {
                return Err(schema("/dynamics/enabled", "dynamics need a revolute chain"));
            }
        }
        Ok(())
    }

    /// `(group id, expanded ids)` for every task entry.
    fn expanded_ids(&self) -> Vec<(String, Vec<String>)> {
        self.tasks
            .iter()
            .map(|t| match &t.params {
                TaskParams::JointLimits { upper, .. } => (
                    t.id.clone(),
                    (1..=upper.len())
                        .flat_map(|i| [format!("{}_upper_{i}", t.id), format!("{}_lower_{i}", t.id)])
                        .collect(),
                ),
                _ => (t.id.clone(), vec![t.id.clone()]),
            })
            .collect()
    }

    pub fn robot(&self) -> Result<Robot> {
        let c = &self.chain;
        match c.kind {
            ChainKind::Cartesian => Ok(Robot::Cartesian(CartesianRobot { dof: c.lengths.len() })),
            ChainKind::Revolute => {
                let n = c.lengths.len();
                let dynamic = self.model() != ModelKind::Kinematic;
                let friction = c.friction.clone().unwrap_or_else(|| vec![if dynamic { 0.1 } else { 0.0 }; n]);
                LinkChain::new(
                    c.lengths.clone(),
                    c.masses.clone().unwrap_or_else(|| vec![1.0; n]),
                    friction,
                    c.gravity.unwrap_or([0.0, 0.0]),
                )
                .map(Robot::Planar)
                .map_err(|e| schema("/chain", e.to_string()))
            }
        }
    }

    /// Tasks in file order with joint-limit groups expanded.
    pub fn build_tasks(&self) -> Result<Vec<EsbTask>> {
        let default_degree = if self.model() == ModelKind::Dynamic { 2 } else { 1 };
        let mut out = Vec::new();
        for (i, t) in self.tasks.iter().enumerate() {
            let at = |m: String| schema(format!("/tasks/{i}"), m);
            let mut built = match &t.params {
                TaskParams::GoalPoint {
                    selector,
                    target,
                    velocity,
                } => {
                    let traj = match velocity {
                        None => Trajectory::constant(target.clone()),
                        Some(v) => Trajectory::Linear {
                            start: target.clone(),
                            velocity: v.clone(),
                        },
                    };
                    vec![EsbTask {
                        id: t.id.clone(),
                        kind: TaskKind::GoalPoint {
                            selector: *selector,
                            target: traj,
                        },
                        gamma: t.gamma,
                        gamma_prime: None,
                        relative_degree: 1,
                        safety_critical: false,
                    }]
                }
                TaskParams::JointLimits { upper, lower } => {
                    joint_limit_tasks(&t.id, upper, lower, t.gamma).map_err(|e| at(e.to_string()))?
                }
                TaskParams::Orientation { link, theta_d } => {
                    vec![crate::tasks::orientation_task(t.id.clone(), *link, *theta_d, t.gamma)]
                }
                TaskParams::LookAtPoint { link, target } => {
                    vec![crate::tasks::look_at_point_task(t.id.clone(), *link, *target, t.gamma)]
                }
            };
            let is_limit = matches!(t.params, TaskParams::JointLimits { .. });
            for task in &mut built {
                task.gamma_prime = t.gamma_prime;
                task.relative_degree = t.relative_degree.unwrap_or(default_degree);
                task.safety_critical = t.safety_critical.unwrap_or(is_limit);
            }
            out.extend(built);
        }
        Ok(out)
    }

    fn expand_stack(&self, stack: &StackSpec) -> StackSpec {
        let ids = self.expanded_ids();
        StackSpec {
            order: stack
                .order
                .iter()
                .map(|g| {
                    g.iter()
                        .flat_map(|id| {
                            ids.iter()
                                .find(|(gid, _)| gid == id)
                                .map(|(_, e)| e.clone())
                                .unwrap_or_else(|| vec![id.clone()])
                        })
                        .collect()
                })
                .collect(),
            ..stack.clone()
        }
    }

    /// Runs the offline gain selection on the scenario's tasks.
    pub fn gamma_selection(&self, seed: Option<u64>) -> Result<GammaSelectionResult> {
        let d = self
            .dynamics
            .as_ref()
            .filter(|d| d.enabled)
            .ok_or_else(|| schema("/dynamics", "gain selection needs the dynamic model"))?;
        let u_max = d.u_max.ok_or_else(|| schema("/dynamics/u_max", "required for gain selection"))?;
        let robot = self.robot()?;
        let chain = robot.chain().ok_or_else(|| schema("/chain/kind", "gain selection needs a revolute chain"))?;
        let mut sampling = d.gamma_select.clone().unwrap_or_default();
        if let Some(s) = seed {
            sampling.seed = s;
        }
        let mut tasks = self.build_tasks()?;
        for t in &mut tasks {
            t.relative_degree = 2;
        }
        select_gammas(&tasks, chain, u_max, &sampling)
    }

    pub fn build(&self) -> Result<Scenario> {
        let robot = self.robot()?;
        let n = robot.dof();
        let model = self.model();
        let mut tasks = self.build_tasks()?;
        if let Some(d) = self.dynamics.as_ref().filter(|d| d.enabled && d.gamma_select.is_some()) {
            let sel = self.gamma_selection(None)?;
            if !sel.feasible {
                return Err(schema("/dynamics/gamma_select", sel.note.unwrap_or_else(|| "no feasible gains".into())));
            }
            for (id, g) in &sel.gammas {
                if let Some(t) = tasks.iter_mut().find(|t| &t.id == id) {
                    t.gamma = t.gamma.with_gain(*g);
                    t.gamma_prime = Some(t.gamma_prime().with_gain(*g));
                }
            }
            let _ = d;
        }
        let dyn_spec = self.dynamics.as_ref().filter(|d| d.enabled);
        let sc = Scenario {
            name: self.name.clone(),
            robot,
            model,
            tasks,
            timeline: self
                .timeline
                .iter()
                .map(|s| Segment {
                    until_iteration: s.until_iteration,
                    stack: self.expand_stack(&s.stack),
                })
                .collect(),
            switch: self.switch,
            integrator: self.integrator,
            q0: Vector::from_vec(self.initial.q.clone()),
            qdot0: self.initial.qdot.clone().map_or_else(|| Vector::zeros(n), Vector::from_vec),
            tau0: self.initial.tau.clone().map_or_else(|| Vector::zeros(n), Vector::from_vec),
            weights: self.weights.resolve(),
            torque_bound: dyn_spec.and_then(|d| {
                d.u_max.map(|u_max| TorqueBound {
                    u_max,
                    gamma_u: d.gamma_u.unwrap_or(10.0),
                })
            }),
            tracking: dyn_spec.and_then(|d| d.velocity_tracking).unwrap_or_default(),
            rank_tol: self.diagnostics.rank_tol,
            rank_convention: self.diagnostics.rank_convention,
            solver: SolverConfig::default(),
        };
        sc.validate().map_err(|e| match e {
            Error::Scenario(m) => schema("/", m),
            other => other,
        })?;
        Ok(sc)
    }
}

/// Applies `key=value` overrides (dotted paths, numeric segments index
/// arrays) to a scenario document. Values are parsed as JSON, falling back to
/// a plain string.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| schema("/", format!("override `{ov}` is not of the form key=value")))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut *doc;
        let mut pointer = String::new();
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            pointer.push('/');
            pointer.push_str(part);
            cur = match cur {
                Value::Object(map) => {
                    if last {
                        map.insert(part.to_string(), value.clone());
                        break;
                    }
                    map.get_mut(*part)
                        .ok_or_else(|| schema(pointer.clone(), "override path does not exist"))?
                }
                Value::Array(arr) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| schema(pointer.clone(), "array index expected"))?;
                    let slot = arr
                        .get_mut(idx)
                        .ok_or_else(|| schema(pointer.clone(), "array index out of range"))?;
                    if last {
                        *slot = value.clone();
                        break;
                    }
                    slot
                }
                _ => return Err(schema(pointer, "override path runs through a scalar")),
            };
        }
    }
    Ok(())
}

pub struct BuiltinInfo {
    pub id: &'static str,
    pub description: &'static str,
}

pub const BUILTINS: [BuiltinInfo; 6] = [
    BuiltinInfo {
        id: "sim1_independent",
        description: "three independent link-endpoint goals, fixed stack",
    },
    BuiltinInfo {
        id: "sim2_dependent",
        description: "three end-effector goals, relaxed stack T1 < T2 < T3",
    },
    BuiltinInfo {
        id: "sim3_switching",
        description: "end-effector goals with stacks changing at iterations 3333 and 6666",
    },
    BuiltinInfo {
        id: "sim4_insert_remove",
        description: "joint limits, position and orientation; look-at-point replaces orientation over [250, 300]",
    },
    BuiltinInfo {
        id: "sim5_dynamic",
        description: "torque-controlled goals swapped halfway, u_max = 60 Nm via an integral barrier",
    },
    BuiltinInfo {
        id: "ex5_rank_loss",
        description: "Cartesian robot with two opposite goals, rank monitor near x = -1",
    },
];

fn goal(id: &str, link: usize, target: [f64; 2], gain: f64) -> TaskSpec {
    TaskSpec {
        id: id.into(),
        params: TaskParams::GoalPoint {
            selector: Selector::LinkEnd(link),
            target: target.to_vec(),
            velocity: None,
        },
        gamma: ClassK::linear(gain),
        gamma_prime: None,
        relative_degree: None,
        safety_critical: None,
    }
}

fn stack(ids: &[&str], mode: StackMode) -> StackSpec {
    StackSpec::chain(ids, 1e3, mode)
}

fn seg(until: usize, ids: &[&str], mode: StackMode) -> Segment {
    Segment {
        until_iteration: until,
        stack: stack(ids, mode),
    }
}

fn planar3() -> ChainSpec {
    ChainSpec {
        kind: ChainKind::Revolute,
        lengths: vec![0.5; 3],
        masses: None,
        friction: None,
        gravity: None,
    }
}

fn kinematic_file(name: &str, description: &str, tasks: Vec<TaskSpec>, timeline: Vec<Segment>, q0: [f64; 3], dt: f64) -> ScenarioFile {
    ScenarioFile {
        name: name.into(),
        description: description.into(),
        chain: planar3(),
        tasks,
        timeline,
        switch: default_switch(),
        integrator: Integrator {
            method: Method::Euler,
            dt,
        },
        initial: InitialSpec {
            q: q0.to_vec(),
            qdot: None,
            tau: None,
        },
        weights: WeightsSpec::empty(),
        dynamics: None,
        diagnostics: DiagnosticsSpec::default(),
    }
}

const DEPENDENT_TARGETS: [[f64; 2]; 3] = [[0.5, 1.0], [-0.2, -1.2], [-0.25, 0.0]];

fn dependent_goals(gain: f64) -> Vec<TaskSpec> {
    DEPENDENT_TARGETS
        .iter()
        .enumerate()
        .map(|(i, t)| goal(&format!("T{}", i + 1), 3, *t, gain))
        .collect()
}

pub fn builtin(id: &str) -> Option<ScenarioFile> {
    use StackMode::{Auto, Fixed};
    let desc = BUILTINS.iter().find(|b| b.id == id)?.description;
    Some(match id {
        "sim1_independent" => kinematic_file(
            id,
            desc,
            // only link 3 reaches [0.5, 1] and only link 1 can stop at [0, 0.5]
            vec![
                goal("T1", 3, [0.5, 1.0], 1.0),
                goal("T2", 2, [0.5, 0.5], 1.0),
                goal("T3", 1, [0.0, 0.5], 1.0),
            ],
            vec![seg(10_000, &["T1", "T2", "T3"], Fixed)],
            [0.5, -0.5, 0.5],
            0.01,
        ),
        "sim2_dependent" => kinematic_file(
            id,
            desc,
            dependent_goals(2.0),
            vec![seg(10_000, &["T1", "T2", "T3"], Auto)],
            [0.5, -0.5, 0.5],
            1e-3,
        ),
        "sim3_switching" => {
            let mut f = kinematic_file(
                id,
                desc,
                dependent_goals(2.0),
                vec![
                    seg(3333, &["T1", "T2", "T3"], Auto),
                    seg(6666, &["T2", "T3", "T1"], Auto),
                    seg(10_000, &["T3", "T1", "T2"], Auto),
                ],
                [0.5, -0.5, 0.5],
                1e-3,
            );
            f.switch.duration_s = 1.0;
            f
        }
        "sim4_insert_remove" => {
            use std::f64::consts::PI;
            let limits = TaskSpec {
                id: "limits".into(),
                params: TaskParams::JointLimits {
                    upper: vec![PI, 2.0 * PI / 3.0, 2.0 * PI / 3.0],
                    lower: vec![-PI, -2.0 * PI / 3.0, -2.0 * PI / 3.0],
                },
                gamma: ClassK::linear(1.0),
                gamma_prime: None,
                relative_degree: None,
                safety_critical: None,
            };
            let orientation = TaskSpec {
                id: "orientation".into(),
                params: TaskParams::Orientation { link: 3, theta_d: PI / 6.0 },
                ..goal("orientation", 3, [0.0, 0.0], 1.0)
            };
            let look = TaskSpec {
                id: "look_at".into(),
                params: TaskParams::LookAtPoint {
                    link: 3,
                    target: [1.0, 0.5],
                },
                ..goal("look_at", 3, [0.0, 0.0], 1.0)
            };
            let mut f = kinematic_file(
                id,
                desc,
                vec![limits, goal("position", 3, [0.25, 0.75], 1.0), orientation, look],
                vec![
                    seg(250, &["limits", "position", "orientation"], Auto),
                    seg(1500, &["limits", "position", "look_at"], Auto),
                ],
                [0.0, 1.8, 1.8],
                0.01,
            );
            f.switch.duration_s = 0.5;
            f
        }
        "sim5_dynamic" => {
            let mut f = kinematic_file(
                id,
                desc,
                vec![goal("T1", 3, [0.5, 0.8], 5.0), goal("T2", 3, [0.5, -0.8], 5.0)],
                vec![seg(3000, &["T1", "T2"], Auto), seg(6000, &["T2", "T1"], Auto)],
                [0.5, -0.5, 0.5],
                1e-3,
            );
            f.integrator.method = Method::Rk4;
            f.switch.duration_s = 0.5;
            // damps the self-motion of the redundant arm
            f.chain.friction = Some(vec![3.0; 3]);
            f.dynamics = Some(DynamicsSpec {
                enabled: true,
                u_max: Some(60.0),
                gamma_u: Some(10.0),
                gamma_select: None,
                velocity_tracking: None,
            });
            f
        }
        "ex5_rank_loss" => ScenarioFile {
            name: id.into(),
            description: desc.into(),
            chain: ChainSpec {
                kind: ChainKind::Cartesian,
                lengths: vec![1.0, 1.0],
                masses: None,
                friction: None,
                gravity: None,
            },
            tasks: vec![goal("T1", 1, [-1.0, 0.0], 1.0), goal("T2", 1, [1.0, 0.0], 1.0)],
            timeline: vec![seg(45_000, &["T1", "T2"], Fixed)],
            switch: default_switch(),
            // the loop gain across the x axis near x* is about 5e4, so larger steps chatter
            integrator: Integrator {
                method: Method::Euler,
                dt: 2e-5,
            },
            initial: InitialSpec {
                q: vec![-2.0, 0.0],
                qdot: None,
                tau: None,
            },
            weights: WeightsSpec::empty(),
            dynamics: None,
            diagnostics: DiagnosticsSpec::default(),
        },
        _ => return None,
    })
}

/// Reads a scenario from a builtin id or a file path, applying overrides.
pub fn load_scenario(source: &str, overrides: &[String]) -> Result<ScenarioFile> {
    let mut doc = match builtin(source) {
        Some(f) => f.to_value(),
        None => {
            let text = std::fs::read_to_string(source)
                .map_err(|e| schema("/", format!("cannot read scenario `{source}`: {e}")))?;
            serde_json::from_str(&text).map_err(|e| schema("/", format!("invalid JSON: {e}")))?
        }
    };
    apply_overrides(&mut doc, overrides)?;
    ScenarioFile::from_value(doc)
}

/// CSV column names for a trace.
pub fn trace_csv_header(trace: &Trace) -> Vec<String> {
    let m = &trace.meta;
    let first = trace.records.first();
    let has_tau = first.is_some_and(|r| r.tau.is_some());
    let has_hp = first.is_some_and(|r| r.h_prime.is_some());
    let has_hu = first.is_some_and(|r| r.h_u.is_some());
    let mut h = vec!["t".to_string(), "iter".into(), "segment".into(), "s".into()];
    let n = m.dof;
    h.extend((1..=n).map(|i| format!("q{i}")));
    h.extend((1..=n).map(|i| format!("qd{i}")));
    h.extend((1..=n).map(|i| format!("u{i}")));
    if has_tau {
        h.extend((1..=n).map(|i| format!("tau{i}")));
    }
    h.extend(m.task_ids.iter().map(|id| format!("h_{id}")));
    if has_hp {
        h.extend(m.task_ids.iter().map(|id| format!("hprime_{id}")));
    }
    if has_hu {
        h.push("h_u".into());
    }
    h.extend(m.task_ids.iter().map(|id| format!("delta_{id}")));
    h.extend((1..=m.n_v).map(|i| format!("v_{i}")));
    h.extend((1..=m.n_v).map(|i| format!("z_{i}")));
    h.extend(["V_gamma", "V_z", "rank", "rank_drop", "active_set", "du_inf"].map(String::from));
    h
}

fn num(x: f64) -> String {
    // shortest round-trip representation, never locale dependent
    format!("{x:?}")
}

pub fn write_trace_csv<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let header = trace_csv_header(trace);
    let io = |e: csv::Error| Error::Scenario(format!("writing CSV: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header).map_err(io)?;
    for r in &trace.records {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(num(r.t));
        row.push(r.iteration.to_string());
        row.push(r.segment.to_string());
        row.push(num(r.s));
        row.extend(r.q.iter().chain(&r.qdot).chain(&r.u).map(|x| num(*x)));
        if let Some(t) = &r.tau {
            row.extend(t.iter().map(|x| num(*x)));
        }
        row.extend(r.h.iter().map(|x| num(*x)));
        if let Some(hp) = &r.h_prime {
            row.extend(hp.iter().map(|x| num(*x)));
        }
        if let Some(hu) = r.h_u {
            row.push(num(hu));
        }
        row.extend(r.delta.iter().chain(&r.v).map(|x| num(*x)));
        row.extend((0..trace.meta.n_v).map(|i| r.z.get(i).map_or(String::new(), |x| num(*x))));
        row.push(num(r.v_gamma));
        row.push(num(r.v_z));
        row.push(r.rank.to_string());
        row.push(u8::from(r.rank_drop).to_string());
        row.push(r.active_set.join(";"));
        row.push(num(r.du_inf));
        debug_assert_eq!(row.len(), header.len());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Scenario(format!("writing CSV: {e}")))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowContinuity {
    pub start: usize,
    pub end: usize,
    #[serde(flatten)]
    pub report: ContinuityReport,
}

/// Every number the acceptance checks read from a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub scenario: String,
    pub iterations: usize,
    pub dt: f64,
    pub final_h: Vec<(String, f64)>,
    pub final_h_prime: Option<Vec<(String, f64)>>,
    /// `h` of every task at the last iteration of each segment.
    pub segment_end_h: Vec<Vec<(String, f64)>>,
    pub final_v_norm2: f64,
    pub final_v_z: f64,
    pub final_v_gamma: f64,
    pub max_v_gamma_increase: f64,
    pub min_safety_h: Option<f64>,
    pub max_torque_inf: Option<f64>,
    pub min_h_u: Option<f64>,
    pub max_du_inf: f64,
    pub rank_drop_iterations: Vec<usize>,
    pub continuity: Vec<WindowContinuity>,
}

pub fn summarize(trace: &Trace, tasks: &[EsbTask]) -> TraceSummary {
    let ids = &trace.meta.task_ids;
    let named = |v: &[f64]| ids.iter().cloned().zip(v.iter().copied()).collect::<Vec<_>>();
    let last = trace.records.last();
    let safety: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].safety_critical).collect();
    let min_safety_h = (!safety.is_empty()).then(|| {
        trace
            .records
            .iter()
            .flat_map(|r| safety.iter().map(|&i| r.h[i]))
            .fold(f64::INFINITY, f64::min)
    });
    TraceSummary {
        scenario: trace.meta.name.clone(),
        iterations: trace.records.len(),
        dt: trace.meta.dt,
        final_h: last.map_or_else(Vec::new, |r| named(&r.h)),
        final_h_prime: last.and_then(|r| r.h_prime.as_ref().map(|hp| named(hp))),
        segment_end_h: trace
            .meta
            .segment_ends
            .iter()
            .filter_map(|&e| trace.records.get(e.saturating_sub(1)).map(|r| named(&r.h)))
            .collect(),
        final_v_norm2: last.map_or(0.0, |r| r.v.iter().map(|x| x * x).sum()),
        final_v_z: last.map_or(0.0, |r| r.v_z),
        final_v_gamma: last.map_or(0.0, |r| r.v_gamma),
        max_v_gamma_increase: trace
            .records
            .windows(2)
            .map(|w| w[1].v_gamma - w[0].v_gamma)
            .fold(0.0, f64::max),
        min_safety_h,
        max_torque_inf: trace.records.first().and_then(|r| r.tau.as_ref()).map(|_| {
            trace
                .records
                .iter()
                .filter_map(|r| r.tau.as_ref())
                .flat_map(|t| t.iter().map(|x| x.abs()))
                .fold(0.0, f64::max)
        }),
        min_h_u: trace
            .records
            .iter()
            .filter_map(|r| r.h_u)
            .reduce(f64::min),
        max_du_inf: trace.records.iter().map(|r| r.du_inf).fold(0.0, f64::max),
        rank_drop_iterations: trace.records.iter().filter(|r| r.rank_drop).map(|r| r.iteration).collect(),
        continuity: trace
            .meta
            .windows
            .iter()
            .map(|w| WindowContinuity {
                start: w.start,
                end: w.end,
                report: switch_continuity(trace, w),
            })
            .collect(),
    }
}
