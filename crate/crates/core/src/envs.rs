//! Benchmark scenarios, rewards, the filtered environment step and baseline
//! rollouts.

use std::f64::consts::FRAC_PI_4;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, rotate_inv, Control, DynamicsError, Order, State, State1, State2, CONTROL_DIM};
use crate::qpdiff::{self, QpError, RectifyContext};
use crate::safety::{barrier, build_constraints, combine_constraints, ClassK, ConstraintSet, ControlBounds, Obstacle};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("unknown scenario {0:?} (expected optimality, stability or feasibility)")]
    UnknownScenario(String),
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("could not sample a start/goal pair outside the obstacles")]
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Optimality,
    Stability,
    Feasibility,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] = [ScenarioName::Optimality, ScenarioName::Stability, ScenarioName::Feasibility];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Optimality => "optimality",
            ScenarioName::Stability => "stability",
            ScenarioName::Feasibility => "feasibility",
        }
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "optimality" => Ok(ScenarioName::Optimality),
            "stability" => Ok(ScenarioName::Stability),
            "feasibility" => Ok(ScenarioName::Feasibility),
            other => Err(EnvError::UnknownScenario(other.to_string())),
        }
    }
}

/// Everything that defines a scenario. Start and goal positions are
/// `offset + U[0, jitter]²` with a fixed heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: ScenarioName,
    pub order: Order,
    pub obstacles: Vec<Obstacle>,
    pub start_offset: [f64; 2],
    pub goal_offset: [f64; 2],
    pub jitter: f64,
    pub heading: f64,
    /// Second-order start speed along the heading.
    pub initial_speed: f64,
    /// Distance penalty.
    pub d: f64,
    /// Velocity penalty, second order only.
    pub b: f64,
    /// Step penalty.
    pub s_pen: f64,
    pub gamma: f64,
    pub bounds: ControlBounds,
    pub dt: f64,
    /// Steps per episode.
    pub steps: usize,
    /// Training episodes.
    pub episodes: usize,
    pub goal_radius: f64,
    /// Inner HOCBF gain, `ψ₁ = ḣ + a1·h`.
    pub a1: f64,
    /// Slope of the linear baseline class-K function.
    pub baseline_alpha: f64,
    /// Gain of the baseline nominal controller `u = −k∇V`.
    pub baseline_gain: f64,
}

pub fn make_scenario(name: ScenarioName) -> ScenarioConfig {
    let obstacle = |cx, cy, r| Obstacle { cx, cy, r };
    let mut cfg = ScenarioConfig {
        name,
        order: Order::First,
        obstacles: vec![obstacle(0.0, 0.0, 0.6)],
        start_offset: [-1.5, -1.5],
        goal_offset: [1.5, 1.5],
        jitter: 0.5,
        heading: FRAC_PI_4,
        initial_speed: 0.0,
        d: 0.6,
        b: 0.1,
        s_pen: 1.0,
        gamma: 0.99,
        bounds: ControlBounds::Box { lower: [-2.0, -2.0, -2.0], upper: [2.0, 2.0, 2.0] },
        dt: 0.02,
        steps: 200,
        episodes: 300,
        goal_radius: 0.1,
        a1: 1.0,
        baseline_alpha: 1.0,
        baseline_gain: 1.0,
    };
    match name {
        ScenarioName::Optimality => {}
        ScenarioName::Stability => {
            cfg.obstacles = vec![obstacle(-0.3, 0.1, 0.55), obstacle(0.1, -0.3, 0.55)];
        }
        ScenarioName::Feasibility => {
            cfg.order = Order::Second;
            // braking distance v²/2u ≈ 0.39 against an obstacle of radius 0.6:
            // a barrier that waits too long cannot stop in time
            cfg.bounds = ControlBounds::Disk { u_max: 0.08, tau_max: 2.0 };
            cfg.initial_speed = 0.25;
        }
    }
    cfg
}

impl FromStr for ScenarioConfig {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(make_scenario(s.parse()?))
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if !(self.d > 0.0) {
            return bad("d must be positive");
        }
        if !(self.s_pen >= 0.0) || !(self.b >= 0.0) {
            return bad("penalties must be nonnegative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.dt > 0.0) || self.steps == 0 {
            return bad("dt and steps must be positive");
        }
        if !(self.initial_speed >= 0.0) {
            return bad("initial_speed must be nonnegative");
        }
        if !(self.goal_radius > 0.0) || !(self.jitter >= 0.0) {
            return bad("goal_radius must be positive and jitter nonnegative");
        }
        if self.obstacles.iter().any(|o| !(o.r > 0.0)) {
            return bad("obstacle radii must be positive");
        }
        match self.bounds {
            ControlBounds::Box { lower, upper } => {
                if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
                    return bad("box bounds need lower < upper");
                }
            }
            ControlBounds::Disk { u_max, tau_max } => {
                if !(u_max > 0.0 && tau_max > 0.0) {
                    return bad("disk bounds must be positive");
                }
            }
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.order.state_dim()
    }
}

/// A start state and goal position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub start: State,
    pub goal: [f64; 2],
}

fn start_state(cfg: &ScenarioConfig, p: [f64; 2]) -> State {
    let theta = cfg.heading;
    match cfg.order {
        Order::First => State::First(State1 { x: p[0], y: p[1], theta }),
        Order::Second => {
            let (s, c) = theta.sin_cos();
            let v = cfg.initial_speed;
            State::Second(State2 { x: p[0], y: p[1], theta, vx: v * c, vy: v * s, omega: 0.0 })
        }
    }
}

/// Draws a start/goal pair, rejecting positions that lie inside an obstacle.
pub fn sample_task<R: Rng + ?Sized>(cfg: &ScenarioConfig, rng: &mut R) -> Result<Task, EnvError> {
    let mut draw = |offset: [f64; 2]| -> Result<[f64; 2], EnvError> {
        for _ in 0..1000 {
            let p = [
                offset[0] + cfg.jitter * rng.random::<f64>(),
                offset[1] + cfg.jitter * rng.random::<f64>(),
            ];
            if !cfg.obstacles.iter().any(|o| o.contains(p)) {
                return Ok(p);
            }
        }
        Err(EnvError::Sampling)
    };
    let start = draw(cfg.start_offset)?;
    let goal = draw(cfg.goal_offset)?;
    Ok(Task { start: start_state(cfg, start), goal })
}

fn sq_dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)
}

/// `R = −d‖p − p_f‖² − s` over position only.
pub fn reward1(state: &State, goal: [f64; 2], cfg: &ScenarioConfig) -> f64 {
    -cfg.d * sq_dist(state.position(), goal) - cfg.s_pen
}

/// `R = −d‖p − p_f‖² − b‖v‖² − s`, the goal velocity being zero.
pub fn reward2(state: &State, goal: [f64; 2], cfg: &ScenarioConfig) -> f64 {
    let [vx, vy] = state.velocity();
    -cfg.d * sq_dist(state.position(), goal) - cfg.b * (vx * vx + vy * vy) - cfg.s_pen
}

pub fn reward(state: &State, goal: [f64; 2], cfg: &ScenarioConfig) -> f64 {
    match cfg.order {
        Order::First => reward1(state, goal, cfg),
        Order::Second => reward2(state, goal, cfg),
    }
}

pub fn reached(state: &State, goal: [f64; 2], cfg: &ScenarioConfig) -> bool {
    sq_dist(state.position(), goal).sqrt() < cfg.goal_radius
}

/// Baseline nominal controller `u = −k∇V`, `V = ‖p − p_f‖²`, expressed in the
/// body frame with zero turning input.
pub fn baseline_nominal(state: &State, goal: [f64; 2], cfg: &ScenarioConfig) -> [f64; CONTROL_DIM] {
    let p = state.position();
    let k = cfg.baseline_gain;
    let world = [-2.0 * k * (p[0] - goal[0]), -2.0 * k * (p[1] - goal[1])];
    let body = rotate_inv(state.heading(), world);
    [body[0], body[1], 0.0]
}

/// Scales `u` toward the origin until it fits the box; the direction of the
/// nominal command is kept, unlike a per-axis clamp.
pub fn scale_into_bounds(u: &[f64; CONTROL_DIM], bounds: &ControlBounds) -> [f64; CONTROL_DIM] {
    let mut c: f64 = 1.0;
    match bounds {
        ControlBounds::Box { lower, upper } => {
            for i in 0..CONTROL_DIM {
                if u[i] > upper[i] {
                    c = c.min(upper[i] / u[i]);
                } else if u[i] < lower[i] {
                    c = c.min(lower[i] / u[i]);
                }
            }
        }
        ControlBounds::Disk { u_max, tau_max } => {
            let n = u[0].hypot(u[1]);
            if n > *u_max {
                c = c.min(u_max / n);
            }
            if u[2].abs() > *tau_max {
                c = c.min(tau_max / u[2].abs());
            }
        }
    }
    let scaled = u.map(|v| v * c.max(0.0));
    project_to_bounds(&scaled, bounds)
}

/// Projection onto the admissible control set (a clamp for box bounds).
pub fn project_to_bounds(u: &[f64; CONTROL_DIM], bounds: &ControlBounds) -> [f64; CONTROL_DIM] {
    if let ControlBounds::Box { lower, upper } = bounds {
        return std::array::from_fn(|i| u[i].clamp(lower[i], upper[i]));
    }
    let (g, h) = combine_constraints(&[], bounds);
    match qpdiff::rectify(u, &g, &h) {
        Ok((z, _)) => [z[0], z[1], z[2]],
        // the bound polytope always contains the origin
        Err(_) => [0.0; CONTROL_DIM],
    }
}

/// Result of passing a nominal action through the CBF filter.
#[derive(Debug, Clone)]
pub struct Filtered {
    pub constraints: ConstraintSet,
    pub rectified: [f64; CONTROL_DIM],
    pub infeasible: bool,
    pub ctx: Option<RectifyContext>,
}

/// Min-norm CBF filter. An infeasible QP falls back to the bound-projected
/// nominal action and is flagged.
pub fn filter_action(
    state: &State,
    nominal: &[f64; CONTROL_DIM],
    kappa: &ClassK,
    cfg: &ScenarioConfig,
) -> Filtered {
    let constraints = build_constraints(state, &cfg.obstacles, kappa, cfg.a1, &cfg.bounds);
    match qpdiff::rectify(nominal, &constraints.g, &constraints.h) {
        Ok((z, ctx)) => Filtered { constraints, rectified: [z[0], z[1], z[2]], infeasible: false, ctx: Some(ctx) },
        Err(QpError::Infeasible(_)) | Err(QpError::IterationLimit) | Err(QpError::Singular(_)) => Filtered {
            constraints,
            rectified: project_to_bounds(nominal, &cfg.bounds),
            infeasible: true,
            ctx: None,
        },
        Err(e) => panic!("filter QP is malformed: {e}"),
    }
}

/// One environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub filtered: Filtered,
    pub next: State,
    pub reward: f64,
    pub reached: bool,
}

pub fn env_step(
    state: &State,
    goal: [f64; 2],
    nominal: &[f64; CONTROL_DIM],
    kappa: &ClassK,
    cfg: &ScenarioConfig,
) -> Result<StepOutcome, EnvError> {
    let filtered = filter_action(state, nominal, kappa, cfg);
    let next = dynamics::step(state, &Control(filtered.rectified), cfg.dt)?;
    let reward = reward(&next, goal, cfg);
    let reached = reached(&next, goal, cfg);
    Ok(StepOutcome { filtered, next, reward, reached })
}

/// Per-episode record. `states` has one more entry than the action and reward
/// series; `h[t]` holds the barrier values of `states[t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub goal: [f64; 2],
    pub states: Vec<Vec<f64>>,
    pub nominal: Vec<[f64; CONTROL_DIM]>,
    pub rectified: Vec<[f64; CONTROL_DIM]>,
    pub rewards: Vec<f64>,
    pub h: Vec<Vec<f64>>,
    pub infeasible: Vec<bool>,
    pub h_min: f64,
    pub violations: usize,
    pub infeasible_steps: usize,
    pub reached: bool,
    pub return_value: f64,
    /// Distance travelled until the goal was reached, or over the whole episode.
    pub path_length: f64,
}

impl EpisodeLog {
    pub fn new(start: &State, goal: [f64; 2], cfg: &ScenarioConfig) -> Self {
        let h0: Vec<f64> = cfg.obstacles.iter().map(|o| barrier(start, o)).collect();
        let h_min = h0.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            goal,
            states: vec![start.to_vec()],
            nominal: Vec::new(),
            rectified: Vec::new(),
            rewards: Vec::new(),
            violations: usize::from(h_min < 0.0),
            h: vec![h0],
            infeasible: Vec::new(),
            h_min,
            infeasible_steps: 0,
            reached: false,
            return_value: 0.0,
            path_length: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn record(&mut self, nominal: [f64; CONTROL_DIM], out: &StepOutcome, cfg: &ScenarioConfig) {
        let t = self.rewards.len();
        let hs: Vec<f64> = cfg.obstacles.iter().map(|o| barrier(&out.next, o)).collect();
        let hm = hs.iter().copied().fold(f64::INFINITY, f64::min);
        self.h_min = self.h_min.min(hm);
        if hm < 0.0 {
            self.violations += 1;
        }
        if out.filtered.infeasible {
            self.infeasible_steps += 1;
        }
        let prev = &self.states[t];
        let next = out.next.position();
        self.path_length += ((next[0] - prev[0]).powi(2) + (next[1] - prev[1]).powi(2)).sqrt();
        self.return_value += cfg.gamma.powi(t as i32) * out.reward;
        self.states.push(out.next.to_vec());
        self.nominal.push(nominal);
        self.rectified.push(out.filtered.rectified);
        self.rewards.push(out.reward);
        self.h.push(hs);
        self.infeasible.push(out.filtered.infeasible);
        self.reached |= out.reached;
    }

    pub fn final_state(&self, cfg: &ScenarioConfig) -> State {
        State::from_slice(cfg.order, self.states.last().expect("nonempty")).expect("consistent")
    }

    /// Trajectory table: one row per step.
    pub fn trajectory_csv(&self, cfg: &ScenarioConfig) -> String {
        let names: &[&str] = match cfg.order {
            Order::First => &["x", "y", "theta"],
            Order::Second => &["x", "y", "theta", "vx", "vy", "omega"],
        };
        let mut out = String::from("t");
        for n in names {
            write!(out, ",{n}").unwrap();
        }
        for k in 0..CONTROL_DIM {
            write!(out, ",u_nom{k}").unwrap();
        }
        for k in 0..CONTROL_DIM {
            write!(out, ",u_safe{k}").unwrap();
        }
        out.push_str(",reward");
        for k in 0..cfg.obstacles.len() {
            write!(out, ",h{k}").unwrap();
        }
        out.push_str(",infeasible\n");
        for t in 0..self.len() {
            write!(out, "{t}").unwrap();
            for v in &self.states[t] {
                write!(out, ",{v}").unwrap();
            }
            for v in self.nominal[t].iter().chain(&self.rectified[t]) {
                write!(out, ",{v}").unwrap();
            }
            write!(out, ",{}", self.rewards[t]).unwrap();
            for v in &self.h[t] {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{}", u8::from(self.infeasible[t])).unwrap();
        }
        out
    }
}

/// Discounted return `Σ γᵗ rₜ`, `t` counted from zero.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum()
}

/// Runs one episode with an arbitrary nominal policy behind the CBF filter.
pub fn rollout_with(
    task: &Task,
    kappa: &ClassK,
    cfg: &ScenarioConfig,
    mut policy: impl FnMut(&State, [f64; 2]) -> [f64; CONTROL_DIM],
) -> Result<EpisodeLog, EnvError> {
    let mut log = EpisodeLog::new(&task.start, task.goal, cfg);
    let mut state = task.start;
    for _ in 0..cfg.steps {
        let nominal = policy(&state, task.goal);
        let out = env_step(&state, task.goal, &nominal, kappa, cfg)?;
        log.record(nominal, &out, cfg);
        state = out.next;
        if out.reached {
            break;
        }
    }
    Ok(log)
}

/// Linear class-K filter over the goal-seeking controller, with the nominal
/// projected onto the control bounds.
pub fn baseline_rollout(task: &Task, cfg: &ScenarioConfig) -> Result<EpisodeLog, EnvError> {
    let kappa = ClassK::Linear { alpha: cfg.baseline_alpha };
    rollout_with(task, &kappa, cfg, |s, goal| scale_into_bounds(&baseline_nominal(s, goal, cfg), &cfg.bounds))
}

/// Per-episode summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub return_value: f64,
    pub h_min: f64,
    pub reached: bool,
    pub violations: usize,
    pub infeasible_steps: usize,
    pub steps: usize,
    pub path_length: f64,
}

impl EpisodeMetrics {
    pub fn from_log(episode: usize, log: &EpisodeLog) -> Self {
        Self {
            episode,
            return_value: log.return_value,
            h_min: log.h_min,
            reached: log.reached,
            violations: log.violations,
            infeasible_steps: log.infeasible_steps,
            steps: log.len(),
            path_length: log.path_length,
        }
    }
}

pub const METRICS_HEADER: &str = "episode,return,h_min,reached,violations,infeasible_steps,steps,path_length";

pub fn metrics_csv(rows: &[EpisodeMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.episode,
            m.return_value,
            m.h_min,
            u8::from(m.reached),
            m.violations,
            m.infeasible_steps,
            m.steps,
            m.path_length
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn at(x: f64, y: f64) -> State {
        State::First(State1 { x, y, theta: 0.0 })
    }

    #[test]
    fn reward_examples() {
        let cfg = make_scenario(ScenarioName::Optimality);
        assert_eq!(reward1(&at(1.0, 1.0), [1.0, 1.0], &cfg), -1.0);
        assert!((reward1(&at(0.0, 1.0), [1.0, 1.0], &cfg) + 1.6).abs() < 1e-15);
        let near = reward1(&at(0.5, 0.0), [0.0, 0.0], &cfg) + 1.0;
        let far = reward1(&at(1.0, 0.0), [0.0, 0.0], &cfg) + 1.0;
        assert!((far - 4.0 * near).abs() < 1e-15);

        let cfg2 = make_scenario(ScenarioName::Feasibility);
        let rest = State::Second(State2 { x: 1.0, y: 1.0, theta: 0.0, vx: 0.0, vy: 0.0, omega: 0.0 });
        assert_eq!(reward2(&rest, [1.0, 1.0], &cfg2), -1.0);
        let moving = State::Second(State2 { x: 1.0, y: 1.0, theta: 0.0, vx: 2.0, vy: 0.0, omega: 0.7 });
        assert!((reward2(&moving, [1.0, 1.0], &cfg2) + 1.4).abs() < 1e-15);
    }

    #[test]
    fn unknown_scenario_is_an_error() {
        assert!(matches!("maze".parse::<ScenarioName>(), Err(EnvError::UnknownScenario(_))));
        for n in ScenarioName::ALL {
            assert_eq!(n.as_str().parse::<ScenarioName>().unwrap(), n);
            make_scenario(n).validate().unwrap();
        }
    }

    #[test]
    fn stability_circles_overlap() {
        let cfg = make_scenario(ScenarioName::Stability);
        let (a, b) = (cfg.obstacles[0], cfg.obstacles[1]);
        assert!(((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt() < a.r + b.r);
    }

    #[test]
    fn empty_scene_reaches_goal_in_a_straight_line() {
        let mut cfg = make_scenario(ScenarioName::Optimality);
        cfg.obstacles.clear();
        let task = sample_task(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let log = baseline_rollout(&task, &cfg).unwrap();
        assert!(log.reached);
        let p0 = task.start.position();
        let straight = ((task.goal[0] - p0[0]).powi(2) + (task.goal[1] - p0[1]).powi(2)).sqrt();
        assert!(log.path_length <= straight + 1e-9);
        assert_eq!(log.violations, 0);
    }

    #[test]
    fn return_matches_recomputation() {
        let cfg = make_scenario(ScenarioName::Optimality);
        let task = sample_task(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let log = baseline_rollout(&task, &cfg).unwrap();
        assert!((log.return_value - discounted_return(&log.rewards, cfg.gamma)).abs() < 1e-12);
        assert_eq!(log.states.len(), log.rewards.len() + 1);
    }
}
