//! DDPG whose actor and class-K network are trained through the
//! differentiable CBF filter.
//!
//! The critic sees the executed (rectified) action. The actor objective is
//! `E[Q(s, rectify(μ(s)))]`; its gradient reaches the actor through
//! `∂u_safe/∂u_nominal` and the class-K network through `∂u_safe/∂h`, since
//! `κ(ψ)` enters the right-hand side of each CBF row.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{self, Control, Order, State, CONTROL_DIM};
use crate::envs::{
    self, filter_action, sample_task, EnvError, EpisodeLog, EpisodeMetrics, Filtered, ScenarioConfig, StepOutcome, Task,
};
use crate::numkit::nn::{soft_update, Activation, Adam, Mlp};
use crate::numkit::{Matrix, NumError, Tape};
use crate::qpdiff;
use crate::safety::{barrier, build_constraints, ClassK, KappaNet};

pub const CHECKPOINT_FORMAT: &str = "amcbf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
/// `tanh(2.5) ≈ 0.987`: beyond this the actor output is saturated.
pub const PREACT_WALL: f64 = 2.5;
/// Distance below which the goal-direction feature shrinks toward zero.
pub const GOAL_SOFTENING: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RlError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at episode {episode}, step {step}")]
    NonFinite { episode: usize, step: usize, what: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Learner hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub kappa_hidden: Vec<usize>,
    /// Linear bypass slope of the class-K network.
    pub lambda0: f64,
    /// `κ'(0)` at initialization.
    pub kappa_init_slope: f64,
    pub batch_size: usize,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub kappa_lr: f64,
    pub tau: f64,
    /// Exploration noise as a fraction of the action half-range, annealed
    /// linearly over the episodes.
    pub noise_start: f64,
    pub noise_end: f64,
    pub buffer_capacity: usize,
    /// Weight of the penalty on pre-tanh actor outputs beyond `±PREACT_WALL`,
    /// relative to the actor objective measured in units of `critic_scale`.
    pub actor_preact_penalty: f64,
    /// Upper bound kept on the global slope of `κ` after every update.
    pub kappa_max_slope: Option<f64>,
    /// Upper clip on the bootstrapped `Q′` in TD targets. Every reward is at
    /// most `−s_pen`, so `0` never cuts off a reachable value.
    pub value_ceiling: Option<f64>,
    /// Fixed multiplier on the critic output, so the network works at unit scale.
    pub critic_scale: f64,
    pub learn_kappa: bool,
    /// Subtracted from the stored training reward on steps where the filter
    /// was infeasible or the next state violates a barrier. Logged returns
    /// never include it.
    pub safety_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![128, 64],
            critic_hidden: vec![128, 64],
            kappa_hidden: vec![7, 7],
            lambda0: 0.01,
            kappa_init_slope: 1.0,
            batch_size: 64,
            critic_lr: 0.001,
            actor_lr: 0.001,
            kappa_lr: 0.001,
            tau: 0.005,
            noise_start: 0.3,
            noise_end: 0.05,
            buffer_capacity: 100_000,
            actor_preact_penalty: 0.1,
            kappa_max_slope: Some(25.0),
            value_ceiling: Some(0.0),
            critic_scale: 100.0,
            learn_kappa: true,
            safety_penalty: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch_size and buffer_capacity must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if [self.critic_lr, self.actor_lr, self.kappa_lr].iter().any(|v| !(*v >= 0.0)) {
            return bad("learning rates must be nonnegative");
        }
        if !(self.noise_start >= 0.0 && self.noise_end >= 0.0) {
            return bad("noise scales must be nonnegative");
        }
        if !(self.lambda0 > 0.0) || !(self.critic_scale > 0.0) {
            return bad("lambda0 and critic_scale must be positive");
        }
        if !(self.actor_preact_penalty >= 0.0) || !(self.safety_penalty >= 0.0) {
            return bad("penalties must be nonnegative");
        }
        if let Some(m) = self.kappa_max_slope {
            if !(m > self.lambda0) {
                return bad("kappa_max_slope must exceed lambda0");
            }
        }
        if self.actor_hidden.is_empty() || self.critic_hidden.is_empty() || self.kappa_hidden.is_empty() {
            return bad("networks need at least one hidden layer");
        }
        Ok(())
    }
}

/// SHA-256 of the canonical JSON encoding of both configs.
pub fn config_hash(scenario: &ScenarioConfig, config: &TrainConfig) -> String {
    let text = serde_json::to_string(&(scenario, config)).expect("configs serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn feature_dim(order: Order) -> usize {
    match order {
        Order::First => 10,
        Order::Second => 13,
    }
}

/// Network input: position, heading as (cos, sin), velocities for the
/// second-order car, the offset to the goal in the world and body frames,
/// and the body-frame goal direction saturated at `GOAL_SOFTENING`.
pub fn features(state: &State, goal: [f64; 2]) -> Vec<f64> {
    let [x, y] = state.position();
    let (s, c) = state.heading().sin_cos();
    let mut f = vec![x, y, c, s];
    if let State::Second(st) = state {
        f.extend([st.vx, st.vy, st.omega]);
    }
    let (dx, dy) = (goal[0] - x, goal[1] - y);
    let (bx, by) = (c * dx + s * dy, -s * dx + c * dy);
    let n = (dx * dx + dy * dy + GOAL_SOFTENING * GOAL_SOFTENING).sqrt();
    f.extend([-dx, -dy, bx, by, bx / n, by / n]);
    f
}

/// Replay record. `s` and `s_next` are the raw state followed by the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a_nominal: [f64; CONTROL_DIM],
    pub a_rectified: [f64; CONTROL_DIM],
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub infeasible: bool,
}

fn pack(state: &State, goal: [f64; 2]) -> Vec<f64> {
    let mut v = state.to_vec();
    v.extend(goal);
    v
}

fn unpack(order: Order, s: &[f64]) -> (State, [f64; 2]) {
    let n = order.state_dim();
    let state = State::from_slice(order, &s[..n]).expect("stored state has the scenario dimension");
    (state, [s[n], s[n + 1]])
}

/// FIFO ring buffer.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    records: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, records: Vec::new(), head: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.records.len() < self.capacity {
            self.records.push(t);
        } else {
            self.records[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Records from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.records.split_at(self.head);
        older.iter().chain(newer)
    }

    /// Uniform draw of `min(n, len)` distinct records.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<&Transition> {
        let k = n.min(self.records.len());
        index::sample(rng, self.records.len(), k).into_iter().map(|i| &self.records[i]).collect()
    }
}

/// Affine map between the tanh range and the control hull.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionScale {
    pub center: [f64; CONTROL_DIM],
    pub half: [f64; CONTROL_DIM],
}

impl ActionScale {
    pub fn from_hull(lower: [f64; CONTROL_DIM], upper: [f64; CONTROL_DIM]) -> Self {
        Self {
            center: std::array::from_fn(|i| 0.5 * (lower[i] + upper[i])),
            half: std::array::from_fn(|i| 0.5 * (upper[i] - lower[i])),
        }
    }

    pub fn to_action(&self, t: &[f64]) -> [f64; CONTROL_DIM] {
        std::array::from_fn(|i| self.center[i] + self.half[i] * t[i])
    }

    pub fn normalize(&self, u: &[f64; CONTROL_DIM]) -> [f64; CONTROL_DIM] {
        std::array::from_fn(|i| (u[i] - self.center[i]) / self.half[i])
    }

    pub fn clamp(&self, u: &[f64; CONTROL_DIM]) -> [f64; CONTROL_DIM] {
        std::array::from_fn(|i| u[i].clamp(self.center[i] - self.half[i], self.center[i] + self.half[i]))
    }
}

/// Actor, critic, their targets, the class-K network and the optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub order: Order,
    pub scale: ActionScale,
    pub critic_scale: f64,
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub kappa: KappaNet,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub kappa_opt: Adam,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(scenario: &ScenarioConfig, config: &TrainConfig, rng: &mut R) -> Result<Self, RlError> {
        let fd = feature_dim(scenario.order);
        // tanh is applied outside the network so the pre-activation stays reachable
        let actor =
            Mlp::new(&sizes(fd, &config.actor_hidden, CONTROL_DIM), Activation::Relu, Activation::Identity, 3e-3, rng);
        let critic = Mlp::new(
            &sizes(fd + CONTROL_DIM, &config.critic_hidden, 1),
            Activation::Relu,
            Activation::Identity,
            3e-3,
            rng,
        );
        let kappa = KappaNet::new(&config.kappa_hidden, config.lambda0, config.kappa_init_slope, rng)
            .map_err(|e| RlError::Config(e.to_string()))?;
        let (lower, upper) = scenario.bounds.hull();
        Ok(Self {
            order: scenario.order,
            scale: ActionScale::from_hull(lower, upper),
            critic_scale: config.critic_scale,
            actor_opt: Adam::for_params(config.actor_lr, &actor.params()),
            critic_opt: Adam::for_params(config.critic_lr, &critic.params()),
            kappa_opt: Adam::for_params(config.kappa_lr, &kappa.params()),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            kappa,
        })
    }

    pub fn class_k(&self) -> ClassK {
        ClassK::Learned(self.kappa.clone())
    }

    /// Deterministic nominal action `μ(s)`.
    pub fn policy(&self, state: &State, goal: [f64; 2]) -> [f64; CONTROL_DIM] {
        let x = Matrix::row(&features(state, goal));
        let pre = self.actor.forward(&x).expect("actor input has the feature dimension");
        self.scale.to_action(&squash(pre.as_slice()))
    }

    /// `μ(s) + ε`, `ε ~ N(0, (σ·half)²)` per channel, clipped to the control hull.
    pub fn explore<R: Rng + ?Sized>(
        &self,
        state: &State,
        goal: [f64; 2],
        noise_scale: f64,
        rng: &mut R,
    ) -> [f64; CONTROL_DIM] {
        let mu = self.policy(state, goal);
        let noisy: [f64; CONTROL_DIM] = std::array::from_fn(|i| {
            let e: f64 = rng.sample(StandardNormal);
            mu[i] + noise_scale * self.scale.half[i] * e
        });
        self.scale.clamp(&noisy)
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite()
            && self.critic.is_finite()
            && self.actor_target.is_finite()
            && self.critic_target.is_finite()
            && self.kappa.is_finite()
    }
}

/// Nominal action with exploration noise and its filtered counterpart.
pub fn act<R: Rng + ?Sized>(
    agent: &Agent,
    scenario: &ScenarioConfig,
    state: &State,
    goal: [f64; 2],
    noise_scale: f64,
    rng: &mut R,
) -> ([f64; CONTROL_DIM], Filtered) {
    let nominal = agent.explore(state, goal, noise_scale, rng);
    let filtered = filter_action(state, &nominal, &agent.class_k(), scenario);
    (nominal, filtered)
}

fn squash(pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|v| v.tanh()).collect()
}

fn critic_input(scale: &ActionScale, feats: &[Vec<f64>], actions: &[[f64; CONTROL_DIM]]) -> Matrix {
    let rows: Vec<Vec<f64>> = feats
        .iter()
        .zip(actions)
        .map(|(f, a)| {
            let mut r = f.clone();
            r.extend(scale.normalize(a));
            r
        })
        .collect();
    Matrix::from_rows(&rows).expect("uniform rows")
}

/// Mean squared TD error `mean((Q(x) − y)²)` and its parameter gradients.
pub fn critic_loss(critic: &Mlp, critic_scale: f64, x: &Matrix, y: &[f64]) -> Result<(f64, Vec<Matrix>), NumError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let trace = critic.forward_tape(&mut tape, xv)?;
    let q = tape.scale(trace.output, critic_scale);
    let yv = tape.constant(Matrix::column(y));
    let diff = tape.sub(q, yv)?;
    let ss = tape.sum_squares(diff);
    let loss = tape.scale(ss, 1.0 / y.len() as f64);
    let value = tape.value(loss).as_slice()[0];
    let grads = tape.backward(loss)?;
    Ok((value, critic.param_grads(&grads, &trace)))
}

/// Q-values of `critic` scaled to return units, one per row of `x`.
pub fn critic_values(critic: &Mlp, critic_scale: f64, x: &Matrix) -> Result<Vec<f64>, NumError> {
    Ok(critic.forward(x)?.as_slice().iter().map(|v| v * critic_scale).collect())
}

/// TD targets `y = r + γ(1 − done)·Q′(s′, rectify(μ′(s′)))`, with `Q′`
/// optionally clipped from above.
pub fn td_targets(
    agent: &Agent,
    scenario: &ScenarioConfig,
    batch: &[&Transition],
    value_ceiling: Option<f64>,
) -> Result<Vec<f64>, NumError> {
    let order = agent.order;
    let next: Vec<(State, [f64; 2])> = batch.iter().map(|t| unpack(order, &t.s_next)).collect();
    let feats: Vec<Vec<f64>> = next.iter().map(|(s, g)| features(s, *g)).collect();
    let mu = agent.actor_target.forward(&Matrix::from_rows(&feats)?)?;
    let kappa = agent.class_k();
    let actions: Vec<[f64; CONTROL_DIM]> = next
        .iter()
        .enumerate()
        .map(|(i, (s, _))| {
            let u = agent.scale.to_action(&squash(mu.row_slice(i)));
            filter_action(s, &u, &kappa, scenario).rectified
        })
        .collect();
    let q_next = critic_values(&agent.critic_target, agent.critic_scale, &critic_input(&agent.scale, &feats, &actions))?;
    Ok(batch
        .iter()
        .zip(q_next)
        .map(|(t, q)| {
            let q = value_ceiling.map_or(q, |c| q.min(c));
            if t.done {
                t.r
            } else {
                t.r + scenario.gamma * q
            }
        })
        .collect())
}

/// One Adam step on the critic. Returns the loss before the step.
pub fn critic_update(
    agent: &mut Agent,
    scenario: &ScenarioConfig,
    batch: &[&Transition],
    value_ceiling: Option<f64>,
) -> Result<f64, NumError> {
    let y = td_targets(agent, scenario, batch, value_ceiling)?;
    let feats: Vec<Vec<f64>> = batch
        .iter()
        .map(|t| {
            let (s, g) = unpack(agent.order, &t.s);
            features(&s, g)
        })
        .collect();
    // the critic is only ever fit to executed actions
    let actions: Vec<[f64; CONTROL_DIM]> = batch.iter().map(|t| t.a_rectified).collect();
    let x = critic_input(&agent.scale, &feats, &actions);
    let (loss, grads) = critic_loss(&agent.critic, agent.critic_scale, &x, &y)?;
    agent.critic_opt.descend(&mut agent.critic.params_mut(), &grads);
    Ok(loss)
}

/// Counters from one actor/κ update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub used: usize,
    pub skipped_infeasible: usize,
    pub skipped_degenerate: usize,
    pub approximate: usize,
    pub kappa_rows: usize,
}

impl UpdateStats {
    fn add(&mut self, o: &UpdateStats) {
        self.used += o.used;
        self.skipped_infeasible += o.skipped_infeasible;
        self.skipped_degenerate += o.skipped_degenerate;
        self.approximate += o.approximate;
        self.kappa_rows += o.kappa_rows;
    }
}

/// Gradients of `−mean Q(s, rectify(μ(s))) / critic_scale` plus the
/// pre-activation penalty, with respect to the actor and class-K parameters.
/// `mean_q` is over the samples used.
#[derive(Debug, Clone)]
pub struct PolicyGradients {
    pub actor: Vec<Matrix>,
    pub kappa: Vec<Matrix>,
    pub mean_q: f64,
    pub stats: UpdateStats,
}

pub fn policy_gradients(
    agent: &Agent,
    scenario: &ScenarioConfig,
    states: &[(State, [f64; 2])],
    preact_penalty: f64,
) -> Result<PolicyGradients, NumError> {
    let n = states.len();
    let feats: Vec<Vec<f64>> = states.iter().map(|(s, g)| features(s, *g)).collect();
    let mut actor_tape = Tape::new();
    let fv = actor_tape.constant(Matrix::from_rows(&feats)?);
    let trace = agent.actor.forward_tape(&mut actor_tape, fv)?;
    let t_var = actor_tape.tanh(trace.output);
    let t_out = actor_tape.value(t_var).clone();
    let kappa = agent.class_k();
    let mut stats = UpdateStats::default();

    let mut kept: Vec<Kept> = Vec::new();
    for (i, (s, _)) in states.iter().enumerate() {
        let u = agent.scale.to_action(t_out.row_slice(i));
        let set = build_constraints(s, &scenario.obstacles, &kappa, scenario.a1, &scenario.bounds);
        match qpdiff::rectify(&u, &set.g, &set.h) {
            Ok((z, ctx)) => kept.push((i, [z[0], z[1], z[2]], ctx, set)),
            Err(_) => stats.skipped_infeasible += 1,
        }
    }
    let zero_actor: Vec<Matrix> = agent.actor.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let zero_kappa: Vec<Matrix> = agent.kappa.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    if kept.is_empty() && preact_penalty == 0.0 {
        return Ok(PolicyGradients { actor: zero_actor, kappa: zero_kappa, mean_q: 0.0, stats });
    }
    let mut d_t = Matrix::zeros(n, CONTROL_DIM);
    let mut zs = Vec::new();
    let mut cots = Vec::new();
    let mut mean_q = 0.0;
    if !kept.is_empty() {
        mean_q = q_sensitivities(agent, &feats, &kept, &mut d_t, &mut zs, &mut cots, &mut stats)?;
    }
    stats.kappa_rows = zs.len();
    let obj = actor_tape.weighted_sum(t_var, d_t)?;
    let root = if preact_penalty > 0.0 {
        let mag = actor_tape.abs(trace.output);
        let wall = actor_tape.constant(Matrix::filled(n, CONTROL_DIM, PREACT_WALL));
        let over = actor_tape.sub(mag, wall)?;
        let excess = actor_tape.relu(over);
        let ss = actor_tape.sum_squares(excess);
        let pen = actor_tape.scale(ss, preact_penalty / n as f64);
        actor_tape.add(obj, pen)?
    } else {
        obj
    };
    let ag = actor_tape.backward(root)?;
    let actor = agent.actor.param_grads(&ag, &trace);
    let kappa_grads = if zs.is_empty() { zero_kappa } else { agent.kappa.vjp(&zs, &cots)?.1 };
    Ok(PolicyGradients { actor, kappa: kappa_grads, mean_q, stats })
}

type Kept = (usize, [f64; CONTROL_DIM], qpdiff::RectifyContext, crate::safety::ConstraintSet);

/// Fills the adjoints of the squashed actor output and the class-K
/// cotangents of `−mean Q / critic_scale`. Returns the mean Q.
fn q_sensitivities(
    agent: &Agent,
    feats: &[Vec<f64>],
    kept: &[Kept],
    d_t: &mut Matrix,
    zs: &mut Vec<f64>,
    cots: &mut Vec<f64>,
    stats: &mut UpdateStats,
) -> Result<f64, NumError> {

    // dQ/du_safe through a frozen critic
    let kf: Vec<Vec<f64>> = kept.iter().map(|(i, ..)| feats[*i].clone()).collect();
    let ka: Vec<[f64; CONTROL_DIM]> = kept.iter().map(|(_, u, ..)| agent.scale.normalize(u)).collect();
    let rows_a: Vec<Vec<f64>> = ka.iter().map(|a| a.to_vec()).collect();
    let mut critic_tape = Tape::new();
    let f_in = critic_tape.constant(Matrix::from_rows(&kf)?);
    let a_in = critic_tape.leaf(Matrix::from_rows(&rows_a)?);
    let x_in = critic_tape.hcat(f_in, a_in)?;
    let q = agent.critic.forward_tape_frozen(&mut critic_tape, x_in)?;
    let q = critic_tape.scale(q, agent.critic_scale);
    let nk = kept.len() as f64;
    let mean_q = critic_tape.value(q).sum() / nk;
    let root = critic_tape.weighted_sum(q, Matrix::filled(kept.len(), 1, 1.0 / nk))?;
    let grads = critic_tape.backward(root)?;
    let d_a = grads.get_or_zeros(a_in, (kept.len(), CONTROL_DIM));

    for (k, (i, _, ctx, set)) in kept.iter().enumerate() {
        // descend on −mean Q; the critic sees u through (u − center)/half
        let dl_du: Vec<f64> =
            (0..CONTROL_DIM).map(|j| -d_a[(k, j)] / (agent.scale.half[j] * agent.critic_scale)).collect();
        let g = match ctx.backward(&dl_du) {
            Ok(g) => g,
            Err(_) => {
                stats.skipped_degenerate += 1;
                continue;
            }
        };
        stats.used += 1;
        if g.approximate {
            stats.approximate += 1;
        }
        for j in 0..CONTROL_DIM {
            d_t[(*i, j)] = g.d_nominal[j] * agent.scale.half[j];
        }
        // row r of h equals κ(ψ_r) + drift, so dL/dκ(ψ_r) = dL/dh_r
        for (r, c) in set.cbf.iter().enumerate() {
            if g.d_h[r] != 0.0 {
                zs.push(c.kappa_arg);
                cots.push(g.d_h[r]);
            }
        }
    }
    Ok(mean_q)
}

/// Ascends `E[Q(s, rectify(μ(s)))]` in the actor and (optionally) class-K parameters.
pub fn actor_kappa_update(
    agent: &mut Agent,
    scenario: &ScenarioConfig,
    batch: &[&Transition],
    config: &TrainConfig,
) -> Result<(UpdateStats, f64), NumError> {
    let states: Vec<(State, [f64; 2])> = batch.iter().map(|t| unpack(agent.order, &t.s)).collect();
    let pg = policy_gradients(agent, scenario, &states, config.actor_preact_penalty)?;
    agent.actor_opt.descend(&mut agent.actor.params_mut(), &pg.actor);
    if config.learn_kappa && pg.stats.kappa_rows > 0 {
        agent.kappa_opt.descend(&mut agent.kappa.params_mut(), &pg.kappa);
        if let Some(m) = config.kappa_max_slope {
            agent.kappa.limit_slope(m);
        }
    }
    Ok((pg.stats, pg.mean_q))
}

pub fn soft_update_targets(agent: &mut Agent, tau: f64) {
    soft_update(&agent.actor.params(), &mut agent.actor_target.params_mut(), tau);
    soft_update(&agent.critic.params(), &mut agent.critic_target.params_mut(), tau);
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, RlError> {
        let bad = |m: &str| RlError::Checkpoint(m.to_string());
        let bytes = hex::decode(&self.seed).map_err(|_| bad("rng seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("rng word position"))?);
        Ok(rng)
    }
}

/// Stream 0 drives the learner, stream 1 the training tasks and stream 2
/// the evaluation tasks, so baselines can replay the same tasks.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn training_tasks(scenario: &ScenarioConfig, seed: u64, count: usize) -> Result<Vec<Task>, EnvError> {
    let mut rng = seeded_stream(seed, 1);
    (0..count).map(|_| sample_task(scenario, &mut rng)).collect()
}

pub fn evaluation_task(scenario: &ScenarioConfig, seed: u64) -> Result<Task, EnvError> {
    sample_task(scenario, &mut seeded_stream(seed, 2))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub updates: usize,
    pub transitions: usize,
    pub infeasible_steps: usize,
    pub policy: UpdateStats,
    pub last_critic_loss: f64,
    pub last_mean_q: f64,
}

/// Training state that can be checkpointed between episodes.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub scenario: ScenarioConfig,
    pub config: TrainConfig,
    pub seed: u64,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub episode: usize,
    pub stats: TrainStats,
    rng: ChaCha8Rng,
    task_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(scenario: ScenarioConfig, config: TrainConfig, seed: u64) -> Result<Self, RlError> {
        scenario.validate()?;
        config.validate()?;
        let mut rng = seeded_stream(seed, 0);
        let agent = Agent::new(&scenario, &config, &mut rng)?;
        Ok(Self {
            buffer: ReplayBuffer::new(config.buffer_capacity),
            scenario,
            config,
            seed,
            agent,
            episode: 0,
            stats: TrainStats::default(),
            rng,
            task_rng: seeded_stream(seed, 1),
        })
    }

    /// Linear anneal from `noise_start` to `noise_end` across the configured episodes.
    pub fn noise_scale(&self) -> f64 {
        let m = self.scenario.episodes.max(2) - 1;
        let frac = (self.episode.min(m)) as f64 / m as f64;
        self.config.noise_start + (self.config.noise_end - self.config.noise_start) * frac
    }

    /// Exploratory action at `state` using and advancing the learner stream.
    pub fn act(&mut self, state: &State, goal: [f64; 2]) -> ([f64; CONTROL_DIM], Filtered) {
        let sigma = self.noise_scale();
        act(&self.agent, &self.scenario, state, goal, sigma, &mut self.rng)
    }

    fn non_finite(&self, step: usize, what: &str) -> RlError {
        RlError::NonFinite { episode: self.episode, step, what: what.to_string() }
    }

    /// One minibatch round: critic step, actor/κ step, target update.
    pub fn update(&mut self, step: usize) -> Result<(), RlError> {
        let batch: Vec<Transition> =
            self.buffer.sample(&mut self.rng, self.config.batch_size).into_iter().cloned().collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let loss = critic_update(&mut self.agent, &self.scenario, &refs, self.config.value_ceiling)?;
        if !loss.is_finite() {
            return Err(self.non_finite(step, "critic loss"));
        }
        let (s, mean_q) = actor_kappa_update(&mut self.agent, &self.scenario, &refs, &self.config)?;
        soft_update_targets(&mut self.agent, self.config.tau);
        if !self.agent.is_finite() {
            return Err(self.non_finite(step, "network parameters"));
        }
        self.stats.updates += 1;
        self.stats.policy.add(&s);
        self.stats.last_critic_loss = loss;
        self.stats.last_mean_q = mean_q;
        Ok(())
    }

    /// Runs one training episode and returns its log.
    pub fn run_episode(&mut self) -> Result<EpisodeLog, RlError> {
        let task = sample_task(&self.scenario, &mut self.task_rng)?;
        let mut log = EpisodeLog::new(&task.start, task.goal, &self.scenario);
        let mut state = task.start;
        for step in 0..self.scenario.steps {
            let (nominal, filtered) = self.act(&state, task.goal);
            let next = dynamics::step(&state, &Control(filtered.rectified), self.scenario.dt).map_err(EnvError::from)?;
            let reward = envs::reward(&next, task.goal, &self.scenario);
            let reached = envs::reached(&next, task.goal, &self.scenario);
            let unsafe_step =
                filtered.infeasible || self.scenario.obstacles.iter().any(|o| barrier(&next, o) < 0.0);
            let penalty = if unsafe_step { self.config.safety_penalty } else { 0.0 };
            self.buffer.push(Transition {
                s: pack(&state, task.goal),
                a_nominal: nominal,
                a_rectified: filtered.rectified,
                r: reward - penalty,
                s_next: pack(&next, task.goal),
                done: reached,
                infeasible: filtered.infeasible,
            });
            self.stats.transitions += 1;
            if filtered.infeasible {
                self.stats.infeasible_steps += 1;
            }
            let out = StepOutcome { filtered, next, reward, reached };
            log.record(nominal, &out, &self.scenario);
            self.update(step)?;
            state = next;
            if reached {
                break;
            }
        }
        self.agent
            .kappa
            .check_class_k(-5.0, 5.0, 201)
            .map_err(|e| RlError::Config(format!("class-K check failed after episode {}: {e}", self.episode)))?;
        self.episode += 1;
        Ok(log)
    }

    /// Trains until `scenario.episodes` episodes have run, calling
    /// `on_episode` after each one.
    pub fn train(&mut self, mut on_episode: impl FnMut(&EpisodeMetrics)) -> Result<Vec<EpisodeMetrics>, RlError> {
        let mut rows = Vec::new();
        while self.episode < self.scenario.episodes {
            let ep = self.episode;
            let log = self.run_episode()?;
            let m = EpisodeMetrics::from_log(ep, &log);
            on_episode(&m);
            rows.push(m);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(&self.scenario, &self.config),
            scenario: self.scenario.clone(),
            config: self.config.clone(),
            seed: self.seed,
            episode: self.episode,
            agent: self.agent.clone(),
            rng: RngState::capture(&self.rng),
            task_rng: RngState::capture(&self.task_rng),
            stats: self.stats,
        }
    }

    /// Rebuilds a trainer from a checkpoint. The replay buffer is not
    /// persisted and starts empty.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, RlError> {
        ck.validate()?;
        Ok(Self {
            buffer: ReplayBuffer::new(ck.config.buffer_capacity),
            rng: ck.rng.restore()?,
            task_rng: ck.task_rng.restore()?,
            scenario: ck.scenario,
            config: ck.config,
            seed: ck.seed,
            agent: ck.agent,
            episode: ck.episode,
            stats: ck.stats,
        })
    }
}

/// Versioned snapshot of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub scenario: ScenarioConfig,
    pub config: TrainConfig,
    pub seed: u64,
    pub episode: usize,
    pub agent: Agent,
    pub rng: RngState,
    pub task_rng: RngState,
    pub stats: TrainStats,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<(), RlError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(RlError::Checkpoint(format!("unexpected format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(RlError::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.config_hash != config_hash(&self.scenario, &self.config) {
            return Err(RlError::Checkpoint("config hash does not match the stored configs".into()));
        }
        self.scenario.validate()?;
        self.config.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RlError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| RlError::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }
}

/// Noise-free rollout of the learned policy behind the learned filter.
pub fn evaluate(agent: &Agent, scenario: &ScenarioConfig, task: &Task, steps: usize) -> Result<EpisodeLog, EnvError> {
    let mut cfg = scenario.clone();
    cfg.steps = steps;
    let kappa = agent.class_k();
    envs::rollout_with(task, &kappa, &cfg, |s, g| agent.policy(s, g))
}

/// Baseline runs over the same task sequence a learner with `seed` sees.
pub fn baseline_training_metrics(scenario: &ScenarioConfig, seed: u64) -> Result<Vec<EpisodeMetrics>, EnvError> {
    training_tasks(scenario, seed, scenario.episodes)?
        .iter()
        .enumerate()
        .map(|(ep, task)| Ok(EpisodeMetrics::from_log(ep, &envs::baseline_rollout(task, scenario)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_scenario, ScenarioName};

    fn transition(i: usize) -> Transition {
        Transition {
            s: vec![i as f64; 5],
            a_nominal: [0.0; 3],
            a_rectified: [0.0; 3],
            r: i as f64,
            s_next: vec![0.0; 5],
            done: false,
            infeasible: false,
        }
    }

    #[test]
    fn replay_evicts_oldest() {
        let mut b = ReplayBuffer::new(4);
        for i in 0..7 {
            b.push(transition(i));
            assert!(b.len() <= 4);
        }
        let rs: Vec<f64> = b.iter().map(|t| t.r).collect();
        assert_eq!(rs, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut b = ReplayBuffer::new(100);
        for i in 0..10 {
            b.push(transition(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample(&mut rng, 64);
        assert_eq!(s.len(), 10);
        let mut rs: Vec<i64> = s.iter().map(|t| t.r as i64).collect();
        rs.sort();
        rs.dedup();
        assert_eq!(rs.len(), 10);
    }

    #[test]
    fn action_scale_round_trip() {
        let sc = ActionScale::from_hull([-2.0, -1.0, 0.0], [2.0, 3.0, 1.0]);
        let u = sc.to_action(&[0.5, -0.5, 1.0]);
        assert_eq!(u, [1.0, 0.0, 1.0]);
        assert_eq!(sc.normalize(&u), [0.5, -0.5, 1.0]);
    }

    #[test]
    fn features_have_declared_width() {
        for name in ScenarioName::ALL {
            let cfg = make_scenario(name);
            let task = sample_task(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            assert_eq!(features(&task.start, task.goal).len(), feature_dim(cfg.order));
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let cfg = make_scenario(ScenarioName::Optimality);
        let agent = Agent::new(&cfg, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let w = agent.critic.input_dim();
        let x = Matrix::from_rows(&[vec![0.1; w], vec![-0.3; w]]).unwrap();
        let y = critic_values(&agent.critic, agent.critic_scale, &x).unwrap();
        let (loss, grads) = critic_loss(&agent.critic, agent.critic_scale, &x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn myopic_targets_are_rewards() {
        let mut cfg = make_scenario(ScenarioName::Optimality);
        cfg.gamma = 1e-300;
        let agent = Agent::new(&cfg, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let task = sample_task(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut t = transition(0);
        t.s = pack(&task.start, task.goal);
        t.s_next = t.s.clone();
        t.r = -3.25;
        let y = td_targets(&agent, &cfg, &[&t], None).unwrap();
        assert!((y[0] + 3.25).abs() < 1e-290);
        t.done = true;
        assert_eq!(td_targets(&agent, &cfg, &[&t], None).unwrap()[0], -3.25);
    }
}
