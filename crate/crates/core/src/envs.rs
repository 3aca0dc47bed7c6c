//! Seeded toy control tasks with known optimal returns.
//!
//! * `pointmass2d`: a point in a bounded plane that receives a per-axis
//!   velocity command each step and pays its distance to a fixed goal.
//! * `pendulum-swingup`: torque-limited pendulum integrated with explicit
//!   Euler, starting near the bottom.
//! * `gridworld8x8`: tabular maze with obstacles and a rewarded goal cell.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::seeded;

/// An action, either a real vector or a class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous { low: Vec<f64>, high: Vec<f64> },
    Discrete { n: usize },
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Continuous { low, .. } => low.len(),
            ActionSpace::Discrete { n } => *n,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }

    /// Clips a continuous action into the box; discrete actions pass through.
    pub fn clip(&self, action: &Action) -> Action {
        match (self, action) {
            (ActionSpace::Continuous { low, high }, Action::Continuous(a)) => Action::Continuous(
                a.iter()
                    .zip(low.iter().zip(high))
                    .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
                    .collect(),
            ),
            _ => action.clone(),
        }
    }

    pub fn check(&self, action: &Action) -> Result<()> {
        match (self, action) {
            (ActionSpace::Continuous { low, .. }, Action::Continuous(a)) => {
                ensure(a.len() == low.len(), || {
                    format!("action has {} entries, expected {}", a.len(), low.len())
                })?;
                ensure(a.iter().all(|v| v.is_finite()), || "non-finite action".into())
            }
            (ActionSpace::Discrete { n }, Action::Discrete(i)) => {
                ensure(i < n, || format!("action {i} out of range for {n} actions"))
            }
            _ => Err(Error::Contract("action kind does not match the action space".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndKind {
    /// The task reached its goal condition; nothing follows.
    Goal,
    /// The episode was cut off; the last state still has a future.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassParams {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Half-width of the uniform start-position perturbation, per axis.
    pub init_noise: f64,
    pub dt: f64,
    pub max_speed: f64,
    /// Positions are clamped to `[-arena, arena]` on each axis.
    pub arena: f64,
    pub horizon: usize,
}

impl Default for PointMassParams {
    fn default() -> Self {
        Self {
            start: [-0.5, -0.5],
            goal: [1.0, 0.5],
            init_noise: 0.1,
            dt: 0.1,
            max_speed: 1.0,
            arena: 2.0,
            horizon: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    /// Initial angle is drawn from `pi ± init_angle_spread` (0 is upright).
    pub init_angle_spread: f64,
    pub init_speed_spread: f64,
    pub horizon: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            init_angle_spread: 0.5,
            init_speed_spread: 0.5,
            horizon: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridWorldParams {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub obstacles: BTreeSet<(usize, usize)>,
    pub step_reward: f64,
    /// Reward paid (instead of `step_reward`) on the move that enters the goal.
    pub goal_reward: f64,
    pub horizon: usize,
}

impl Default for GridWorldParams {
    fn default() -> Self {
        let obstacles = [
            (2, 1),
            (2, 2),
            (2, 3),
            (2, 4),
            (4, 3),
            (4, 4),
            (4, 5),
            (4, 6),
            (4, 7),
            (6, 1),
            (6, 2),
            (6, 3),
        ]
        .into_iter()
        .collect();
        Self {
            width: 8,
            height: 8,
            start: (0, 0),
            goal: (7, 7),
            obstacles,
            step_reward: -1.0,
            goal_reward: 10.0,
            horizon: 64,
        }
    }
}

/// Grid moves, indexed by discrete action.
pub const GRID_MOVES: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvKind {
    PointMass(PointMassParams),
    Pendulum(PendulumParams),
    GridWorld(GridWorldParams),
}

/// Static description of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub max_episode_length: usize,
    pub reward_range: (f64, f64),
    pub kind: EnvKind,
}

pub const ENV_NAMES: [&str; 3] = ["pointmass2d", "pendulum-swingup", "gridworld8x8"];

impl EnvSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pointmass2d" => Ok(Self::point_mass(PointMassParams::default())),
            "pendulum-swingup" => Ok(Self::pendulum(PendulumParams::default())),
            "gridworld8x8" => Self::gridworld(GridWorldParams::default()),
            other => Err(Error::Config(format!(
                "unknown environment '{other}' (expected one of {})",
                ENV_NAMES.join(", ")
            ))),
        }
    }

    pub fn point_mass(p: PointMassParams) -> Self {
        let worst = [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]
            .iter()
            .map(|c: &[f64; 2]| dist(&[c[0] * p.arena, c[1] * p.arena], &p.goal))
            .fold(0.0, f64::max);
        Self {
            name: "pointmass2d".into(),
            obs_dim: 4,
            action_space: ActionSpace::Continuous {
                low: vec![-1.0; 2],
                high: vec![1.0; 2],
            },
            max_episode_length: p.horizon,
            reward_range: (-worst, 0.0),
            kind: EnvKind::PointMass(p),
        }
    }

    pub fn pendulum(p: PendulumParams) -> Self {
        let worst = std::f64::consts::PI.powi(2)
            + 0.1 * p.max_speed * p.max_speed
            + 0.001 * p.max_torque * p.max_torque;
        Self {
            name: "pendulum-swingup".into(),
            obs_dim: 3,
            action_space: ActionSpace::Continuous {
                low: vec![-p.max_torque],
                high: vec![p.max_torque],
            },
            max_episode_length: p.horizon,
            reward_range: (-worst, 0.0),
            kind: EnvKind::Pendulum(p),
        }
    }

    pub fn gridworld(p: GridWorldParams) -> Result<Self> {
        let inside = |(x, y): (usize, usize)| x < p.width && y < p.height;
        if p.width == 0 || p.height == 0 || p.horizon == 0 {
            return Err(Error::Config("gridworld dimensions and horizon must be >= 1".into()));
        }
        if !inside(p.start) || !inside(p.goal) {
            return Err(Error::Config("gridworld start/goal outside the grid".into()));
        }
        if p.obstacles.contains(&p.start) || p.obstacles.contains(&p.goal) {
            return Err(Error::Config("gridworld start/goal placed on an obstacle".into()));
        }
        let lo = p.step_reward.min(p.goal_reward);
        let hi = p.step_reward.max(p.goal_reward);
        Ok(Self {
            name: "gridworld8x8".into(),
            obs_dim: p.width * p.height,
            action_space: ActionSpace::Discrete { n: 4 },
            max_episode_length: p.horizon,
            reward_range: (lo, hi),
            kind: EnvKind::GridWorld(p),
        })
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mutable episode state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Point mass: `[px, py, vx, vy]`; pendulum: `[theta, theta_dot]`;
    /// gridworld: `[x, y]`.
    pub internal: Vec<f64>,
    pub step: usize,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// `Some` when the episode ended on this step.
    pub end: Option<EndKind>,
}

impl StepResult {
    pub fn terminal(&self) -> bool {
        self.end.is_some()
    }
}

fn observe(spec: &EnvSpec, s: &[f64]) -> Vec<f64> {
    match &spec.kind {
        EnvKind::PointMass(_) => s.to_vec(),
        EnvKind::Pendulum(_) => vec![s[0].cos(), s[0].sin(), s[1]],
        EnvKind::GridWorld(p) => {
            let mut obs = vec![0.0; p.width * p.height];
            obs[s[1] as usize * p.width + s[0] as usize] = 1.0;
            obs
        }
    }
}

/// Starts an episode. The result depends only on `(spec, seed)`.
pub fn env_reset(spec: &EnvSpec, seed: u64) -> Result<(EnvState, Vec<f64>)> {
    let mut rng = seeded(seed);
    let internal = match &spec.kind {
        EnvKind::PointMass(p) => {
            let mut pos = p.start;
            if p.init_noise > 0.0 {
                for v in &mut pos {
                    *v += rng.gen_range(-p.init_noise..=p.init_noise);
                }
            }
            vec![pos[0], pos[1], 0.0, 0.0]
        }
        EnvKind::Pendulum(p) => {
            let theta =
                std::f64::consts::PI + rng.gen_range(-p.init_angle_spread..=p.init_angle_spread);
            let speed = rng.gen_range(-p.init_speed_spread..=p.init_speed_spread);
            vec![theta, speed]
        }
        EnvKind::GridWorld(p) => vec![p.start.0 as f64, p.start.1 as f64],
    };
    let obs = observe(spec, &internal);
    Ok((
        EnvState {
            internal,
            step: 0,
            terminal: false,
        },
        obs,
    ))
}

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

pub fn grid_move(p: &GridWorldParams, (x, y): (usize, usize), action: usize) -> (usize, usize) {
    let (dx, dy) = GRID_MOVES[action];
    let nx = x as i64 + dx;
    let ny = y as i64 + dy;
    if nx < 0 || ny < 0 || nx >= p.width as i64 || ny >= p.height as i64 {
        return (x, y);
    }
    let next = (nx as usize, ny as usize);
    if p.obstacles.contains(&next) {
        (x, y)
    } else {
        next
    }
}

/// Advances the episode by one step.
pub fn env_step(spec: &EnvSpec, state: &mut EnvState, action: &Action) -> Result<StepResult> {
    ensure(!state.terminal, || "step called on a terminal state".into())?;
    spec.action_space.check(action)?;
    let action = spec.action_space.clip(action);
    let mut goal_reached = false;
    let reward = match (&spec.kind, &action) {
        (EnvKind::PointMass(p), Action::Continuous(a)) => {
            let s = &mut state.internal;
            for axis in 0..2 {
                let v = a[axis] * p.max_speed;
                s[2 + axis] = v;
                s[axis] = (s[axis] + p.dt * v).clamp(-p.arena, p.arena);
            }
            -dist(&s[..2], &p.goal)
        }
        (EnvKind::Pendulum(p), Action::Continuous(a)) => {
            let s = &mut state.internal;
            let (theta, speed) = (s[0], s[1]);
            let u = a[0];
            let reward = -(wrap_angle(theta).powi(2) + 0.1 * speed * speed + 0.001 * u * u);
            let accel = 3.0 * p.gravity / (2.0 * p.length) * theta.sin()
                + 3.0 / (p.mass * p.length * p.length) * u;
            s[0] = theta + p.dt * speed;
            s[1] = (speed + p.dt * accel).clamp(-p.max_speed, p.max_speed);
            reward
        }
        (EnvKind::GridWorld(p), Action::Discrete(i)) => {
            let s = &mut state.internal;
            let next = grid_move(p, (s[0] as usize, s[1] as usize), *i);
            s[0] = next.0 as f64;
            s[1] = next.1 as f64;
            if next == p.goal {
                goal_reached = true;
                p.goal_reward
            } else {
                p.step_reward
            }
        }
        _ => unreachable!("action kind checked above"),
    };
    state.step += 1;
    let end = if goal_reached {
        Some(EndKind::Goal)
    } else if state.step >= spec.max_episode_length {
        Some(EndKind::Timeout)
    } else {
        None
    };
    state.terminal = end.is_some();
    Ok(StepResult {
        observation: observe(spec, &state.internal),
        reward,
        end,
    })
}

/// Exact optimal discounted return from the nominal start state.
pub fn optimal_return(spec: &EnvSpec, gamma: f64) -> Result<f64> {
    match &spec.kind {
        EnvKind::PointMass(p) => Ok(point_mass_optimal_from(p, p.start, gamma)),
        EnvKind::GridWorld(p) => Ok(gridworld_optimal_values(p, gamma)[p.start.1][p.start.0]),
        EnvKind::Pendulum(_) => Err(Error::NotAvailable(format!(
            "no optimal-return oracle for {}",
            spec.name
        ))),
    }
}

/// Exact optimal discounted return from the state an episode started in.
pub fn optimal_return_from(spec: &EnvSpec, state: &EnvState, gamma: f64) -> Result<f64> {
    match &spec.kind {
        EnvKind::PointMass(p) => Ok(point_mass_optimal_from(
            p,
            [state.internal[0], state.internal[1]],
            gamma,
        )),
        EnvKind::GridWorld(p) => {
            let v = gridworld_optimal_values(p, gamma);
            Ok(v[state.internal[1] as usize][state.internal[0] as usize])
        }
        EnvKind::Pendulum(_) => Err(Error::NotAvailable(format!(
            "no optimal-return oracle for {}",
            spec.name
        ))),
    }
}

/// Each axis closes at most `dt * max_speed` per step, so after `t` steps the
/// best reachable point is the goal clamped into a box of half-width
/// `t * dt * max_speed` around the start; moving straight at full speed on
/// every unfinished axis attains that bound at every step simultaneously.
fn point_mass_optimal_from(p: &PointMassParams, start: [f64; 2], gamma: f64) -> f64 {
    let reach = p.dt * p.max_speed;
    let gaps = [(p.goal[0] - start[0]).abs(), (p.goal[1] - start[1]).abs()];
    let mut total = 0.0;
    let mut discount = 1.0;
    for t in 1..=p.horizon {
        let covered = t as f64 * reach;
        let d = gaps
            .iter()
            .map(|g| (g - covered).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt();
        if d == 0.0 {
            break;
        }
        total -= discount * d;
        discount *= gamma;
    }
    total
}

/// Finite-horizon optimal values `V[y][x]` with `horizon` steps remaining.
///
/// Backward induction over the episode horizon; equivalent to running value
/// iteration to its exact fixed point on the time-augmented problem.
pub fn gridworld_optimal_values(p: &GridWorldParams, gamma: f64) -> Vec<Vec<f64>> {
    let mut v = vec![vec![0.0; p.width]; p.height];
    for _ in 0..p.horizon {
        let mut next = vec![vec![0.0; p.width]; p.height];
        for y in 0..p.height {
            for x in 0..p.width {
                if p.obstacles.contains(&(x, y)) || (x, y) == p.goal {
                    continue;
                }
                next[y][x] = (0..4)
                    .map(|a| {
                        let (nx, ny) = grid_move(p, (x, y), a);
                        if (nx, ny) == p.goal {
                            p.goal_reward
                        } else {
                            p.step_reward + gamma * v[ny][nx]
                        }
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        v = next;
    }
    v
}

/// Breadth-first distance (in moves) from every free cell to the goal.
pub fn gridworld_goal_distances(p: &GridWorldParams) -> Vec<Vec<Option<usize>>> {
    let mut d = vec![vec![None; p.width]; p.height];
    d[p.goal.1][p.goal.0] = Some(0);
    let mut queue = VecDeque::from([p.goal]);
    while let Some((x, y)) = queue.pop_front() {
        let here = d[y][x].unwrap();
        for a in 0..4 {
            // Moves are reversible on a grid, so neighbours of (x, y) are the
            // cells that can step into it.
            let n = grid_move(p, (x, y), a);
            if n != (x, y) && d[n.1][n.0].is_none() {
                d[n.1][n.0] = Some(here + 1);
                queue.push_back(n);
            }
        }
    }
    d
}

/// A deliberately imperfect hand-written controller used to generate
/// "mediocre" datasets.
pub fn scripted_mediocre_action<R: Rng + ?Sized>(spec: &EnvSpec, obs: &[f64], rng: &mut R) -> Action {
    use rand_distr::{Distribution, StandardNormal};
    match &spec.kind {
        EnvKind::PointMass(p) => {
            // Low-gain proportional controller plus exploration noise.
            let gain = 0.3;
            let noise = 0.6;
            Action::Continuous(
                (0..2)
                    .map(|i| {
                        let eps: f64 = StandardNormal.sample(rng);
                        (gain * (p.goal[i] - obs[i]) + noise * eps).clamp(-1.0, 1.0)
                    })
                    .collect(),
            )
        }
        EnvKind::Pendulum(p) => {
            // Energy pumping with a sloppy gain.
            let speed = obs[2];
            let eps: f64 = StandardNormal.sample(rng);
            let u = 0.5 * p.max_torque * speed.signum() + 0.5 * p.max_torque * eps;
            Action::Continuous(vec![u.clamp(-p.max_torque, p.max_torque)])
        }
        EnvKind::GridWorld(p) => {
            let cell = obs.iter().position(|&v| v > 0.5).unwrap_or(0);
            let here = (cell % p.width, cell / p.width);
            let dists = gridworld_goal_distances(p);
            if rng.gen_bool(0.5) {
                Action::Discrete(rng.gen_range(0..4))
            } else {
                let best = (0..4)
                    .min_by_key(|&a| {
                        let n = grid_move(p, here, a);
                        dists[n.1][n.0].unwrap_or(usize::MAX)
                    })
                    .unwrap_or(0);
                Action::Discrete(best)
            }
        }
    }
}
