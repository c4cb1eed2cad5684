//! Grid-world benchmarks: predator-prey and a four-way traffic junction.
//!
//! Both environments expose a fixed number of agent slots. Traffic-junction
//! slots are occupied by cars that come and go; [`EnvStep::active`] marks which
//! slots act next and [`EnvStep::agent_ids`] tells successive occupants of one
//! slot apart.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("agent {agent}: action {action} out of range (0..{n_actions})")]
    InvalidAction { agent: usize, action: usize, n_actions: usize },
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error("step called before reset")]
    NotReset,
}

/// Counters for one transition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepInfo {
    /// Prey captured this step.
    pub captures: usize,
    /// Cars involved in a collision this step.
    pub collisions: usize,
    /// Episode success so far: all prey taken (predator-prey) or no collision yet
    /// (traffic junction).
    pub success: bool,
}

/// Result of a reset or a step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    /// One row per agent slot; inactive slots are all zero.
    pub observations: Matrix,
    /// Reward of the agent that acted in each slot during this step (zero after reset
    /// and for slots that were empty).
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Slots that take an action next step.
    pub active: Vec<bool>,
    /// Occupant identity per slot; changes whenever a new car arrives in a slot.
    pub agent_ids: Vec<u64>,
    pub info: StepInfo,
}

pub trait Environment: Send {
    fn n_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<EnvStep, EnvError>;
    /// `actions` has one entry per slot; entries for inactive slots are ignored.
    fn step(&mut self, actions: &[usize]) -> Result<EnvStep, EnvError>;
    /// Compact state description for replay dumps.
    fn summary(&self) -> serde_json::Value;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredatorPreyConfig {
    pub grid_size: usize,
    pub n_predators: usize,
    pub n_prey: usize,
    pub vision: usize,
    pub capture_reward: f64,
    /// Paid by every predator every step, as a positive number.
    pub step_cost: f64,
    pub max_steps: usize,
    /// Pay the capture reward to every predator instead of only the two capturers.
    pub shared_capture: bool,
}

impl PredatorPreyConfig {
    /// 10x10 grid, 8 predators, 4 prey.
    pub fn full() -> Self {
        Self {
            grid_size: 10,
            n_predators: 8,
            n_prey: 4,
            vision: 1,
            capture_reward: 0.3,
            step_cost: 0.1,
            max_steps: 30,
            shared_capture: false,
        }
    }

    /// 6x6 grid, 4 predators, 2 prey.
    pub fn desk() -> Self {
        Self {
            grid_size: 6,
            n_predators: 4,
            n_prey: 2,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_predators < 2 {
            return Err(EnvError::Config(format!("n_predators = {} but captures need two", self.n_predators)));
        }
        if self.n_prey == 0 || self.grid_size == 0 || self.max_steps == 0 {
            return Err(EnvError::Config("grid_size, n_prey and max_steps must be positive".into()));
        }
        let cells = self.grid_size * self.grid_size;
        if self.n_prey > cells || self.n_predators > cells {
            return Err(EnvError::Config(format!(
                "a {0}x{0} grid cannot hold {1} prey and {2} predators",
                self.grid_size, self.n_prey, self.n_predators
            )));
        }
        Ok(())
    }

    fn obs_dim(&self) -> usize {
        let w = 2 * self.vision + 1;
        2 * w * w + 2
    }
}

pub const PP_STAY: usize = 4;
/// Row/column deltas for up, down, left, right, stay.
const PP_MOVES: [(isize, isize); 5] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];

/// Predators chase stationary prey; a prey is taken when exactly two predators
/// stand on its cell.
#[derive(Debug, Clone)]
pub struct PredatorPrey {
    config: PredatorPreyConfig,
    predators: Vec<(usize, usize)>,
    prey: Vec<Option<(usize, usize)>>,
    t: usize,
    done: bool,
    started: bool,
}

impl PredatorPrey {
    pub fn new(config: PredatorPreyConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            predators: Vec::new(),
            prey: Vec::new(),
            t: 0,
            done: false,
            started: false,
        })
    }

    pub fn config(&self) -> &PredatorPreyConfig {
        &self.config
    }

    pub fn predators(&self) -> &[(usize, usize)] {
        &self.predators
    }

    /// Positions of prey not yet captured.
    pub fn prey(&self) -> Vec<(usize, usize)> {
        self.prey.iter().flatten().copied().collect()
    }

    /// Places entities explicitly and starts a fresh episode.
    pub fn set_state(&mut self, predators: Vec<(usize, usize)>, prey: Vec<(usize, usize)>) -> Result<EnvStep, EnvError> {
        let g = self.config.grid_size;
        if predators.len() != self.config.n_predators || prey.is_empty() {
            return Err(EnvError::Config("set_state: wrong entity counts".into()));
        }
        if predators.iter().chain(&prey).any(|&(r, c)| r >= g || c >= g) {
            return Err(EnvError::Config("set_state: position outside grid".into()));
        }
        self.predators = predators;
        self.prey = prey.into_iter().map(Some).collect();
        self.t = 0;
        self.done = false;
        self.started = true;
        Ok(self.emit(vec![0.0; self.config.n_predators], 0))
    }

    fn observations(&self) -> Matrix {
        let g = self.config.grid_size as isize;
        let v = self.config.vision as isize;
        let w = (2 * v + 1) as usize;
        let n = self.config.n_predators;
        let mut obs = Matrix::zeros(n, self.config.obs_dim());
        for (a, &(r, c)) in self.predators.iter().enumerate() {
            for (b, &(pr, pc)) in self.predators.iter().enumerate() {
                let (dr, dc) = (pr as isize - r as isize, pc as isize - c as isize);
                if b != a && dr.abs() <= v && dc.abs() <= v {
                    let k = ((dr + v) as usize) * w + (dc + v) as usize;
                    obs.set(a, k, obs.get(a, k) + 1.0);
                }
            }
            for &(pr, pc) in self.prey.iter().flatten() {
                let (dr, dc) = (pr as isize - r as isize, pc as isize - c as isize);
                if dr.abs() <= v && dc.abs() <= v {
                    let k = w * w + ((dr + v) as usize) * w + (dc + v) as usize;
                    obs.set(a, k, 1.0);
                }
            }
            let scale = (g - 1).max(1) as f64;
            obs.set(a, 2 * w * w, r as f64 / scale);
            obs.set(a, 2 * w * w + 1, c as f64 / scale);
        }
        obs
    }

    fn emit(&self, rewards: Vec<f64>, captures: usize) -> EnvStep {
        let n = self.config.n_predators;
        EnvStep {
            observations: self.observations(),
            rewards,
            done: self.done,
            active: vec![true; n],
            agent_ids: (0..n as u64).collect(),
            info: StepInfo {
                captures,
                collisions: 0,
                success: self.prey.iter().all(Option::is_none),
            },
        }
    }
}

impl Environment for PredatorPrey {
    fn n_agents(&self) -> usize {
        self.config.n_predators
    }

    fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    fn n_actions(&self) -> usize {
        PP_MOVES.len()
    }

    fn reset(&mut self, seed: u64) -> Result<EnvStep, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.config.grid_size;
        let predators = (0..self.config.n_predators)
            .map(|_| (rng.random_range(0..g), rng.random_range(0..g)))
            .collect::<Vec<_>>();
        let mut free: Vec<(usize, usize)> = (0..g)
            .flat_map(|r| (0..g).map(move |c| (r, c)))
            .filter(|cell| !predators.contains(cell))
            .collect();
        if free.len() < self.config.n_prey {
            return Err(EnvError::Config(format!(
                "only {} free cells left for {} prey",
                free.len(),
                self.config.n_prey
            )));
        }
        let prey = (0..self.config.n_prey)
            .map(|_| free.swap_remove(rng.random_range(0..free.len())))
            .collect();
        self.set_state(predators, prey)
    }

    fn step(&mut self, actions: &[usize]) -> Result<EnvStep, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let n = self.config.n_predators;
        if actions.len() != n {
            return Err(EnvError::ActionCount { expected: n, got: actions.len() });
        }
        if let Some((agent, &action)) = actions.iter().enumerate().find(|(_, a)| **a >= PP_MOVES.len()) {
            return Err(EnvError::InvalidAction {
                agent,
                action,
                n_actions: PP_MOVES.len(),
            });
        }
        let max = self.config.grid_size as isize - 1;
        for (p, &a) in self.predators.iter_mut().zip(actions) {
            let (dr, dc) = PP_MOVES[a];
            p.0 = (p.0 as isize + dr).clamp(0, max) as usize;
            p.1 = (p.1 as isize + dc).clamp(0, max) as usize;
        }
        let mut rewards = vec![-self.config.step_cost; n];
        let mut captures = 0;
        for slot in self.prey.iter_mut() {
            let Some(cell) = *slot else { continue };
            let on: Vec<usize> = (0..n).filter(|&a| self.predators[a] == cell).collect();
            if on.len() == 2 {
                *slot = None;
                captures += 1;
                if self.config.shared_capture {
                    rewards.iter_mut().for_each(|r| *r += self.config.capture_reward);
                } else {
                    on.iter().for_each(|&a| rewards[a] += self.config.capture_reward);
                }
            }
        }
        self.t += 1;
        self.done = self.t >= self.config.max_steps || self.prey.iter().all(Option::is_none);
        Ok(self.emit(rewards, captures))
    }

    fn summary(&self) -> serde_json::Value {
        serde_json::json!({ "t": self.t, "predators": self.predators, "prey": self.prey() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficJunctionConfig {
    pub grid_size: usize,
    pub n_max_cars: usize,
    pub p_arrive: f64,
    pub max_steps: usize,
    pub step_cost: f64,
    /// Negative reward added to each car in a shared cell.
    pub collision_penalty: f64,
    /// Charge `step_cost * tau` (tau = steps since arrival) instead of a flat `step_cost`.
    pub time_scaled_cost: bool,
}

impl TrafficJunctionConfig {
    pub fn full() -> Self {
        Self {
            grid_size: 18,
            n_max_cars: 20,
            p_arrive: 0.05,
            max_steps: 50,
            step_cost: 0.01,
            collision_penalty: -10.0,
            time_scaled_cost: true,
        }
    }

    /// Ten car slots, otherwise as [`Self::full`].
    pub fn desk() -> Self {
        Self {
            n_max_cars: 10,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.p_arrive > 0.0 && self.p_arrive < 1.0) {
            return Err(EnvError::Config(format!("p_arrive = {} must lie in (0, 1)", self.p_arrive)));
        }
        if self.grid_size < 4 || !self.grid_size.is_multiple_of(2) {
            return Err(EnvError::Config(format!("grid_size = {} must be even and at least 4", self.grid_size)));
        }
        if self.n_max_cars == 0 || self.max_steps == 0 {
            return Err(EnvError::Config("n_max_cars and max_steps must be positive".into()));
        }
        Ok(())
    }
}

pub const TJ_GAS: usize = 0;
pub const TJ_BRAKE: usize = 1;
pub const TJ_OBS_DIM: usize = 20;

/// Direction a car enters from, named by its heading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Heading {
    South,
    North,
    East,
    West,
}

const HEADINGS: [Heading; 4] = [Heading::South, Heading::North, Heading::East, Heading::West];

impl Heading {
    fn index(self) -> usize {
        HEADINGS.iter().position(|h| *h == self).unwrap()
    }

    /// Driver's right and left for right-hand traffic.
    fn right(self) -> Self {
        match self {
            Heading::South => Heading::West,
            Heading::North => Heading::East,
            Heading::East => Heading::South,
            Heading::West => Heading::North,
        }
    }

    fn left(self) -> Self {
        self.right().opposite()
    }

    fn opposite(self) -> Self {
        match self {
            Heading::South => Heading::North,
            Heading::North => Heading::South,
            Heading::East => Heading::West,
            Heading::West => Heading::East,
        }
    }

    /// Cells of this direction's lane in driving order.
    fn lane(self, g: usize) -> Vec<(usize, usize)> {
        let (lo, hi) = (g / 2 - 1, g / 2);
        match self {
            Heading::South => (0..g).map(|r| (r, lo)).collect(),
            Heading::North => (0..g).rev().map(|r| (r, hi)).collect(),
            Heading::East => (0..g).map(|c| (hi, c)).collect(),
            Heading::West => (0..g).rev().map(|c| (lo, c)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Turn {
    Straight,
    Left,
    Right,
}

const TURNS: [Turn; 3] = [Turn::Straight, Turn::Left, Turn::Right];

/// Cells visited from arrival to the last cell before leaving the grid.
pub fn route_cells(g: usize, from: Heading, turn: Turn) -> Vec<(usize, usize)> {
    let to = match turn {
        Turn::Straight => return from.lane(g),
        Turn::Left => from.left(),
        Turn::Right => from.right(),
    };
    let first = from.lane(g);
    let second = to.lane(g);
    let cross = first.iter().position(|c| second.contains(c)).expect("perpendicular lanes cross");
    let from_cross = second.iter().position(|c| *c == first[cross]).unwrap();
    first[..cross].iter().chain(&second[from_cross..]).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Car {
    id: u64,
    heading: Heading,
    turn: Turn,
    path: std::sync::Arc<Vec<(usize, usize)>>,
    progress: usize,
    /// Steps since arrival.
    tau: usize,
}

impl Car {
    fn cell(&self) -> (usize, usize) {
        self.path[self.progress]
    }
}

/// Two crossing two-way roads; cars arrive at the four road ends and follow a
/// fixed route, choosing only between gas and brake.
#[derive(Debug, Clone)]
pub struct TrafficJunction {
    config: TrafficJunctionConfig,
    routes: Vec<std::sync::Arc<Vec<(usize, usize)>>>,
    cars: Vec<Option<Car>>,
    rng: ChaCha8Rng,
    next_id: u64,
    t: usize,
    collided: bool,
    done: bool,
    started: bool,
}

impl TrafficJunction {
    pub fn new(config: TrafficJunctionConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let g = config.grid_size;
        let routes = HEADINGS
            .iter()
            .flat_map(|&h| TURNS.iter().map(move |&t| std::sync::Arc::new(route_cells(g, h, t))))
            .collect();
        Ok(Self {
            cars: vec![None; config.n_max_cars],
            config,
            routes,
            rng: ChaCha8Rng::seed_from_u64(0),
            next_id: 0,
            t: 0,
            collided: false,
            done: false,
            started: false,
        })
    }

    pub fn config(&self) -> &TrafficJunctionConfig {
        &self.config
    }

    pub fn n_active(&self) -> usize {
        self.cars.iter().flatten().count()
    }

    pub fn car_cell(&self, slot: usize) -> Option<(usize, usize)> {
        self.cars[slot].as_ref().map(Car::cell)
    }

    /// Puts a new car at the start of a route if a slot is free and the entry cell
    /// is empty; returns its slot.
    pub fn spawn_car(&mut self, heading: Heading, turn: Turn) -> Option<usize> {
        let route = self.routes[heading.index() * TURNS.len() + TURNS.iter().position(|t| *t == turn).unwrap()].clone();
        let entry = route[0];
        if self.cars.iter().flatten().any(|c| c.cell() == entry) {
            return None;
        }
        let slot = self.cars.iter().position(Option::is_none)?;
        self.cars[slot] = Some(Car {
            id: self.next_id,
            heading,
            turn,
            path: route,
            progress: 0,
            tau: 0,
        });
        self.next_id += 1;
        Some(slot)
    }

    fn observations(&self) -> Matrix {
        let g = self.config.grid_size;
        let mut obs = Matrix::zeros(self.cars.len(), TJ_OBS_DIM);
        let mut occupancy = vec![0.0; g * g];
        for car in self.cars.iter().flatten() {
            let (r, c) = car.cell();
            occupancy[r * g + c] += 1.0;
        }
        for (slot, car) in self.cars.iter().enumerate() {
            let Some(car) = car else { continue };
            let (r, c) = car.cell();
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= g as isize || cc >= g as isize {
                        continue;
                    }
                    let mut count = occupancy[rr as usize * g + cc as usize];
                    if dr == 0 && dc == 0 {
                        count -= 1.0;
                    }
                    obs.set(slot, ((dr + 1) * 3 + dc + 1) as usize, count);
                }
            }
            obs.set(slot, 9, r as f64 / (g - 1) as f64);
            obs.set(slot, 10, c as f64 / (g - 1) as f64);
            obs.set(slot, 11 + TURNS.iter().position(|t| *t == car.turn).unwrap(), 1.0);
            obs.set(slot, 14 + car.heading.index(), 1.0);
            obs.set(slot, 18, car.tau as f64 / self.config.max_steps as f64);
            obs.set(slot, 19, car.progress as f64 / car.path.len() as f64);
        }
        obs
    }

    fn emit(&self, rewards: Vec<f64>, collisions: usize) -> EnvStep {
        EnvStep {
            observations: self.observations(),
            rewards,
            done: self.done,
            active: self.cars.iter().map(Option::is_some).collect(),
            agent_ids: self.cars.iter().enumerate().map(|(s, c)| c.as_ref().map_or(u64::MAX - s as u64, |c| c.id)).collect(),
            info: StepInfo {
                captures: 0,
                collisions,
                success: !self.collided,
            },
        }
    }
}

impl Environment for TrafficJunction {
    fn n_agents(&self) -> usize {
        self.config.n_max_cars
    }

    fn obs_dim(&self) -> usize {
        TJ_OBS_DIM
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Result<EnvStep, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.cars.iter_mut().for_each(|c| *c = None);
        self.next_id = 0;
        self.t = 0;
        self.collided = false;
        self.done = false;
        self.started = true;
        Ok(self.emit(vec![0.0; self.config.n_max_cars], 0))
    }

    fn step(&mut self, actions: &[usize]) -> Result<EnvStep, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let n = self.config.n_max_cars;
        if actions.len() != n {
            return Err(EnvError::ActionCount { expected: n, got: actions.len() });
        }
        for (agent, &action) in actions.iter().enumerate() {
            if self.cars[agent].is_some() && action > TJ_BRAKE {
                return Err(EnvError::InvalidAction { agent, action, n_actions: 2 });
            }
        }
        let mut rewards = vec![0.0; n];
        let mut exited = Vec::new();
        for (slot, car) in self.cars.iter_mut().enumerate() {
            let Some(c) = car else { continue };
            c.tau += 1;
            rewards[slot] = -if self.config.time_scaled_cost {
                self.config.step_cost * c.tau as f64
            } else {
                self.config.step_cost
            };
            if actions[slot] == TJ_GAS {
                c.progress += 1;
                if c.progress == c.path.len() {
                    exited.push(slot);
                }
            }
        }
        for slot in exited {
            self.cars[slot] = None;
        }
        let g = self.config.grid_size;
        let mut occupancy = vec![0usize; g * g];
        for car in self.cars.iter().flatten() {
            let (r, c) = car.cell();
            occupancy[r * g + c] += 1;
        }
        let mut collisions = 0;
        for (slot, car) in self.cars.iter().enumerate() {
            if let Some(car) = car {
                let (r, c) = car.cell();
                if occupancy[r * g + c] > 1 {
                    rewards[slot] += self.config.collision_penalty;
                    collisions += 1;
                }
            }
        }
        self.collided |= collisions > 0;
        // Arrival draws happen every step so the random stream does not depend on
        // traffic.
        for &heading in &HEADINGS {
            let arrive = self.rng.random_bool(self.config.p_arrive);
            let turn = TURNS[self.rng.random_range(0..TURNS.len())];
            if arrive {
                self.spawn_car(heading, turn);
            }
        }
        self.t += 1;
        self.done = self.t >= self.config.max_steps;
        Ok(self.emit(rewards, collisions))
    }

    fn summary(&self) -> serde_json::Value {
        let cars: Vec<_> = self
            .cars
            .iter()
            .enumerate()
            .filter_map(|(slot, c)| {
                c.as_ref().map(|c| {
                    serde_json::json!({
                        "slot": slot, "id": c.id, "cell": c.cell(), "heading": c.heading,
                        "turn": c.turn, "tau": c.tau,
                    })
                })
            })
            .collect();
        serde_json::json!({ "t": self.t, "cars": cars, "collided": self.collided })
    }
}

/// Either benchmark, selected by configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvConfig {
    PredatorPrey(PredatorPreyConfig),
    TrafficJunction(TrafficJunctionConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        Ok(match self {
            EnvConfig::PredatorPrey(c) => Box::new(PredatorPrey::new(c.clone())?),
            EnvConfig::TrafficJunction(c) => Box::new(TrafficJunction::new(c.clone())?),
        })
    }
}

/// One line of a replay dump.
#[derive(Debug, Clone, Serialize)]
pub struct ReplayRecord {
    pub episode: usize,
    pub step: usize,
    pub state: serde_json::Value,
    pub actions: Vec<Option<usize>>,
    pub rewards: Vec<f64>,
    pub captures: usize,
    pub collisions: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pp() -> PredatorPrey {
        PredatorPrey::new(PredatorPreyConfig::desk()).unwrap()
    }

    #[test]
    fn pp_reset_is_deterministic_and_well_formed() {
        let (mut a, mut b) = (pp(), pp());
        let sa = a.reset(11).unwrap();
        assert_eq!(sa, b.reset(11).unwrap());
        assert_eq!(sa.observations.shape(), (4, 20));
        let prey = a.prey();
        assert_eq!(prey.len(), 2);
        assert_ne!(prey[0], prey[1]);
        assert!(prey.iter().all(|p| !a.predators().contains(p)));
    }

    #[test]
    fn pp_observation_encodes_neighbourhood() {
        let mut env = pp();
        let s = env.set_state(vec![(2, 2), (2, 3), (5, 5), (0, 0)], vec![(1, 1), (4, 4)]).unwrap();
        let o = s.observations.row(0);
        // Predator 1 is east of predator 0: centre row, right column.
        assert_eq!(o[5], 1.0);
        // Prey (1, 1) is north-west.
        assert_eq!(o[9], 1.0);
        assert_eq!(o.iter().take(18).sum::<f64>(), 2.0);
        assert_eq!(o[18], 0.4);
        assert_eq!(o[19], 0.4);
    }

    #[test]
    fn pp_walls_clamp() {
        let mut env = pp();
        env.set_state(vec![(0, 0), (5, 5), (3, 3), (3, 3)], vec![(1, 4)]).unwrap();
        env.step(&[0, 1, 4, 4]).unwrap();
        assert_eq!(env.predators()[0], (0, 0));
        assert_eq!(env.predators()[1], (5, 5));
    }

    #[test]
    fn pp_capture_rules() {
        let mut env = pp();
        env.set_state(vec![(0, 1), (1, 0), (5, 5), (4, 4)], vec![(1, 1), (3, 3)]).unwrap();
        let s = env.step(&[1, 3, PP_STAY, PP_STAY]).unwrap();
        assert_eq!(s.rewards, vec![0.3 - 0.1, 0.3 - 0.1, -0.1, -0.1]);
        assert_eq!(s.info.captures, 1);
        assert_eq!(env.prey(), vec![(3, 3)]);

        env.set_state(vec![(3, 3), (3, 3), (3, 3), (0, 0)], vec![(3, 3), (5, 5)]).unwrap();
        let s = env.step(&[PP_STAY; 4]).unwrap();
        assert_eq!(s.rewards, vec![-0.1; 4]);
        assert_eq!(env.prey().len(), 2);

        env.set_state(vec![(0, 0), (0, 1), (0, 2), (0, 3)], vec![(5, 5)]).unwrap();
        let s = env.step(&[PP_STAY; 4]).unwrap();
        assert_eq!(s.rewards, vec![-0.1; 4]);
    }

    #[test]
    fn pp_episode_ends_when_prey_gone_or_time_up() {
        let mut env = pp();
        env.set_state(vec![(1, 1), (1, 1), (0, 0), (0, 0)], vec![(1, 1)]).unwrap();
        let s = env.step(&[PP_STAY; 4]).unwrap();
        assert!(s.done && s.info.success);
        assert_eq!(env.step(&[PP_STAY; 4]), Err(EnvError::EpisodeOver));

        env.reset(3).unwrap();
        let mut steps = 0;
        loop {
            steps += 1;
            if env.step(&[PP_STAY; 4]).unwrap().done {
                break;
            }
        }
        assert_eq!(steps, 30);
    }

    #[test]
    fn pp_rejects_bad_input() {
        let mut env = pp();
        env.reset(0).unwrap();
        assert!(matches!(env.step(&[0, 0, 0, 5]), Err(EnvError::InvalidAction { agent: 3, .. })));
        assert!(matches!(env.step(&[0]), Err(EnvError::ActionCount { .. })));
        let mut cfg = PredatorPreyConfig::desk();
        cfg.n_predators = 1;
        assert!(PredatorPrey::new(cfg).is_err());
        let mut cfg = PredatorPreyConfig::desk();
        cfg.grid_size = 2;
        cfg.n_predators = 4;
        cfg.n_prey = 3;
        // Four predators may leave fewer than three free cells.
        let mut env = PredatorPrey::new(cfg).unwrap();
        assert!((0..50).any(|s| env.reset(s).is_err()));
    }

    fn quiet_tj() -> TrafficJunction {
        let mut cfg = TrafficJunctionConfig::desk();
        cfg.p_arrive = 1e-12;
        let mut env = TrafficJunction::new(cfg).unwrap();
        env.reset(0).unwrap();
        env
    }

    #[test]
    fn routes_have_expected_lengths_and_are_connected() {
        for h in HEADINGS {
            for t in TURNS {
                let r = route_cells(18, h, t);
                let want = match t {
                    Turn::Straight => 18,
                    Turn::Right => 17,
                    Turn::Left => 19,
                };
                assert_eq!(r.len(), want, "{h:?} {t:?}");
                for w in r.windows(2) {
                    let d = w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1);
                    assert_eq!(d, 1);
                }
                let last = *r.last().unwrap();
                assert!(last.0 == 0 || last.0 == 17 || last.1 == 0 || last.1 == 17);
            }
        }
    }

    #[test]
    fn tj_reset_is_empty() {
        let mut env = TrafficJunction::new(TrafficJunctionConfig::full()).unwrap();
        let s = env.reset(5).unwrap();
        assert!(s.active.iter().all(|a| !a));
        assert!(s.observations.as_slice().iter().all(|x| *x == 0.0));
        assert!(s.info.success);
    }

    #[test]
    fn tj_single_car_pays_triangular_cost() {
        let mut env = quiet_tj();
        let slot = env.spawn_car(Heading::East, Turn::Left).unwrap();
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let s = env.step(&[TJ_GAS; 10]).unwrap();
            total += s.rewards[slot];
            steps += 1;
            assert_eq!(s.info.collisions, 0);
            if !s.active[slot] {
                break;
            }
        }
        assert_eq!(steps, 19);
        let want = -0.01 * (1..=19).sum::<usize>() as f64;
        assert!((total - want).abs() < 1e-12);
    }

    #[test]
    fn tj_collision_penalises_both_cars() {
        let mut env = quiet_tj();
        let south = env.spawn_car(Heading::South, Turn::Straight).unwrap();
        env.step(&[TJ_GAS; 10]).unwrap();
        let east = env.spawn_car(Heading::East, Turn::Straight).unwrap();
        let mut last = None;
        for _ in 0..8 {
            last = Some(env.step(&[TJ_GAS; 10]).unwrap());
        }
        let s = last.unwrap();
        assert_eq!(env.car_cell(south), Some((9, 8)));
        assert_eq!(env.car_cell(east), Some((9, 8)));
        assert_eq!(s.info.collisions, 2);
        assert!((s.rewards[south] - (-10.0 - 0.09)).abs() < 1e-12);
        assert!((s.rewards[east] - (-10.0 - 0.08)).abs() < 1e-12);
        assert!(!s.info.success);
        // Both stay active and success never comes back.
        assert!(s.active[south] && s.active[east]);
        let s = env.step(&[TJ_GAS; 10]).unwrap();
        assert!(!s.info.success);
    }

    #[test]
    fn tj_brake_holds_and_inactive_actions_are_ignored() {
        let mut env = quiet_tj();
        let slot = env.spawn_car(Heading::North, Turn::Right).unwrap();
        let mut actions = [7; 10];
        actions[slot] = TJ_BRAKE;
        env.step(&actions).unwrap();
        assert_eq!(env.car_cell(slot), Some((17, 9)));
        actions[slot] = 2;
        assert!(matches!(env.step(&actions), Err(EnvError::InvalidAction { .. })));
    }

    #[test]
    fn tj_capacity_and_determinism() {
        let mut cfg = TrafficJunctionConfig::desk();
        cfg.p_arrive = 0.9;
        let mut a = TrafficJunction::new(cfg.clone()).unwrap();
        let mut b = TrafficJunction::new(cfg).unwrap();
        a.reset(9).unwrap();
        b.reset(9).unwrap();
        loop {
            let sa = a.step(&[TJ_BRAKE; 10]).unwrap();
            let sb = b.step(&[TJ_BRAKE; 10]).unwrap();
            assert_eq!(sa, sb);
            assert!(a.n_active() <= 10);
            assert!(sa.observations.as_slice().iter().all(|x| x.is_finite()));
            if sa.done {
                break;
            }
        }
        assert!(TrafficJunction::new(TrafficJunctionConfig { p_arrive: 0.0, ..TrafficJunctionConfig::desk() }).is_err());
    }
}
