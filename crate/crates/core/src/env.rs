//! Two-timescale UAV environment: association decisions on top, flight
//! control below, with rewards, constraint costs and handover counting.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{measure_all, LinkMeasurement};
use crate::config::{EnvConfig, NetworkKind, RateBounds};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scalar::Scalar;
use crate::scenario::{BsId, World};

/// Width of the agent-facing state encoding.
pub const STATE_DIM: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopAction {
    Remain,
    Switch,
}

impl TopAction {
    pub fn index(self) -> usize {
        match self {
            TopAction::Remain => 0,
            TopAction::Switch => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            TopAction::Remain
        } else {
            TopAction::Switch
        }
    }
}

/// `[b, R, q]`: serving cell, its rate and the UAV position.
///
/// Shared by both levels; the lower level sees it right after the top
/// level has fixed the association.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub serving: BsId,
    pub serving_kind: NetworkKind,
    pub rate_bps: f64,
    pub pos: Vec3,
}

pub type TopState = UavState;
pub type LowState = UavState;

impl UavState {
    /// Network one-hot, rate over `R_max`, position scaled to the unit cube.
    pub fn features<T: Scalar>(&self, world: &World, bounds: &RateBounds) -> Vec<T> {
        let b = world.bounds();
        let ext = b.extent();
        let mut f = vec![T::zero(); STATE_DIM];
        f[self.serving_kind.index()] = T::one();
        f[3] = T::lit(self.rate_bps / bounds.max_bps);
        let rel = self.pos - b.min;
        f[4] = T::lit(rel.x / ext.x);
        f[5] = T::lit(rel.y / ext.y);
        f[6] = T::lit(if ext.z > 0.0 { rel.z / ext.z } else { 0.0 });
        f
    }
}

/// Constraint costs as emitted by the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    /// `max(0, (R_req - R) / R_req)`.
    pub qos: f64,
    /// `0`, or `-eta_bnd` when the move left the box.
    pub boundary: f64,
}

impl CostVector {
    /// Non-negative violation magnitudes `[qos, boundary]` for the multiplier updates.
    pub fn violations(&self) -> [f64; 2] {
        [self.qos, -self.boundary]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub switched: bool,
    pub rate_bps: f64,
    pub distance_to_goal_m: f64,
    pub arrived: bool,
    pub clamped: bool,
    /// Direction actually flown after the goal-ward projection.
    pub flown_direction: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: LowState,
    pub reward: f64,
    pub cost: CostVector,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeCounters {
    pub switch_count: usize,
    pub step_count: usize,
    pub qos_satisfied_steps: usize,
    pub cumulative_rate: f64,
}

/// Count a handover iff the association changed.
pub fn record_transition_switch(counters: EpisodeCounters, b_prev: BsId, b_next: BsId) -> EpisodeCounters {
    EpisodeCounters { switch_count: counters.switch_count + usize::from(b_prev != b_next), ..counters }
}

/// Number of indices `n >= 1` with `seq[n] != seq[n - 1]`.
pub fn count_switches<I: PartialEq>(seq: &[I]) -> usize {
    seq.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Strongest-RSRP cell among the allowed networks.
pub fn strongest_cell(measurements: &[LinkMeasurement], allowed: &[NetworkKind]) -> Option<BsId> {
    argmax_by(measurements, allowed, |m| m.rsrp_dbm)
}

pub fn argmax_by(
    measurements: &[LinkMeasurement],
    allowed: &[NetworkKind],
    key: impl Fn(&LinkMeasurement) -> f64,
) -> Option<BsId> {
    let mut best: Option<(f64, BsId)> = None;
    for m in measurements.iter().filter(|m| allowed.contains(&m.kind)) {
        let k = key(m);
        if best.is_none_or(|(bk, _)| k > bk) {
            best = Some((k, m.bs_id));
        }
    }
    best.map(|(_, id)| id)
}

/// Best-RSRP cell of each allowed network, minus the serving cell.
pub fn candidate_set(measurements: &[LinkMeasurement], serving: BsId, allowed: &[NetworkKind]) -> Vec<BsId> {
    NetworkKind::ALL
        .iter()
        .filter(|k| allowed.contains(k))
        .filter_map(|&k| strongest_cell(measurements, &[k]))
        .filter(|&id| id != serving)
        .collect()
}

/// Keep `dir` if it has a positive goal-ward component, otherwise project
/// it onto the plane orthogonal to the goal direction.
pub fn project_goalward(dir: Vec3, pos: Vec3, goal: Vec3) -> Vec3 {
    let Some(g) = (goal - pos).normalized() else {
        return dir;
    };
    let along = dir.dot(g);
    if along > 0.0 {
        return dir;
    }
    (dir - g * along).normalized().unwrap_or(g)
}

/// One UAV's episode state over a shared immutable world.
#[derive(Debug, Clone)]
pub struct UavEnv {
    world: Arc<World>,
    cfg: EnvConfig,
    bounds: RateBounds,
    rng: ChaCha8Rng,
    pos: Vec3,
    goal: Vec3,
    serving: BsId,
    t: f64,
    d_max: f64,
    counters: EpisodeCounters,
    measurements: Vec<LinkMeasurement>,
    done: bool,
}

impl UavEnv {
    /// Start an episode at `start` heading for `goal`, clock at `t0`.
    ///
    /// The first association is the strongest-RSRP cell over all allowed networks.
    pub fn reset(
        world: Arc<World>,
        cfg: &EnvConfig,
        start: Vec3,
        goal: Vec3,
        t0: f64,
        seed: u64,
    ) -> Result<(Self, TopState)> {
        let bounds = cfg.rate_bounds()?;
        if !(bounds.max_bps > bounds.min_bps) {
            return Err(Error::Config("rate bounds need min < max".into()));
        }
        if start == goal {
            return Err(Error::Domain("start and goal coincide".into()));
        }
        if !world.bounds().contains(start) || !world.bounds().contains(goal) {
            return Err(Error::Domain("start or goal outside the world box".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let measurements = measure_all(&world, start, t0, &mut rng)?;
        let serving = strongest_cell(&measurements, &cfg.allowed_networks)
            .ok_or_else(|| Error::Config("no cell in the allowed networks".into()))?;
        let env = UavEnv {
            world,
            cfg: cfg.clone(),
            bounds,
            rng,
            pos: start,
            goal,
            serving,
            t: t0,
            d_max: start.distance(goal),
            counters: EpisodeCounters::default(),
            measurements,
            done: false,
        };
        let state = env.state();
        Ok((env, state))
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> UavState {
        UavState {
            serving: self.serving,
            serving_kind: self.world.cell(self.serving).kind,
            rate_bps: self.measurement(self.serving).rate_bps,
            pos: self.pos,
        }
    }

    pub fn measurements(&self) -> &[LinkMeasurement] {
        &self.measurements
    }

    pub fn measurement(&self, id: BsId) -> &LinkMeasurement {
        self.measurements.iter().find(|m| m.bs_id == id).expect("every cell is measured")
    }

    pub fn counters(&self) -> EpisodeCounters {
        self.counters
    }

    pub fn goal(&self) -> Vec3 {
        self.goal
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn rate_bounds(&self) -> RateBounds {
        self.bounds
    }

    /// Unit vector from the UAV towards its goal (fallback: +x).
    pub fn goal_direction(&self) -> Vec3 {
        (self.goal - self.pos).normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0))
    }

    fn normalized_rate(&self, rate: f64) -> f64 {
        (rate - self.bounds.min_bps) / (self.bounds.max_bps - self.bounds.min_bps)
    }

    pub fn candidates(&self) -> Vec<BsId> {
        candidate_set(&self.measurements, self.serving, &self.cfg.allowed_networks)
    }

    /// Force the association; returns whether it changed.
    pub fn associate(&mut self, bs: BsId) -> bool {
        let prev = self.serving;
        self.counters = record_transition_switch(self.counters, prev, bs);
        self.serving = bs;
        prev != bs
    }

    /// Resolve the top-level action and return `(b_{n+1}, extrinsic reward)`.
    ///
    /// `Switch` moves to the strongest candidate from [`candidate_set`].
    pub fn apply_top_action(&mut self, action: TopAction) -> Result<(BsId, f64)> {
        let target = match action {
            TopAction::Remain => self.serving,
            TopAction::Switch => {
                let cands = self.candidates();
                cands
                    .iter()
                    .copied()
                    .max_by(|a, b| self.measurement(*a).rsrp_dbm.total_cmp(&self.measurement(*b).rsrp_dbm))
                    .ok_or_else(|| Error::Internal("empty candidate set".into()))?
            }
        };
        Ok((target, self.apply_association(target)))
    }

    /// Associate with `bs` directly (greedy rules) and return the extrinsic reward.
    pub fn apply_association(&mut self, bs: BsId) -> f64 {
        let switched = self.associate(bs);
        let r_rate = self.normalized_rate(self.measurement(bs).rate_bps);
        let r_switch = if switched { -1.0 } else { 0.0 };
        self.cfg.lambda_rate * r_rate + self.cfg.lambda_switch * r_switch
    }

    /// Fly one step along the unit `direction`.
    pub fn apply_low_action(&mut self, direction: Vec3) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Domain("episode already finished".into()));
        }
        if !direction.is_finite() || (direction.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("action must be a unit vector, got {direction:?}")));
        }
        let flown = project_goalward(direction, self.pos, self.goal);
        let raw = self.pos + flown * (self.cfg.v_max_mps * self.cfg.dt_s);
        let next = self.world.bounds().clamp(raw);
        let clamped = next != raw;
        self.pos = next;
        self.t += self.cfg.dt_s;
        self.measurements = measure_all(&self.world, self.pos, self.t, &mut self.rng)?;

        let rate = self.measurement(self.serving).rate_bps;
        let d = self.pos.distance(self.goal);
        let r_rate = self.normalized_rate(rate);
        // D_min = 0
        let r_goal = (self.d_max - d) / self.d_max;
        let reward = self.cfg.lambda_rate * r_rate + self.cfg.lambda_goal * r_goal;
        let cost = CostVector {
            qos: ((self.cfg.r_req_bps - rate) / self.cfg.r_req_bps).max(0.0),
            boundary: if clamped { -self.cfg.eta_bnd } else { 0.0 },
        };

        let c = &mut self.counters;
        c.step_count += 1;
        c.cumulative_rate += rate;
        if rate >= self.cfg.r_req_bps {
            c.qos_satisfied_steps += 1;
        }
        let arrived = d <= self.cfg.arrival_radius();
        self.done = arrived || c.step_count >= self.cfg.max_steps;
        Ok(StepOutcome {
            next_state: self.state(),
            reward,
            cost,
            done: self.done,
            info: StepInfo {
                switched: false,
                rate_bps: rate,
                distance_to_goal_m: d,
                arrived,
                clamped,
                flown_direction: flown,
            },
        })
    }
}
