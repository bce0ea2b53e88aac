//! The interleaved two-level training loop, evaluation rollouts and
//! checkpointing.
//!
//! Every UAV acts round-robin inside one time step and feeds the same replay
//! buffers and networks (centralized training); each UAV decides from its own
//! observation only (decentralized execution). A single ChaCha stream drives
//! every random choice, so a run is a pure function of its config and seed.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{straight_line_direction, LowRule, PolicyKind, TopRule, DIRECT_RL_DIRECTIONS};
use crate::config::{Precision, RunConfig};
use crate::csac::{CsacAgent, LowTransition};
use crate::ddqn::{DdqnAgent, TopTransition};
use crate::env::{TopAction, UavEnv, STATE_DIM};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::metrics::{aggregate, MetricSummary, TraceRow, SUMMARY_SCHEMA_VERSION, TRACE_SCHEMA_VERSION};
use crate::replay::ReplayBuffer;
use crate::scalar::Scalar;
use crate::scenario::{deploy_scenario, World};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Window of simulation start times drawn per episode, seconds.
const START_TIME_SPAN_S: f64 = 1000.0;

/// The learnable parts of a policy; absent parts are rule-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agents<T> {
    pub top: Option<DdqnAgent<T>>,
    pub low: Option<CsacAgent<T>>,
    /// Flat agent of the direct-RL baseline.
    pub flat: Option<DdqnAgent<T>>,
}

impl<T: Scalar> Agents<T> {
    pub fn new<R: Rng + ?Sized>(kind: PolicyKind, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let episodes = cfg.train.episodes;
        let top = match kind.top() {
            TopRule::Ddqn => Some(DdqnAgent::new(&cfg.ddqn, STATE_DIM, 2, episodes, rng)?),
            TopRule::Greedy(_) => None,
        };
        let (low, flat) = match kind.low() {
            LowRule::Csac | LowRule::Sac => {
                let mut c = cfg.csac.clone();
                c.constrained = kind.low() == LowRule::Csac && c.constrained;
                (Some(CsacAgent::new(&c, STATE_DIM, rng)?), None)
            }
            LowRule::StraightLine => (None, None),
            LowRule::DirectRl => {
                (None, Some(DdqnAgent::new(&cfg.ddqn, STATE_DIM, DIRECT_RL_DIRECTIONS.len(), episodes, rng)?))
            }
        };
        Ok(Agents { top, low, flat })
    }

    fn check(&self, kind: PolicyKind) -> Result<()> {
        let missing = |what: &str| Err(Error::Config(format!("policy {kind} needs a trained {what} agent")));
        if kind.top() == TopRule::Ddqn && self.top.is_none() {
            return missing("association");
        }
        match kind.low() {
            LowRule::Csac | LowRule::Sac if self.low.is_none() => missing("flight"),
            LowRule::DirectRl if self.flat.is_none() => missing("direct-RL"),
            _ => Ok(()),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    /// Extrinsic return, averaged over UAVs.
    pub top_return: f64,
    /// Intrinsic return, averaged over UAVs.
    pub low_return: f64,
    pub steps: usize,
    pub switches: usize,
    pub avg_rate_bps: f64,
    pub qos_ratio: f64,
    pub arrived: usize,
    pub epsilon: Option<f64>,
    pub ddqn_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda_qos: Option<f64>,
    pub lambda_bnd: Option<f64>,
}

pub fn write_training_log(path: &Path, logs: &[EpisodeLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState<T> {
    pub kind: PolicyKind,
    pub config: RunConfig,
    pub agents: Agents<T>,
    /// Association transitions (or flat direct-RL transitions).
    pub top_buffer: ReplayBuffer<TopTransition<T>>,
    pub low_buffer: ReplayBuffer<LowTransition<T>>,
    pub rng: ChaCha8Rng,
    pub next_episode: usize,
    pub global_step: u64,
    pub logs: Vec<EpisodeLog>,
}

#[derive(Serialize)]
struct CheckpointOut<'a, T> {
    version: u32,
    precision: Precision,
    state: &'a TrainerState<T>,
}

#[derive(Deserialize)]
struct CheckpointIn<T> {
    version: u32,
    precision: Precision,
    state: TrainerState<T>,
}

#[derive(Deserialize)]
struct CheckpointHeader {
    version: u32,
    precision: Precision,
}

/// Version and precision of a checkpoint without loading its payload.
pub fn peek_checkpoint(path: &Path) -> Result<(u32, Precision)> {
    let text = fs::read(path)?;
    let h: CheckpointHeader = serde_json::from_slice(&text)?;
    Ok((h.version, h.precision))
}

#[derive(Default)]
struct LossTally {
    ddqn: (f64, usize),
    critic: (f64, usize),
    actor: (f64, usize),
}

impl LossTally {
    fn mean(x: (f64, usize)) -> Option<f64> {
        (x.1 > 0).then(|| x.0 / x.1 as f64)
    }
}

/// Buffers and counters that only exist while learning.
struct Learner<'a, T> {
    top_buffer: &'a mut ReplayBuffer<TopTransition<T>>,
    low_buffer: &'a mut ReplayBuffer<LowTransition<T>>,
    global_step: &'a mut u64,
    tally: LossTally,
}

/// Per-UAV result of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct UavEpisode {
    pub uav_id: usize,
    pub top_return: f64,
    pub low_return: f64,
    pub steps: usize,
    pub switches: usize,
    pub cumulative_rate: f64,
    pub qos_steps: usize,
    pub arrived: bool,
}

impl UavEpisode {
    pub fn summary(&self, policy: PolicyKind, episode: usize, dt_s: f64) -> MetricSummary {
        let n = self.steps.max(1) as f64;
        MetricSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            policy: policy.name().to_string(),
            episode: Some(episode),
            uav_id: Some(self.uav_id),
            runs: 1,
            avg_link_rate_bps: self.cumulative_rate / n,
            switch_count: self.switches as f64,
            qos_satisfaction_ratio: self.qos_steps as f64 / n,
            flight_time_s: self.steps as f64 * dt_s,
        }
    }
}

struct Pending<T> {
    state: Vec<T>,
    action: usize,
    reward: T,
}

fn lit_costs<T: Scalar>(c: [f64; 2]) -> Vec<T> {
    c.iter().map(|&v| T::lit(v)).collect()
}

/// Roll out one episode for every configured UAV, learning when `learner` is given.
#[allow(clippy::too_many_arguments)]
fn run_episode<T: Scalar>(
    world: &Arc<World>,
    cfg: &RunConfig,
    kind: PolicyKind,
    agents: &mut Agents<T>,
    mut learner: Option<&mut Learner<'_, T>>,
    rng: &mut ChaCha8Rng,
    episode: usize,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Vec<UavEpisode>> {
    let train = learner.is_some();
    let env_cfg = &cfg.env;
    let bounds = env_cfg.rate_bounds()?;
    let hold = cfg.train.hold_steps.max(1);
    if env_cfg.uavs.is_empty() {
        return Err(Error::Config("no UAV missions configured".into()));
    }
    if let Some(top) = agents.top.as_mut() {
        top.set_episode(episode);
    }
    if let Some(flat) = agents.flat.as_mut() {
        flat.set_episode(episode);
    }

    let t0 = rng.random_range(0.0..START_TIME_SPAN_S);
    let mut envs = Vec::with_capacity(env_cfg.uavs.len());
    for m in &env_cfg.uavs {
        let j = env_cfg.start_jitter_m;
        let start = if j > 0.0 {
            world.bounds().clamp(m.start + Vec3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), 0.0))
        } else {
            m.start
        };
        let (env, _) = UavEnv::reset(world.clone(), env_cfg, start, m.goal, t0, rng.random())?;
        envs.push(env);
    }
    let n_uav = envs.len();
    let mut results: Vec<UavEpisode> = (0..n_uav)
        .map(|u| UavEpisode {
            uav_id: u,
            top_return: 0.0,
            low_return: 0.0,
            steps: 0,
            switches: 0,
            cumulative_rate: 0.0,
            qos_steps: 0,
            arrived: false,
        })
        .collect();
    let mut pending: Vec<Option<Pending<T>>> = (0..n_uav).map(|_| None).collect();

    while envs.iter().any(|e| !e.is_done()) {
        for u in 0..n_uav {
            let env = &mut envs[u];
            if env.is_done() {
                continue;
            }
            let step = env.counters().step_count;

            // association level
            let mut r_top = 0.0;
            let mut switched = false;
            if step % hold == 0 {
                let before = env.state().serving;
                let s_top: Vec<T> = env.state().features(world, &bounds);
                match kind.top() {
                    TopRule::Ddqn => {
                        let agent = agents.top.as_ref().expect("checked");
                        let a = agent.select_action(&s_top, train, rng)?;
                        let (_, r) = env.apply_top_action(TopAction::from_index(a))?;
                        pending[u] = Some(Pending { state: s_top, action: a, reward: T::lit(r) });
                        r_top = r;
                    }
                    TopRule::Greedy(rule) => {
                        let bs = rule
                            .select(env.measurements(), &env_cfg.allowed_networks)
                            .ok_or_else(|| Error::Config("no cell in the allowed networks".into()))?;
                        r_top = env.apply_association(bs);
                    }
                }
                switched = env.state().serving != before;
            }

            // flight level
            let low_state = env.state();
            let s_low: Vec<T> = low_state.features(world, &bounds);
            let goal_dir = env.goal_direction();
            let mut sampled = None;
            let mut flat_action = None;
            let direction = match kind.low() {
                LowRule::Csac | LowRule::Sac => {
                    let agent = agents.low.as_ref().expect("checked");
                    if train {
                        let (dir, _, u_act, z) = agent.sample_action(&s_low, goal_dir, rng)?;
                        sampled = Some((u_act, z));
                        dir
                    } else {
                        agent.mean_action(&s_low, goal_dir)?
                    }
                }
                LowRule::StraightLine => straight_line_direction(low_state.pos, env.goal()).unwrap_or(goal_dir),
                LowRule::DirectRl => {
                    let agent = agents.flat.as_ref().expect("checked");
                    let a = agent.select_action(&s_low, train, rng)?;
                    flat_action = Some(a);
                    DIRECT_RL_DIRECTIONS[a]
                }
            };
            let out = env.apply_low_action(direction)?;
            let s_next: Vec<T> = out.next_state.features(world, &bounds);
            let violations = out.cost.violations();

            let res = &mut results[u];
            res.top_return += r_top;
            res.low_return += out.reward;
            res.steps += 1;
            res.switches += usize::from(switched);
            res.cumulative_rate += out.info.rate_bps;
            res.qos_steps += usize::from(out.info.rate_bps >= env_cfg.r_req_bps);
            res.arrived |= out.info.arrived;

            if let Some(rows) = trace.as_deref_mut() {
                let m = env.measurement(out.next_state.serving);
                rows.push(TraceRow {
                    schema_version: TRACE_SCHEMA_VERSION,
                    episode,
                    step,
                    uav_id: u,
                    x: out.next_state.pos.x,
                    y: out.next_state.pos.y,
                    z: out.next_state.pos.z,
                    serving_bs: out.next_state.serving.0,
                    network_kind: out.next_state.serving_kind.label().to_string(),
                    sinr_db: 10.0 * m.sinr_linear.log10(),
                    rate_bps: out.info.rate_bps,
                    switched,
                    r_top,
                    r_low: out.reward,
                    c_qos: out.cost.qos,
                    c_bnd: out.cost.boundary,
                    done: out.done,
                });
            }

            let Some(l) = learner.as_deref_mut() else { continue };
            if (step + 1) % hold == 0 || out.done {
                if let Some(p) = pending[u].take() {
                    l.top_buffer.push(TopTransition {
                        state: p.state,
                        action: p.action,
                        reward: p.reward,
                        next_state: s_next.clone(),
                        terminal: out.info.arrived,
                        uav_id: u,
                    });
                }
            }
            if let Some((u_act, z)) = sampled {
                l.low_buffer.push(LowTransition {
                    state: s_low.clone(),
                    action: u_act,
                    pre_squash: z,
                    direction,
                    reward: T::lit(out.reward),
                    costs: lit_costs(violations),
                    next_state: s_next.clone(),
                    terminal: out.info.arrived,
                    uav_id: u,
                });
            }
            if let Some(a) = flat_action {
                // constraints folded into the reward as fixed penalties
                let r = out.reward - violations[0] - violations[1];
                l.top_buffer.push(TopTransition {
                    state: s_low,
                    action: a,
                    reward: T::lit(r),
                    next_state: s_next,
                    terminal: out.info.arrived,
                    uav_id: u,
                });
            }

            *l.global_step += 1;
            let gs = *l.global_step;
            let q_agent = agents.top.as_mut().or(agents.flat.as_mut());
            if let Some(agent) = q_agent {
                if let Some(batch) = l.top_buffer.sample(cfg.ddqn.batch_size, rng) {
                    let loss = agent.train_batch(&batch)?;
                    l.tally.ddqn.0 += loss.as_f64();
                    l.tally.ddqn.1 += 1;
                }
                agent.maybe_sync_target(gs);
            }
            if let Some(agent) = agents.low.as_mut() {
                if let Some(batch) = l.low_buffer.sample(cfg.csac.batch_size, rng) {
                    let stats = agent.update_cycle(&batch, rng)?;
                    l.tally.critic.0 += 0.5 * (stats.critic_losses[0] + stats.critic_losses[1]).as_f64();
                    l.tally.critic.1 += 1;
                    l.tally.actor.0 += stats.actor_loss.as_f64();
                    l.tally.actor.1 += 1;
                }
            }
        }
    }
    Ok(results)
}

/// A training run over a fixed world.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    world: Arc<World>,
    pub state: TrainerState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(kind: PolicyKind, config: RunConfig) -> Result<Self> {
        config.validate()?;
        config.env.rate_bounds()?;
        let world = Arc::new(deploy_scenario(&config.scenario)?);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let agents = Agents::new(kind, &config, &mut rng)?;
        let state = TrainerState {
            kind,
            top_buffer: ReplayBuffer::new(config.ddqn.buffer_capacity),
            low_buffer: ReplayBuffer::new(config.csac.buffer_capacity),
            config,
            agents,
            rng,
            next_episode: 0,
            global_step: 0,
            logs: Vec::new(),
        };
        Ok(Trainer { world, state })
    }

    pub fn from_state(state: TrainerState<T>) -> Result<Self> {
        state.config.validate()?;
        let world = Arc::new(deploy_scenario(&state.config.scenario)?);
        Ok(Trainer { world, state })
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn is_finished(&self) -> bool {
        self.state.next_episode >= self.state.config.train.episodes
    }

    /// Train one episode and append its log row.
    pub fn train_episode(&mut self, trace: Option<&mut Vec<TraceRow>>) -> Result<EpisodeLog> {
        let st = &mut self.state;
        st.agents.check(st.kind)?;
        let episode = st.next_episode;
        let mut learner = Learner {
            top_buffer: &mut st.top_buffer,
            low_buffer: &mut st.low_buffer,
            global_step: &mut st.global_step,
            tally: LossTally::default(),
        };
        let results = run_episode(
            &self.world,
            &st.config,
            st.kind,
            &mut st.agents,
            Some(&mut learner),
            &mut st.rng,
            episode,
            trace,
        )?;
        let tally = learner.tally;
        let n = results.len() as f64;
        let steps: usize = results.iter().map(|r| r.steps).sum();
        let low = st.agents.low.as_ref();
        let q_agent = st.agents.top.as_ref().or(st.agents.flat.as_ref());
        let log = EpisodeLog {
            episode,
            top_return: results.iter().map(|r| r.top_return).sum::<f64>() / n,
            low_return: results.iter().map(|r| r.low_return).sum::<f64>() / n,
            steps,
            switches: results.iter().map(|r| r.switches).sum(),
            avg_rate_bps: results.iter().map(|r| r.cumulative_rate).sum::<f64>() / steps.max(1) as f64,
            qos_ratio: results.iter().map(|r| r.qos_steps).sum::<usize>() as f64 / steps.max(1) as f64,
            arrived: results.iter().filter(|r| r.arrived).count(),
            epsilon: q_agent.map(|a| a.epsilon),
            ddqn_loss: LossTally::mean(tally.ddqn),
            critic_loss: LossTally::mean(tally.critic),
            actor_loss: LossTally::mean(tally.actor),
            alpha: low.map(|a| a.alpha().as_f64()),
            lambda_qos: low.and_then(|a| a.multipliers.first()).map(|l| l.as_f64()),
            lambda_bnd: low.and_then(|a| a.multipliers.get(1)).map(|l| l.as_f64()),
        };
        st.logs.push(log.clone());
        st.next_episode += 1;
        Ok(log)
    }

    /// Train until the configured episode budget is spent (or `limit` more episodes).
    ///
    /// A non-finite loss stops the run; the state at that point is written to
    /// `diagnostic` when given.
    pub fn train(&mut self, limit: Option<usize>, diagnostic: Option<&Path>) -> Result<()> {
        let mut done = 0;
        while !self.is_finished() && limit.is_none_or(|l| done < l) {
            match self.train_episode(None) {
                Ok(_) => done += 1,
                Err(e @ Error::Training(_)) => {
                    if let Some(p) = diagnostic {
                        self.save_checkpoint(p)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let precision = if std::mem::size_of::<T>() == 4 { Precision::F32 } else { Precision::F64 };
        Ok(serde_json::to_vec(&CheckpointOut { version: CHECKPOINT_VERSION, precision, state: &self.state })?)
    }

    /// Atomic write: the file either holds the complete new state or is untouched.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        let mut tmp_name = path.as_os_str().to_owned();
        tmp_name.push(".partial");
        let tmp = Path::new(&tmp_name);
        let mut f = fs::File::create(tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("corrupt checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: header.version, expected: CHECKPOINT_VERSION });
        }
        let want = if std::mem::size_of::<T>() == 4 { Precision::F32 } else { Precision::F64 };
        if header.precision != want {
            return Err(Error::Config(format!(
                "checkpoint holds {:?} parameters, loader expects {want:?}",
                header.precision
            )));
        }
        let ck: CheckpointIn<T> =
            serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("corrupt checkpoint: {e}")))?;
        debug_assert_eq!((ck.version, ck.precision), (header.version, header.precision));
        Self::from_state(ck.state)
    }
}

/// Result of an evaluation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_run: Vec<MetricSummary>,
    pub trace: Vec<TraceRow>,
}

/// Greedy rollouts: epsilon 0, mean flight action, no learning.
///
/// `agents` is only read; a composition such as max-SINR association over a
/// flight agent trained under DDQN is expressed by passing that `kind`.
pub fn evaluate<T: Scalar>(
    world: &Arc<World>,
    cfg: &RunConfig,
    kind: PolicyKind,
    agents: &Agents<T>,
    n_episodes: usize,
    seed: u64,
    keep_trace: bool,
) -> Result<Evaluation> {
    agents.check(kind)?;
    let mut local = agents.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_run = Vec::new();
    let mut trace = Vec::new();
    for ep in 0..n_episodes {
        let results = run_episode(world, cfg, kind, &mut local, None, &mut rng, ep, keep_trace.then_some(&mut trace))?;
        per_run.extend(results.iter().map(|r| r.summary(kind, ep, cfg.env.dt_s)));
    }
    Ok(Evaluation { per_run, trace })
}

/// Metrics of one policy in a comparison sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyResult {
    pub kind: PolicyKind,
    pub per_run: Vec<MetricSummary>,
    pub aggregate: MetricSummary,
}

/// Train every policy family `kinds` needs (once each), then evaluate all of
/// them on the same scenario draws.
///
/// `progress` sees every finished training episode.
pub fn compare<T: Scalar>(
    cfg: &RunConfig,
    kinds: &[PolicyKind],
    eval_episodes: usize,
    eval_seed: u64,
    mut progress: impl FnMut(PolicyKind, &EpisodeLog),
) -> Result<Vec<PolicyResult>> {
    let mut trained: Vec<(PolicyKind, Trainer<T>)> = Vec::new();
    for &kind in kinds {
        let src = kind.trained_with();
        if trained.iter().any(|(k, _)| *k == src) {
            continue;
        }
        let mut t = Trainer::<T>::new(src, cfg.clone())?;
        if src.is_trainable() {
            while !t.is_finished() {
                let log = t.train_episode(None)?;
                progress(src, &log);
            }
        }
        trained.push((src, t));
    }
    kinds
        .iter()
        .map(|&kind| {
            let (_, t) = trained.iter().find(|(k, _)| *k == kind.trained_with()).expect("trained above");
            let e = evaluate(t.world(), cfg, kind, &t.state.agents, eval_episodes, eval_seed, false)?;
            let aggregate = aggregate(kind.name(), &e.per_run)?;
            Ok(PolicyResult { kind, per_run: e.per_run, aggregate })
        })
        .collect()
}
