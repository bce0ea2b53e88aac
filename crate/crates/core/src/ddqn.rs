//! Double deep Q-network: epsilon-greedy selection with the online net,
//! bootstrapped targets evaluated by a periodically synced target net.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::DdqnConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, Batch, Mlp};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopTransition<T> {
    pub state: Vec<T>,
    pub action: usize,
    pub reward: T,
    pub next_state: Vec<T>,
    /// Episode ended by arrival; a step-budget cut is not terminal and still bootstraps.
    pub terminal: bool,
    pub uav_id: usize,
}

/// Exponential per-episode decay from `init` to the `final_` floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub init: f64,
    pub final_: f64,
    /// Episode at which the floor is reached.
    pub floor_episode: f64,
}

impl EpsilonSchedule {
    pub fn new(cfg: &DdqnConfig, total_episodes: usize) -> Self {
        EpsilonSchedule {
            init: cfg.epsilon_init,
            final_: cfg.epsilon_final,
            floor_episode: (cfg.epsilon_decay_fraction * total_episodes as f64).max(1.0),
        }
    }

    pub fn at(&self, episode: usize) -> f64 {
        if self.init <= self.final_ || self.final_ <= 0.0 {
            return self.init.max(self.final_);
        }
        let rate = (self.final_ / self.init).powf(1.0 / self.floor_episode);
        (self.init * rate.powf(episode as f64)).max(self.final_)
    }
}

fn argmax<T: Scalar>(q: &[T]) -> usize {
    // ties resolve to the lowest index (Remain for the association agent)
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdqnAgent<T> {
    pub eval: Mlp<T>,
    pub target: Mlp<T>,
    pub adam: Adam<T>,
    pub gamma: T,
    pub sync_period: u64,
    pub schedule: EpsilonSchedule,
    pub epsilon: f64,
    pub updates: u64,
}

impl<T: Scalar> DdqnAgent<T> {
    pub fn new<R: Rng + ?Sized>(
        cfg: &DdqnConfig,
        state_dim: usize,
        n_actions: usize,
        total_episodes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(n_actions);
        let eval = Mlp::new(&sizes, rng)?;
        let target = eval.clone();
        let schedule = EpsilonSchedule::new(cfg, total_episodes);
        Ok(DdqnAgent {
            adam: Adam::for_net(&eval, cfg.learning_rate),
            eval,
            target,
            gamma: T::lit(cfg.gamma),
            sync_period: cfg.sync_period,
            epsilon: schedule.at(0),
            schedule,
            updates: 0,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.eval.output_dim()
    }

    pub fn set_episode(&mut self, episode: usize) {
        self.epsilon = self.schedule.at(episode);
    }

    pub fn q_values(&self, state: &[T]) -> Result<Vec<T>> {
        self.eval.predict(state)
    }

    /// Epsilon-greedy when `explore`, otherwise greedy; ties pick action 0.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &[T], explore: bool, rng: &mut R) -> Result<usize> {
        if explore {
            let u: f64 = rng.random();
            if u < self.epsilon {
                return Ok(rng.random_range(0..self.n_actions()));
            }
        }
        Ok(argmax(&self.q_values(state)?))
    }

    /// `y = r + gamma * Q'(s', argmax_a Q(s', a))`, or `r` at episode end.
    pub fn td_target(&self, tr: &TopTransition<T>) -> Result<T> {
        Ok(self.td_targets(&[tr])?[0])
    }

    pub fn td_targets(&self, batch: &[&TopTransition<T>]) -> Result<Vec<T>> {
        let next = Batch::from_rows(&batch.iter().map(|t| t.next_state.as_slice()).collect::<Vec<_>>())?;
        let q_online = self.eval.predict_batch(&next)?;
        let q_target = self.target.predict_batch(&next)?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if t.terminal {
                    t.reward
                } else {
                    let a_hat = argmax(q_online.row(i));
                    t.reward + self.gamma * q_target.get(i, a_hat)
                }
            })
            .collect())
    }

    /// Mean squared TD error and its gradient w.r.t. the online parameters.
    pub fn loss_and_grad(&self, batch: &[&TopTransition<T>], targets: &[T]) -> Result<(T, Vec<T>)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let states = Batch::from_rows(&batch.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>())?;
        let (q, cache) = self.eval.forward_batch(&states)?;
        let n = T::lit(batch.len() as f64);
        let two = T::lit(2.0);
        let mut g = Batch::zeros(q.rows, q.cols);
        let mut loss = T::zero();
        for (i, (t, &y)) in batch.iter().zip(targets).enumerate() {
            if t.action >= q.cols {
                return Err(Error::Domain(format!("action {} out of range", t.action)));
            }
            let err = q.get(i, t.action) - y;
            loss = loss + err * err;
            g.row_mut(i)[t.action] = two * err / n;
        }
        let grads = self.eval.param_grads(&cache, &g)?;
        Ok((loss / n, grads))
    }

    /// One Adam step on the online network; the target network is untouched.
    pub fn train_batch(&mut self, batch: &[&TopTransition<T>]) -> Result<T> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let targets = self.td_targets(batch)?;
        let (loss, grads) = self.loss_and_grad(batch, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Training("non-finite DDQN loss".into()));
        }
        self.adam.step_net(&mut self.eval, &grads)?;
        self.updates += 1;
        Ok(loss)
    }

    /// Hard-copy the online weights into the target every `sync_period` steps.
    pub fn maybe_sync_target(&mut self, global_step: u64) -> bool {
        if self.sync_period > 0 && global_step.is_multiple_of(self.sync_period) {
            self.target.copy_params_from(&self.eval);
            true
        } else {
            false
        }
    }
}
