//! Lagrangian-constrained soft actor-critic for the flight controller.
//!
//! The actor emits a mean and a log-STD per raw action component; samples are
//! squashed through `tanh` and the executed command is their normalization to
//! a unit direction. Constraint costs enter the critic target through
//! non-negative multipliers that follow projected dual ascent.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::CsacConfig;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::nn::{Adam, Batch, Mlp};
use crate::scalar::Scalar;

/// Raw action width: one tanh output per axis.
pub const ACTION_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowTransition<T> {
    pub state: Vec<T>,
    /// Squashed sample `u = tanh(z)` the critics are trained on.
    pub action: [T; ACTION_DIM],
    pub pre_squash: [T; ACTION_DIM],
    /// Unit direction handed to the environment.
    pub direction: Vec3,
    pub reward: T,
    /// Violation-form costs, one per multiplier.
    pub costs: Vec<T>,
    pub next_state: Vec<T>,
    /// Episode ended by arrival; a step-budget cut is not terminal and still bootstraps.
    pub terminal: bool,
    pub uav_id: usize,
}

/// Squashed-Gaussian samples for a batch of actor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample<T> {
    pub noise: Batch<T>,
    pub pre_squash: Batch<T>,
    pub action: Batch<T>,
    pub log_prob: Vec<T>,
    /// Clipped log-STD actually used.
    pub log_std: Batch<T>,
    /// `false` where the raw log-STD sat outside the clip range.
    pub log_std_active: Vec<bool>,
}

/// `log(1 - tanh(z)^2)` without cancellation for large `|z|`.
fn log_one_minus_tanh_sq<T: Scalar>(z: T) -> T {
    let two = T::lit(2.0);
    let a = -two * z;
    // softplus(a) = max(a, 0) + ln(1 + e^{-|a|})
    let softplus = a.max(T::zero()) + (-a.abs()).exp().ln_1p();
    two * (T::lit(std::f64::consts::LN_2) - z - softplus)
}

/// Log-density of one squashed component given its noise and pre-squash value.
pub fn component_log_prob<T: Scalar>(noise: T, log_std: T, pre_squash: T) -> T {
    let half_ln_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    -T::lit(0.5) * noise * noise - log_std - half_ln_2pi - log_one_minus_tanh_sq(pre_squash)
}

/// Unit direction from a squashed action, goal-ward when it degenerates.
pub fn to_direction<T: Scalar>(action: &[T], goal_direction: Vec3) -> Vec3 {
    let v = Vec3::new(action[0].as_f64(), action[1].as_f64(), action[2].as_f64());
    match v.normalized() {
        Some(d) if v.norm() > 1e-12 => d,
        _ => goal_direction,
    }
}

fn draw_noise<T: Scalar, R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Batch<T> {
    let mut b = Batch::zeros(rows, ACTION_DIM);
    for v in &mut b.data {
        let x: f64 = rng.sample(StandardNormal);
        *v = T::lit(x);
    }
    b
}

fn concat<T: Scalar>(states: &Batch<T>, actions: &Batch<T>) -> Batch<T> {
    let mut out = Batch::zeros(states.rows, states.cols + actions.cols);
    for r in 0..states.rows {
        let row = out.row_mut(r);
        row[..states.cols].copy_from_slice(states.row(r));
        row[states.cols..].copy_from_slice(actions.row(r));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsacAgent<T> {
    pub actor: Mlp<T>,
    pub critics: [Mlp<T>; 2],
    pub targets: [Mlp<T>; 2],
    pub actor_adam: Adam<T>,
    pub critic_adams: [Adam<T>; 2],
    pub log_alpha: T,
    pub alpha_adam: Adam<T>,
    pub multipliers: Vec<T>,
    pub thresholds: Vec<T>,
    pub multiplier_lr: T,
    pub constrained: bool,
    pub gamma: T,
    pub tau: T,
    pub target_entropy: T,
    pub log_std_min: T,
    pub log_std_max: T,
}

/// Diagnostics of one full update cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsacStats<T> {
    pub critic_losses: [T; 2],
    pub actor_loss: T,
    pub alpha: T,
    pub mean_log_prob: T,
}

impl<T: Scalar> CsacAgent<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &CsacConfig, state_dim: usize, rng: &mut R) -> Result<Self> {
        if cfg.cost_thresholds.len() != cfg.init_multipliers.len() {
            return Err(Error::Config("one threshold per multiplier required".into()));
        }
        if cfg.init_multipliers.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("multipliers must start non-negative".into()));
        }
        if !(cfg.init_alpha > 0.0) {
            return Err(Error::Config("initial temperature must be positive".into()));
        }
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(2 * ACTION_DIM);
        let mut critic_sizes = vec![state_dim + ACTION_DIM];
        critic_sizes.extend(&cfg.hidden);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, rng)?;
        let critics = [Mlp::new(&critic_sizes, rng)?, Mlp::new(&critic_sizes, rng)?];
        let lit = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        Ok(CsacAgent {
            actor_adam: Adam::for_net(&actor, cfg.actor_lr),
            critic_adams: [Adam::for_net(&critics[0], cfg.critic_lr), Adam::for_net(&critics[1], cfg.critic_lr)],
            targets: critics.clone(),
            actor,
            critics,
            log_alpha: T::lit(cfg.init_alpha.ln()),
            alpha_adam: Adam::new(1, cfg.alpha_lr),
            multipliers: if cfg.constrained {
                lit(&cfg.init_multipliers)
            } else {
                vec![T::zero(); cfg.init_multipliers.len()]
            },
            thresholds: lit(&cfg.cost_thresholds),
            multiplier_lr: T::lit(cfg.multiplier_lr),
            constrained: cfg.constrained,
            gamma: T::lit(cfg.gamma),
            tau: T::lit(cfg.tau),
            target_entropy: T::lit(cfg.target_entropy),
            log_std_min: T::lit(cfg.log_std_min),
            log_std_max: T::lit(cfg.log_std_max),
        })
    }

    pub fn alpha(&self) -> T {
        self.log_alpha.exp()
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    /// Squash actor outputs with the given standard-normal noise.
    pub fn squash(&self, outputs: &Batch<T>, noise: &Batch<T>) -> PolicySample<T> {
        let rows = outputs.rows;
        let mut s = PolicySample {
            noise: noise.clone(),
            pre_squash: Batch::zeros(rows, ACTION_DIM),
            action: Batch::zeros(rows, ACTION_DIM),
            log_prob: vec![T::zero(); rows],
            log_std: Batch::zeros(rows, ACTION_DIM),
            log_std_active: vec![true; rows * ACTION_DIM],
        };
        for r in 0..rows {
            let out = outputs.row(r);
            let mut lp = T::zero();
            for j in 0..ACTION_DIM {
                let raw = out[ACTION_DIM + j];
                let c = raw.max(self.log_std_min).min(self.log_std_max);
                s.log_std_active[r * ACTION_DIM + j] = raw >= self.log_std_min && raw <= self.log_std_max;
                let xi = noise.get(r, j);
                let z = out[j] + c.exp() * xi;
                s.pre_squash.row_mut(r)[j] = z;
                s.action.row_mut(r)[j] = z.tanh();
                s.log_std.row_mut(r)[j] = c;
                lp = lp + component_log_prob(xi, c, z);
            }
            s.log_prob[r] = lp;
        }
        s
    }

    /// Reparameterized sample for one state: `(executed direction, log-prob, transition fields)`.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        state: &[T],
        goal_direction: Vec3,
        rng: &mut R,
    ) -> Result<(Vec3, T, [T; ACTION_DIM], [T; ACTION_DIM])> {
        let out = Batch { rows: 1, cols: 2 * ACTION_DIM, data: self.actor.predict(state)? };
        let s = self.squash(&out, &draw_noise(1, rng));
        let u: [T; ACTION_DIM] = s.action.row(0).try_into().expect("action width");
        let z: [T; ACTION_DIM] = s.pre_squash.row(0).try_into().expect("action width");
        Ok((to_direction(&u, goal_direction), s.log_prob[0], u, z))
    }

    /// Deterministic action `tanh(mu)` used at evaluation time.
    pub fn mean_action(&self, state: &[T], goal_direction: Vec3) -> Result<Vec3> {
        let out = self.actor.predict(state)?;
        let u: Vec<T> = out[..ACTION_DIM].iter().map(|m| m.tanh()).collect();
        Ok(to_direction(&u, goal_direction))
    }

    fn stack_states(batch: &[&LowTransition<T>], next: bool) -> Result<Batch<T>> {
        let rows: Vec<&[T]> =
            batch.iter().map(|t| if next { t.next_state.as_slice() } else { t.state.as_slice() }).collect();
        Batch::from_rows(&rows)
    }

    fn min_q(&self, nets: &[Mlp<T>; 2], input: &Batch<T>) -> Result<Vec<T>> {
        let q1 = nets[0].predict_batch(input)?;
        let q2 = nets[1].predict_batch(input)?;
        Ok(q1.data.iter().zip(&q2.data).map(|(&a, &b)| a.min(b)).collect())
    }

    /// `r - sum(lambda * c)`.
    pub fn penalized_reward(&self, tr: &LowTransition<T>) -> T {
        tr.costs.iter().zip(&self.multipliers).fold(tr.reward, |acc, (&c, &l)| acc - l * c)
    }

    /// Soft Bellman targets with next actions drawn from `noise`.
    pub fn soft_q_targets_with_noise(&self, batch: &[&LowTransition<T>], noise: &Batch<T>) -> Result<Vec<T>> {
        let next = Self::stack_states(batch, true)?;
        let sample = self.squash(&self.actor.predict_batch(&next)?, noise);
        let q = self.min_q(&self.targets, &concat(&next, &sample.action))?;
        let alpha = self.alpha();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let r = self.penalized_reward(t);
                if t.terminal {
                    r
                } else {
                    r + self.gamma * (q[i] - alpha * sample.log_prob[i])
                }
            })
            .collect())
    }

    pub fn soft_q_targets<R: Rng + ?Sized>(&self, batch: &[&LowTransition<T>], rng: &mut R) -> Result<Vec<T>> {
        self.soft_q_targets_with_noise(batch, &draw_noise(batch.len(), rng))
    }

    /// Per-critic MSE and parameter gradients against a shared target vector.
    pub fn critic_losses_and_grads(&self, batch: &[&LowTransition<T>], targets: &[T]) -> Result<[(T, Vec<T>); 2]> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let states = Self::stack_states(batch, false)?;
        let actions = Batch::from_rows(&batch.iter().map(|t| t.action.as_slice()).collect::<Vec<_>>())?;
        let input = concat(&states, &actions);
        let n = T::lit(batch.len() as f64);
        let two = T::lit(2.0);
        let mut out: Vec<(T, Vec<T>)> = Vec::with_capacity(2);
        for critic in &self.critics {
            let (q, cache) = critic.forward_batch(&input)?;
            let mut g = Batch::zeros(q.rows, 1);
            let mut loss = T::zero();
            for (i, &y) in targets.iter().enumerate() {
                let err = q.data[i] - y;
                loss = loss + err * err;
                g.data[i] = two * err / n;
            }
            let grads = critic.param_grads(&cache, &g)?;
            out.push((loss / n, grads));
        }
        let second = out.pop().expect("two critics");
        let first = out.pop().expect("two critics");
        Ok([first, second])
    }

    /// One Adam step on each critic; target networks are left alone.
    pub fn update_critics(&mut self, batch: &[&LowTransition<T>], targets: &[T]) -> Result<[T; 2]> {
        let [(l1, g1), (l2, g2)] = self.critic_losses_and_grads(batch, targets)?;
        if !l1.is_finite() || !l2.is_finite() {
            return Err(Error::Training("non-finite critic loss".into()));
        }
        self.critic_adams[0].step_net(&mut self.critics[0], &g1)?;
        self.critic_adams[1].step_net(&mut self.critics[1], &g2)?;
        Ok([l1, l2])
    }

    /// Actor objective `mean(alpha * log pi - min Q)` at fixed noise, its
    /// gradient, and the sample it was evaluated on.
    pub fn actor_loss_and_grad(
        &self,
        batch: &[&LowTransition<T>],
        noise: &Batch<T>,
    ) -> Result<(T, Vec<T>, PolicySample<T>)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let states = Self::stack_states(batch, false)?;
        let (out, actor_cache) = self.actor.forward_batch(&states)?;
        let sample = self.squash(&out, noise);
        let input = concat(&states, &sample.action);
        let (q1, c1) = self.critics[0].forward_batch(&input)?;
        let (q2, c2) = self.critics[1].forward_batch(&input)?;
        let rows = batch.len();
        let n = T::lit(rows as f64);
        let alpha = self.alpha();

        // route dL/dQ = -1/B through whichever critic is the minimum for that row
        let mut g1 = Batch::zeros(rows, 1);
        let mut g2 = Batch::zeros(rows, 1);
        let mut loss = T::zero();
        for i in 0..rows {
            let (q, g) = if q1.data[i] <= q2.data[i] { (q1.data[i], &mut g1) } else { (q2.data[i], &mut g2) };
            g.data[i] = -T::one() / n;
            loss = loss + alpha * sample.log_prob[i] - q;
        }
        let dq1 = self.critics[0].input_grads(&c1, &g1)?;
        let dq2 = self.critics[1].input_grads(&c2, &g2)?;

        let two = T::lit(2.0);
        let sd = self.state_dim();
        let mut g_out = Batch::zeros(rows, 2 * ACTION_DIM);
        for i in 0..rows {
            for j in 0..ACTION_DIM {
                let u = sample.action.get(i, j);
                let dz_dc = sample.log_std.get(i, j).exp() * sample.noise.get(i, j);
                // gradient of -min Q w.r.t. the pre-squash value (already scaled by 1/B)
                let dq_dz = (dq1.get(i, sd + j) + dq2.get(i, sd + j)) * (T::one() - u * u);
                let entropy_mu = alpha * two * u / n;
                let row = g_out.row_mut(i);
                row[j] = entropy_mu + dq_dz;
                row[ACTION_DIM + j] = if sample.log_std_active[i * ACTION_DIM + j] {
                    alpha * (-T::one() + two * u * dz_dc) / n + dq_dz * dz_dc
                } else {
                    T::zero()
                };
            }
        }
        let grads = self.actor.param_grads(&actor_cache, &g_out)?;
        Ok((loss / n, grads, sample))
    }

    /// `dL/d log(alpha)` for `L = mean(-alpha (H_target + log pi))`.
    pub fn temperature_grad(&self, log_probs: &[T]) -> T {
        let n = T::lit(log_probs.len().max(1) as f64);
        let mean = log_probs.iter().fold(T::zero(), |acc, &lp| acc + self.target_entropy + lp) / n;
        -self.alpha() * mean
    }

    pub fn update_temperature(&mut self, log_probs: &[T]) -> Result<T> {
        let g = self.temperature_grad(log_probs);
        let mut la = [self.log_alpha];
        self.alpha_adam.update(&mut la, &[g])?;
        self.log_alpha = la[0];
        Ok(self.alpha())
    }

    /// Projected dual ascent `lambda <- max(0, lambda + eta (mean c - d))`.
    pub fn update_multipliers(&mut self, mean_costs: &[T]) -> Result<()> {
        if mean_costs.len() != self.multipliers.len() {
            return Err(Error::Domain("cost vector length differs from multiplier count".into()));
        }
        if !self.constrained {
            return Ok(());
        }
        for ((l, &c), &d) in self.multipliers.iter_mut().zip(mean_costs).zip(&self.thresholds) {
            *l = (*l + self.multiplier_lr * (c - d)).max(T::zero());
        }
        Ok(())
    }

    /// `theta' <- tau theta + (1 - tau) theta'` for both critics.
    pub fn soft_update_targets(&mut self) {
        for (t, c) in self.targets.iter_mut().zip(&self.critics) {
            t.blend_toward(c, self.tau);
        }
    }

    /// Critics, actor, temperature, multipliers, then soft targets.
    pub fn update_cycle<R: Rng + ?Sized>(&mut self, batch: &[&LowTransition<T>], rng: &mut R) -> Result<CsacStats<T>> {
        if batch.is_empty() {
            return Err(Error::Domain("empty training batch".into()));
        }
        let targets = self.soft_q_targets(batch, rng)?;
        let critic_losses = self.update_critics(batch, &targets)?;

        let noise = draw_noise(batch.len(), rng);
        let (actor_loss, grads, sample) = self.actor_loss_and_grad(batch, &noise)?;
        if !actor_loss.is_finite() {
            return Err(Error::Training("non-finite actor loss".into()));
        }
        self.actor_adam.step_net(&mut self.actor, &grads)?;
        let alpha = self.update_temperature(&sample.log_prob)?;

        let n_costs = self.multipliers.len();
        let mut mean_costs = vec![T::zero(); n_costs];
        for t in batch {
            if t.costs.len() != n_costs {
                return Err(Error::Domain("cost vector length differs from multiplier count".into()));
            }
            for (m, &c) in mean_costs.iter_mut().zip(&t.costs) {
                *m = *m + c;
            }
        }
        let n = T::lit(batch.len() as f64);
        mean_costs.iter_mut().for_each(|m| *m = *m / n);
        self.update_multipliers(&mean_costs)?;
        self.soft_update_targets();

        let mean_log_prob = sample.log_prob.iter().copied().sum::<T>() / n;
        Ok(CsacStats { critic_losses, actor_loss, alpha, mean_log_prob })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SD: usize = 2;

    fn cfg() -> CsacConfig {
        CsacConfig { hidden: vec![8, 6], ..CsacConfig::default() }
    }

    fn agent(seed: u64) -> CsacAgent<f64> {
        CsacAgent::new(&cfg(), SD, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_batch(n: usize, seed: u64) -> Vec<LowTransition<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let u = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
                LowTransition {
                    state: (0..SD).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    action: u,
                    pre_squash: u.map(f64::atanh),
                    direction: to_direction(&u, Vec3::new(1.0, 0.0, 0.0)),
                    reward: rng.random_range(-1.0..1.0),
                    costs: vec![rng.random_range(0.0..1.0), if i % 3 == 0 { 1.0 } else { 0.0 }],
                    next_state: (0..SD).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    terminal: i % 4 == 3,
                    uav_id: i % 2,
                }
            })
            .collect()
    }

    fn noise(rows: usize, seed: u64) -> Batch<f64> {
        draw_noise(rows, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Linear actor `[mu | log_std] = W s + b` with the given bias only.
    fn bias_actor(mu: [f64; 3], log_std: [f64; 3]) -> Mlp<f64> {
        let mut p = vec![0.0; SD * 6];
        p.extend(mu);
        p.extend(log_std);
        Mlp::from_params(&[SD, 6], &[Activation::Identity], p).unwrap()
    }

    /// Linear critic `Q = w . [s, a] + b`.
    fn linear_critic(w: [f64; SD + 3], b: f64) -> Mlp<f64> {
        let mut p = w.to_vec();
        p.push(b);
        Mlp::from_params(&[SD + 3, 1], &[Activation::Identity], p).unwrap()
    }

    fn toy(mu: [f64; 3], log_std: [f64; 3], q1: ([f64; 5], f64), q2: ([f64; 5], f64)) -> CsacAgent<f64> {
        let mut a = agent(0);
        a.actor = bias_actor(mu, log_std);
        a.actor_adam = Adam::for_net(&a.actor, 3e-4);
        a.critics = [linear_critic(q1.0, q1.1), linear_critic(q2.0, q2.1)];
        a.targets = a.critics.clone();
        a.critic_adams = [Adam::for_net(&a.critics[0], 3e-4), Adam::for_net(&a.critics[1], 3e-4)];
        a
    }

    #[test]
    fn stable_jacobian_term_matches_naive_form() {
        for z in [-3.0, -0.5, 0.0, 0.2, 1.7, 4.0] {
            let naive = (1.0 - f64::tanh(z).powi(2)).ln();
            assert!((log_one_minus_tanh_sq(z) - naive).abs() < 1e-12);
        }
        assert!(log_one_minus_tanh_sq(40.0f64).is_finite());
        assert!(log_one_minus_tanh_sq(40.0f32).is_finite());
    }

    #[test]
    fn vanishing_std_is_deterministic_tanh_mean() {
        let a = toy([0.3, -0.8, 1.1], [-25.0; 3], ([0.0; 5], 0.0), ([0.0; 5], 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let expect = to_direction(&[0.3f64.tanh(), (-0.8f64).tanh(), 1.1f64.tanh()], Vec3::ZERO);
        for _ in 0..20 {
            let (d, _, u, _) = a.sample_action(&[0.4, 0.1], Vec3::new(1.0, 0.0, 0.0), &mut rng).unwrap();
            assert!(d.distance(expect) < 1e-7);
            assert!((u[0] - 0.3f64.tanh()).abs() < 1e-8);
        }
        assert!(a.mean_action(&[0.4, 0.1], Vec3::ZERO).unwrap().distance(expect) < 1e-12);
    }

    #[test]
    fn executed_directions_are_unit_and_raw_in_open_cube() {
        let a = agent(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let s = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (d, lp, u, _) = a.sample_action(&s, Vec3::new(0.0, 1.0, 0.0), &mut rng).unwrap();
            assert!((d.norm() - 1.0).abs() < 1e-9);
            assert!(lp.is_finite());
            assert!(u.iter().all(|v| v.abs() < 1.0));
        }
        let fallback = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(to_direction(&[0.0, 0.0, 0.0], fallback), fallback);
    }

    #[test]
    fn one_dimensional_density_matches_histogram() {
        // u = tanh(mu + sigma xi); compare exp(logp) with a 10^6-sample histogram
        let (mu, log_std) = (0.4f64, -0.3f64);
        let sigma = log_std.exp();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000;
        let bins = 40;
        let mut hist = vec![0usize; bins];
        for _ in 0..n {
            let xi: f64 = rng.sample(StandardNormal);
            let u = (mu + sigma * xi).tanh();
            hist[(((u + 1.0) / 2.0) * bins as f64).floor().min(bins as f64 - 1.0) as usize] += 1;
        }
        let width = 2.0 / bins as f64;
        for (k, &count) in hist.iter().enumerate() {
            let lo = -1.0 + k as f64 * width;
            // integrate the analytic density over the bin with Simpson's rule
            let dens = |u: f64| {
                let z = f64::atanh(u.clamp(-1.0 + 1e-15, 1.0 - 1e-15));
                component_log_prob((z - mu) / sigma, log_std, z).exp()
            };
            let m = 64;
            let h = width / m as f64;
            let mut mass = dens(lo + 1e-12) + dens(lo + width - 1e-12);
            for i in 1..m {
                mass += dens(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            mass *= h / 3.0;
            let expected = mass * n as f64;
            let tol = 5.0 * expected.sqrt().max(1.0);
            assert!((count as f64 - expected).abs() < tol, "bin {k}: {count} vs {expected:.1}");
        }
    }

    #[test]
    fn hand_computed_soft_target() {
        // actor: mu = (0.2, 0, 0), log_std = (-1, -1, -1); critic: Q = 0.5 s0 + 2 a0 + 0.1
        let mut a = toy([0.2, 0.0, 0.0], [-1.0; 3], ([0.5, 0.0, 2.0, 0.0, 0.0], 0.1), ([0.5, 0.0, 2.0, 1.0, 0.0], 0.3));
        a.multipliers = vec![0.3, 0.7];
        a.log_alpha = 0.25f64.ln();
        let tr = LowTransition {
            state: vec![0.0, 0.0],
            action: [0.0; 3],
            pre_squash: [0.0; 3],
            direction: Vec3::new(1.0, 0.0, 0.0),
            reward: 0.8,
            costs: vec![0.5, 1.0],
            next_state: vec![0.6, -0.2],
            terminal: false,
            uav_id: 0,
        };
        let xi = Batch { rows: 1, cols: 3, data: vec![0.5, -1.0, 2.0] };
        let y = a.soft_q_targets_with_noise(&[&tr], &xi).unwrap()[0];

        let s = (-1.0f64).exp();
        let z = [0.2 + s * 0.5, -s, 2.0 * s];
        let u = z.map(f64::tanh);
        let q1 = 0.5 * 0.6 + 2.0 * u[0] + 0.1;
        let q2 = 0.5 * 0.6 + 2.0 * u[0] + u[1] + 0.3;
        let logp: f64 = (0..3)
            .map(|j| {
                let xi = [0.5, -1.0, 2.0][j];
                -0.5 * xi * xi + 1.0 - 0.5 * (2.0 * std::f64::consts::PI).ln() - (1.0 - u[j] * u[j]).ln()
            })
            .sum();
        let r_eff = 0.8 - 0.3 * 0.5 - 0.7 * 1.0;
        let expect = r_eff + 0.99 * (q1.min(q2) - 0.25 * logp);
        assert!((y - expect).abs() < 1e-10, "{y} vs {expect}");

        let mut terminal_tr = tr.clone();
        terminal_tr.terminal = true;
        assert!((a.soft_q_targets_with_noise(&[&terminal_tr], &xi).unwrap()[0] - r_eff).abs() < 1e-15);
        a.gamma = 0.0;
        assert!((a.soft_q_targets_with_noise(&[&tr], &xi).unwrap()[0] - r_eff).abs() < 1e-15);
    }

    #[test]
    fn zero_multipliers_ignore_costs() {
        let a = agent(3);
        let batch = random_batch(6, 1);
        let mut clean = batch.clone();
        for t in &mut clean {
            t.costs = vec![0.0, 0.0];
        }
        let xi = noise(6, 4);
        let r1 = a.soft_q_targets_with_noise(&batch.iter().collect::<Vec<_>>(), &xi).unwrap();
        let r2 = a.soft_q_targets_with_noise(&clean.iter().collect::<Vec<_>>(), &xi).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let a = agent(5);
        let batch = random_batch(5, 2);
        let refs: Vec<_> = batch.iter().collect();
        let y = a.soft_q_targets_with_noise(&refs, &noise(5, 1)).unwrap();
        let [(_, g1), (_, g2)] = a.critic_losses_and_grads(&refs, &y).unwrap();
        let h = 1e-6;
        for (ci, g) in [(0, g1), (1, g2)] {
            for k in 0..a.critics[ci].num_params() {
                let mut p = a.clone();
                p.critics[ci].params_mut()[k] += h;
                let mut m = a.clone();
                m.critics[ci].params_mut()[k] -= h;
                let lp = p.critic_losses_and_grads(&refs, &y).unwrap()[ci].0;
                let lm = m.critic_losses_and_grads(&refs, &y).unwrap()[ci].0;
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(g[k].abs()).max(1e-6);
                assert!((fd - g[k]).abs() / denom < 1e-4, "critic {ci} param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn critics_at_fixed_point_and_swap_symmetry() {
        let mut a = agent(6);
        let batch = random_batch(4, 3);
        let refs: Vec<_> = batch.iter().collect();
        let y = a.soft_q_targets_with_noise(&refs, &noise(4, 2)).unwrap();
        let [(l1, _), (l2, _)] = a.critic_losses_and_grads(&refs, &y).unwrap();
        a.critics.swap(0, 1);
        let [(s1, _), (s2, _)] = a.critic_losses_and_grads(&refs, &y).unwrap();
        assert_eq!((l1, l2), (s2, s1));

        // targets equal to the critics' own predictions give zero loss
        let c = toy([0.0; 3], [0.0; 3], ([0.4, 0.1, 0.2, 0.3, 0.5], 0.1), ([0.4, 0.1, 0.2, 0.3, 0.5], 0.1));
        let own: Vec<f64> = batch
            .iter()
            .map(|t| {
                let x: Vec<f64> = t.state.iter().chain(&t.action).copied().collect();
                c.critics[0].predict(&x).unwrap()[0]
            })
            .collect();
        let mut c2 = c.clone();
        let losses = c2.update_critics(&refs, &own).unwrap();
        assert_eq!(losses, [0.0, 0.0]);
        assert_eq!(c2.critics, c.critics);
        assert_eq!(c2.targets, c.targets);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut a = agent(7);
        a.log_alpha = 0.3f64.ln();
        let batch = random_batch(6, 4);
        let refs: Vec<_> = batch.iter().collect();
        let xi = noise(6, 3);
        let (_, g, _) = a.actor_loss_and_grad(&refs, &xi).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for k in 0..a.actor.num_params() {
            let mut p = a.clone();
            p.actor.params_mut()[k] += h;
            let mut m = a.clone();
            m.actor.params_mut()[k] -= h;
            let fd = (p.actor_loss_and_grad(&refs, &xi).unwrap().0 - m.actor_loss_and_grad(&refs, &xi).unwrap().0)
                / (2.0 * h);
            if fd.abs().max(g[k].abs()) < 1e-7 {
                continue;
            }
            checked += 1;
            let denom = fd.abs().max(g[k].abs());
            assert!((fd - g[k]).abs() / denom < 1e-3, "param {k}: {fd} vs {}", g[k]);
        }
        assert!(checked > a.actor.num_params() / 2);
    }

    #[test]
    fn clipped_log_std_gets_no_gradient() {
        let a =
            toy([0.1, 0.2, 0.3], [5.0, -30.0, 0.0], ([0.0, 0.0, 1.0, 1.0, 1.0], 0.0), ([0.0, 0.0, 1.0, 1.0, 1.0], 0.0));
        let batch = random_batch(3, 5);
        let refs: Vec<_> = batch.iter().collect();
        let (_, g, _) = a.actor_loss_and_grad(&refs, &noise(3, 6)).unwrap();
        let bias = SD * 6;
        assert_eq!(g[bias + 3], 0.0);
        assert_eq!(g[bias + 4], 0.0);
        assert!(g[bias + 5] != 0.0);
    }

    #[test]
    fn entropy_term_is_linear_in_alpha() {
        let mut a = toy([0.1, 0.2, 0.3], [-0.5; 3], ([0.0; 5], 0.0), ([0.0; 5], 0.0));
        let batch = random_batch(4, 6);
        let refs: Vec<_> = batch.iter().collect();
        let xi = noise(4, 7);
        a.log_alpha = 0.2f64.ln();
        let l1 = a.actor_loss_and_grad(&refs, &xi).unwrap().0;
        a.log_alpha = 0.4f64.ln();
        let l2 = a.actor_loss_and_grad(&refs, &xi).unwrap().0;
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn actor_climbs_a_linear_critic() {
        // Q rewards the +y direction; with alpha = 0 the loss must fall monotonically
        let w = [0.0, 0.0, 0.0, 1.0, 0.0];
        let mut a = toy([0.0; 3], [-1.0; 3], (w, 0.0), (w, 0.0));
        a.log_alpha = f64::NEG_INFINITY;
        a.actor_adam = Adam::for_net(&a.actor, 1e-2);
        let batch = random_batch(8, 7);
        let refs: Vec<_> = batch.iter().collect();
        let xi = noise(8, 8);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let (loss, g, _) = a.actor_loss_and_grad(&refs, &xi).unwrap();
            assert!(loss < prev, "{loss} !< {prev}");
            prev = loss;
            a.actor_adam.step_net(&mut a.actor, &g).unwrap();
        }
        let d = a.mean_action(&[0.0, 0.0], Vec3::ZERO).unwrap();
        assert!(d.y > 0.99, "{d:?}");
    }

    #[test]
    fn min_critic_feeds_the_actor() {
        // critic 2 is uniformly lower, so only its action weights may matter
        let mut a =
            toy([0.1, 0.0, 0.0], [-1.0; 3], ([0.0, 0.0, 5.0, 0.0, 0.0], 10.0), ([0.0, 0.0, 0.0, 1.0, 0.0], 0.0));
        a.log_alpha = f64::NEG_INFINITY;
        let batch = random_batch(4, 8);
        let refs: Vec<_> = batch.iter().collect();
        let (_, g, _) = a.actor_loss_and_grad(&refs, &noise(4, 9)).unwrap();
        let bias = SD * 6;
        assert_eq!(g[bias], 0.0);
        assert!(g[bias + 1] < 0.0);
    }

    #[test]
    fn temperature_follows_entropy_gap() {
        let mut a = agent(8);
        let high_entropy = vec![-10.0; 16];
        let low_entropy = vec![5.0; 16];
        let at_target = vec![3.0; 16];
        let a0 = a.alpha();
        assert!(a.clone().update_temperature(&high_entropy).unwrap() < a0);
        assert!(a.clone().update_temperature(&low_entropy).unwrap() > a0);
        assert_eq!(a.temperature_grad(&at_target), 0.0);
        assert_eq!(a.update_temperature(&at_target).unwrap(), a0);
    }

    #[test]
    fn multiplier_dual_ascent() {
        let mut a = agent(9);
        a.multiplier_lr = 0.01;
        a.thresholds = vec![0.05, 0.0];
        a.multipliers = vec![0.5, 0.0];
        a.update_multipliers(&[0.3, 0.0]).unwrap();
        assert!((a.multipliers[0] - 0.5025).abs() < 1e-12);
        assert_eq!(a.multipliers[1], 0.0);
        a.update_multipliers(&[0.05, 0.0]).unwrap();
        assert!((a.multipliers[0] - 0.5025).abs() < 1e-12);
        a.multipliers = vec![0.0, 0.0];
        a.update_multipliers(&[0.01, 0.0]).unwrap();
        assert_eq!(a.multipliers, vec![0.0, 0.0]);
        a.multipliers = vec![0.001, 0.002];
        a.thresholds = vec![100.0, 100.0];
        a.update_multipliers(&[-50.0, 0.0]).unwrap();
        assert!(a.multipliers.iter().all(|&l| l == 0.0));
        a.constrained = false;
        a.update_multipliers(&[10.0, 10.0]).unwrap();
        assert_eq!(a.multipliers, vec![0.0, 0.0]);
        assert!(a.update_multipliers(&[1.0]).is_err());
    }

    #[test]
    fn soft_target_updates() {
        let mut a = agent(10);
        let perturb = |a: &mut CsacAgent<f64>| {
            for (k, p) in a.critics[0].params_mut().iter_mut().enumerate() {
                *p += 0.01 * (k % 7) as f64 + 0.5;
            }
        };
        perturb(&mut a);
        let gap0: Vec<f64> = a.critics[0].params().iter().zip(a.targets[0].params()).map(|(c, t)| c - t).collect();
        for _ in 0..100 {
            a.soft_update_targets();
        }
        for ((c, t), g0) in a.critics[0].params().iter().zip(a.targets[0].params()).zip(&gap0) {
            let expect = g0 * (1.0f64 - 0.005).powi(100);
            assert!(((c - t) - expect).abs() < 1e-12);
        }
        let mut hard = a.clone();
        hard.tau = 1.0;
        hard.soft_update_targets();
        assert_eq!(hard.targets[0].params(), hard.critics[0].params());
        let mut frozen = a.clone();
        frozen.tau = 0.0;
        frozen.soft_update_targets();
        assert_eq!(frozen.targets, a.targets);
    }

    #[test]
    fn update_cycle_is_deterministic_and_keeps_invariants() {
        let batch = random_batch(16, 9);
        let refs: Vec<_> = batch.iter().collect();
        let run = || {
            let mut a = agent(11);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..20 {
                a.update_cycle(&refs, &mut rng).unwrap();
            }
            a
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.alpha() > 0.0);
        assert!(a.multipliers.iter().all(|&l| l >= 0.0));
        assert!(a.multipliers[0] > 0.0);
        assert!(a.actor.all_finite() && a.critics.iter().all(Mlp::all_finite));
        assert!(matches!(agent(1).update_cycle(&[], &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn unconstrained_agent_keeps_zero_multipliers() {
        let mut c = cfg();
        c.constrained = false;
        c.init_multipliers = vec![1.0, 1.0];
        let mut a = CsacAgent::<f64>::new(&c, SD, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.multipliers, vec![0.0, 0.0]);
        let batch = random_batch(8, 10);
        let refs: Vec<_> = batch.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            a.update_cycle(&refs, &mut rng).unwrap();
        }
        assert_eq!(a.multipliers, vec![0.0, 0.0]);
    }
}
