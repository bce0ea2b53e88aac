//! Acceptance run: one PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! Criteria 1-8 are exact or tight numerical properties. Criteria 9-12 train
//! the scaled scenario on five seeds and compare medians against baselines.
//! Set `SAGIN_ACCEPTANCE_SEEDS` to a smaller count for a quicker, weaker run.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sagin::baselines::{PolicyKind, DIRECT_RL_DIRECTIONS};
use sagin::channel::{draw_fading, measure_all, network_rates, FadingModel, LinkGain};
use sagin::config::{CsacConfig, DdqnConfig, RunConfig};
use sagin::csac::{CsacAgent, LowTransition, ACTION_DIM};
use sagin::ddqn::{DdqnAgent, TopTransition};
use sagin::env::{UavEnv, STATE_DIM};
use sagin::geom::Vec3;
use sagin::nn::{Activation, Batch, Mlp};
use sagin::scenario::{deploy_scenario, BsId};
use sagin::trainer::{compare, write_training_log, EpisodeLog};
use sagin::{NetworkKind, Trainer64};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn noise(rows: usize, r: &mut ChaCha8Rng) -> Batch<f64> {
    let mut b = Batch::zeros(rows, ACTION_DIM);
    for v in &mut b.data {
        *v = r.sample(StandardNormal);
    }
    b
}

fn random_state(r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..STATE_DIM).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn top_batch(n: usize, n_actions: usize, seed: u64) -> Vec<TopTransition<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| TopTransition {
            state: random_state(&mut r),
            action: r.random_range(0..n_actions),
            reward: r.random_range(-1.0..1.0),
            next_state: random_state(&mut r),
            terminal: i % 5 == 4,
            uav_id: 0,
        })
        .collect()
}

fn low_batch(n: usize, seed: u64) -> Vec<LowTransition<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let u: [f64; 3] = std::array::from_fn(|_| r.random_range(-0.95..0.95));
            LowTransition {
                state: random_state(&mut r),
                action: u,
                pre_squash: u.map(f64::atanh),
                direction: Vec3::new(1.0, 0.0, 0.0),
                reward: r.random_range(-1.0..1.0),
                costs: vec![r.random_range(0.0..1.0), if i % 3 == 0 { 1.0 } else { 0.0 }],
                next_state: random_state(&mut r),
                terminal: i % 5 == 4,
                uav_id: 0,
            }
        })
        .collect()
}

/// Relative error `|g - fd| / (|g| + |fd|)` between the analytic gradient and
/// central differences of `loss`, taken over the whole parameter vector.
fn fd_check(params: &mut [f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let (mut diff, mut norm_g, mut norm_fd) = (0.0, 0.0, 0.0);
    for k in 0..params.len() {
        let orig = params[k];
        params[k] = orig + h;
        let lp = loss(params);
        params[k] = orig - h;
        let lm = loss(params);
        params[k] = orig;
        let fd = (lp - lm) / (2.0 * h);
        diff += (fd - analytic[k]).powi(2);
        norm_g += analytic[k].powi(2);
        norm_fd += fd * fd;
    }
    diff.sqrt() / (norm_g.sqrt() + norm_fd.sqrt())
}

fn with_params(net: &Mlp<f64>, p: &[f64]) -> Mlp<f64> {
    let mut n = net.clone();
    n.params_mut().copy_from_slice(p);
    n
}

fn gradient_correctness() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;

    for n_actions in [2, DIRECT_RL_DIRECTIONS.len()] {
        let a = DdqnAgent::<f64>::new(&DdqnConfig::default(), STATE_DIM, n_actions, 100, &mut rng(1)).unwrap();
        let batch = top_batch(8, n_actions, 2);
        let refs: Vec<_> = batch.iter().collect();
        let y = a.td_targets(&refs).unwrap();
        let (_, g) = a.loss_and_grad(&refs, &y).unwrap();
        let mut p = a.eval.params().to_vec();
        let mut probe = a.clone();
        let err = fd_check(&mut p, &g, |p| {
            probe.eval = with_params(&a.eval, p);
            probe.loss_and_grad(&refs, &y).unwrap().0
        });
        pass &= err < 1e-4;
        lines.push(format!("ddqn {STATE_DIM}->128->64->{n_actions} {err:.1e}"));
    }

    let a = CsacAgent::<f64>::new(&CsacConfig { init_alpha: 0.3, ..CsacConfig::default() }, STATE_DIM, &mut rng(3))
        .unwrap();
    let batch = low_batch(8, 4);
    let refs: Vec<_> = batch.iter().collect();
    let y = a.soft_q_targets_with_noise(&refs, &noise(8, &mut rng(5))).unwrap();
    let grads = a.critic_losses_and_grads(&refs, &y).unwrap();
    for ci in 0..2 {
        let mut p = a.critics[ci].params().to_vec();
        let mut probe = a.clone();
        let err = fd_check(&mut p, &grads[ci].1, |p| {
            probe.critics[ci] = with_params(&a.critics[ci], p);
            probe.critic_losses_and_grads(&refs, &y).unwrap()[ci].0
        });
        pass &= err < 1e-4;
        lines.push(format!("critic{ci} {err:.1e}"));
    }

    let xi = noise(8, &mut rng(6));
    let (_, g, _) = a.actor_loss_and_grad(&refs, &xi).unwrap();
    let mut p = a.actor.params().to_vec();
    let mut probe = a.clone();
    let err = fd_check(&mut p, &g, |p| {
        probe.actor = with_params(&a.actor, p);
        probe.actor_loss_and_grad(&refs, &xi).unwrap().0
    });
    pass &= err < 1e-3;
    lines.push(format!("actor {err:.1e}"));
    outcome(pass, lines.join(", "))
}

fn linear(inputs: usize, outputs: usize, weights: &[f64], biases: &[f64]) -> Mlp<f64> {
    let mut p = weights.to_vec();
    p.extend(biases);
    Mlp::from_params(&[inputs, outputs], &[Activation::Identity], p).unwrap()
}

fn bellman_oracles() -> Outcome {
    let mut a = DdqnAgent::<f64>::new(&DdqnConfig::default(), 2, 2, 10, &mut rng(0)).unwrap();
    // weights are input-major: w[i * outputs + o]
    a.eval = linear(2, 2, &[1.0, 0.5, -0.25, 2.0], &[0.1, 1.5]);
    a.target = linear(2, 2, &[0.3, -1.5, 0.7, 0.4], &[0.05, 0.6]);
    a.gamma = 0.9;
    let s2 = [0.8, -0.3];
    let online = [1.0 * 0.8 + (-0.25) * (-0.3) + 0.1, 0.5 * 0.8 + 2.0 * (-0.3) + 1.5];
    let target = [0.3 * 0.8 + 0.7 * (-0.3) + 0.05, -1.5 * 0.8 + 0.4 * (-0.3) + 0.6];
    let a_hat = if online[1] > online[0] { 1 } else { 0 };
    let tr = TopTransition {
        state: vec![0.0, 0.0],
        action: 0,
        reward: 0.7,
        next_state: s2.to_vec(),
        terminal: false,
        uav_id: 0,
    };
    let want = 0.7 + 0.9 * target[a_hat];
    let got = a.td_target(&tr).unwrap();
    let end = a.td_target(&TopTransition { terminal: true, ..tr.clone() }).unwrap();
    let ddqn_err = (got - want).abs().max((end - 0.7).abs());

    let mut c =
        CsacAgent::<f64>::new(&CsacConfig { hidden: vec![4], ..CsacConfig::default() }, 2, &mut rng(0)).unwrap();
    let mu = [0.2, -0.4, 0.1];
    let log_std = [-0.5, 0.3, -1.0];
    let mut bias = mu.to_vec();
    bias.extend(log_std);
    c.actor = linear(2, 6, &[0.0; 12], &bias);
    let w1 = [0.5, -0.2, 1.0, 0.3, -0.7];
    let w2 = [0.4, 0.1, 0.8, 0.2, -0.6];
    c.targets = [linear(5, 1, &w1, &[0.05]), linear(5, 1, &w2, &[-0.02])];
    c.log_alpha = 0.25f64.ln();
    c.gamma = 0.95;
    c.multipliers = vec![0.4, 1.5];
    let xi = Batch { rows: 1, cols: 3, data: vec![0.3, -1.2, 0.8] };
    let s2 = [0.6, -0.1];
    let ltr = LowTransition {
        state: vec![0.0, 0.0],
        action: [0.0; 3],
        pre_squash: [0.0; 3],
        direction: Vec3::new(1.0, 0.0, 0.0),
        reward: 0.9,
        costs: vec![0.2, 1.0],
        next_state: s2.to_vec(),
        terminal: false,
        uav_id: 0,
    };
    let mut u = [0.0; 3];
    let mut log_pi = 0.0;
    for j in 0..3 {
        let z = mu[j] + log_std[j].exp() * xi.data[j];
        u[j] = z.tanh();
        log_pi += -0.5 * xi.data[j] * xi.data[j]
            - log_std[j]
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - (1.0 - u[j] * u[j]).ln();
    }
    let input = [s2[0], s2[1], u[0], u[1], u[2]];
    let q = |w: &[f64; 5], b: f64| w.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + b;
    let min_q = q(&w1, 0.05).min(q(&w2, -0.02));
    let r_pen = 0.9 - 0.4 * 0.2 - 1.5 * 1.0;
    let want = r_pen + 0.95 * (min_q - 0.25 * log_pi);
    let got = c.soft_q_targets_with_noise(&[&ltr], &xi).unwrap()[0];
    let end = c.soft_q_targets_with_noise(&[&LowTransition { terminal: true, ..ltr.clone() }], &xi).unwrap()[0];
    let csac_err = (got - want).abs().max((end - r_pen).abs());

    outcome(ddqn_err < 1e-10 && csac_err < 1e-10, format!("ddqn |err| {ddqn_err:.1e}, csac |err| {csac_err:.1e}"))
}

fn handover_oracle() -> Outcome {
    let cfg = RunConfig::scaled();
    let world = Arc::new(deploy_scenario(&cfg.scenario).unwrap());
    let ids: Vec<BsId> = world.cells.iter().map(|c| c.id).collect();
    let mut r = rng(11);
    let mut mismatches = 0;
    for k in 0..100 {
        let (mut env, first) = UavEnv::reset(
            world.clone(),
            &cfg.env,
            Vec3::new(30.0, 470.0, 150.0),
            Vec3::new(470.0, 30.0, 150.0),
            0.0,
            k,
        )
        .unwrap();
        let len = r.random_range(1..=60);
        let seq: Vec<BsId> = (0..len)
            .map(|_| if r.random_bool(0.5) { env.state().serving } else { ids[r.random_range(0..ids.len())] })
            .collect();
        let mut expected = 0usize;
        let mut prev = first.serving;
        for &b in &seq {
            env.associate(b);
            expected += usize::from(b != prev);
            prev = b;
        }
        mismatches += usize::from(env.counters().switch_count != expected);
    }
    outcome(mismatches == 0, format!("{mismatches}/100 sequences disagree"))
}

fn multiplier_dynamics() -> Outcome {
    let cfg = CsacConfig { hidden: vec![4], init_multipliers: vec![0.5, 0.5], ..CsacConfig::default() };
    let mut a = CsacAgent::<f64>::new(&cfg, 2, &mut rng(0)).unwrap();
    a.update_multipliers(&[0.30, 0.25]).unwrap();
    let direct = [0.5 + 0.01 * (0.30 - 0.05), 0.5 + 0.01 * (0.25 - 0.0)];
    let example_ok = a.multipliers == direct && a.multipliers.iter().all(|l| (l - 0.5025).abs() < 1e-15);

    let mut r = rng(12);
    let mut min_seen = f64::INFINITY;
    let mut b =
        CsacAgent::<f64>::new(&CsacConfig { hidden: vec![4], ..CsacConfig::default() }, 2, &mut rng(0)).unwrap();
    b.multiplier_lr = 0.5;
    for step in 0..20_000 {
        let costs = if step % 1000 < 700 {
            [r.random_range(-50.0..0.0), -1e6 * r.random::<f64>()]
        } else {
            [r.random_range(-1.0..3.0), r.random_range(-1.0..1.0)]
        };
        b.update_multipliers(&costs).unwrap();
        min_seen = b.multipliers.iter().fold(min_seen, |m, &l| m.min(l));
    }
    outcome(
        example_ok && min_seen >= 0.0,
        format!("lambda 0.5 -> {:.6}, min over adversarial stream {min_seen}", a.multipliers[0]),
    )
}

fn sac_degeneracy() -> Outcome {
    let constrained_cfg = CsacConfig { multiplier_lr: 0.0, init_multipliers: vec![0.0, 0.0], ..CsacConfig::default() };
    let plain_cfg = CsacConfig { constrained: false, ..CsacConfig::default() };
    let mut c = CsacAgent::<f64>::new(&constrained_cfg, STATE_DIM, &mut rng(21)).unwrap();
    let mut p = CsacAgent::<f64>::new(&plain_cfg, STATE_DIM, &mut rng(21)).unwrap();
    let batch = low_batch(32, 22);
    let refs: Vec<_> = batch.iter().collect();
    let mut rc = rng(23);
    let mut rp = rng(23);
    let mut identical = true;
    for _ in 0..3 {
        let sc = c.update_cycle(&refs, &mut rc).unwrap();
        let sp = p.update_cycle(&refs, &mut rp).unwrap();
        identical &= sc == sp
            && c.actor == p.actor
            && c.critics == p.critics
            && c.targets == p.targets
            && c.log_alpha.to_bits() == p.log_alpha.to_bits()
            && c.multipliers == [0.0, 0.0];
    }
    outcome(identical, "three cycles, bitwise comparison of all networks, temperature and stats")
}

fn cross_network_isolation() -> Outcome {
    let base = RunConfig::scaled().scenario;
    let mut louder = base.clone();
    louder.sn.tx_power_dbm += 17.0;
    let w1 = deploy_scenario(&base).unwrap();
    let w2 = deploy_scenario(&louder).unwrap();
    let mut r = rng(31);
    let mut compared = 0;
    let mut differing = 0;
    let mut sn_changed = false;
    for k in 0..50 {
        let pos = Vec3::new(r.random_range(0.0..500.0), r.random_range(0.0..500.0), r.random_range(100.0..300.0));
        let t = r.random_range(0.0..1000.0);
        let m1 = measure_all(&w1, pos, t, &mut rng(k)).unwrap();
        let m2 = measure_all(&w2, pos, t, &mut rng(k)).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            if a.kind == NetworkKind::Space {
                sn_changed |= a.sinr_linear != b.sinr_linear;
                continue;
            }
            compared += 1;
            differing += usize::from(
                a.sinr_linear.to_bits() != b.sinr_linear.to_bits() || a.rate_bps.to_bits() != b.rate_bps.to_bits(),
            );
        }
    }
    outcome(
        differing == 0 && compared > 0 && sn_changed,
        format!("{differing}/{compared} GN/AN links changed; SN links moved: {sn_changed}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::scaled();
    cfg.env.max_steps = 50;
    cfg.train.episodes = 20;
    cfg.ddqn.batch_size = 32;
    cfg.csac.batch_size = 32;
    let run = |name: &str| {
        let mut t = Trainer64::new(PolicyKind::Hdrl, cfg.clone()).unwrap();
        t.train(None, None).unwrap();
        let path = dir.path().join(name);
        write_training_log(&path, &t.state.logs).unwrap();
        (std::fs::read(path).unwrap(), t.checkpoint_bytes().unwrap())
    };
    let (log_a, ckpt_a) = run("a.csv");
    let (log_b, ckpt_b) = run("b.csv");

    let path = dir.path().join("half.json");
    let mut first = Trainer64::new(PolicyKind::Hdrl, cfg.clone()).unwrap();
    first.train(Some(9), None).unwrap();
    first.save_checkpoint(&path).unwrap();
    let mut rest = Trainer64::load_checkpoint(&path).unwrap();
    rest.train(None, None).unwrap();
    let split_log = dir.path().join("split.csv");
    write_training_log(&split_log, &rest.state.logs).unwrap();
    let resumed = std::fs::read(split_log).unwrap() == log_a && rest.checkpoint_bytes().unwrap() == ckpt_a;

    let repeat = log_a == log_b && ckpt_a == ckpt_b;
    outcome(repeat && resumed, format!("repeat identical: {repeat}, 9+11 resume identical: {resumed}"))
}

fn channel_monte_carlo() -> Outcome {
    let n = 1_000_000;
    let mut worst: f64 = 0.0;
    for (i, model) in [FadingModel::Rayleigh, FadingModel::Rician { k_db: 0.0 }, FadingModel::Rician { k_db: 10.0 }]
        .into_iter()
        .enumerate()
    {
        let mut r = rng(40 + i as u64);
        let mean = (0..n).map(|_| draw_fading(model, &mut r)).sum::<f64>() / n as f64;
        worst = worst.max((mean - 1.0).abs());
    }
    let noise_w = 3.7e-13;
    let bandwidth = 2.0e7;
    let link = [LinkGain { mean_power_w: noise_w, fading: FadingModel::Rician { k_db: f64::INFINITY } }];
    let rate = network_rates(&link, bandwidth, noise_w, 7, &mut rng(50)).unwrap()[0];
    outcome(
        worst < 0.01 && rate == bandwidth,
        format!("worst |mean - 1| {worst:.4}, rate at SINR 1 = {rate} for B = {bandwidth}"),
    )
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Relative gain of the last tenth over the first tenth of a trailing 10-episode mean.
fn smoothed_gain(returns: &[f64]) -> f64 {
    let smooth: Vec<f64> = (0..returns.len())
        .map(|i| {
            let lo = i.saturating_sub(9);
            returns[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
        })
        .collect();
    let w = (smooth.len() / 10).max(1);
    let first = smooth[..w].iter().sum::<f64>() / w as f64;
    let last = smooth[smooth.len() - w..].iter().sum::<f64>() / w as f64;
    (last - first) / first.abs()
}

struct SeedResult {
    top_gain: f64,
    low_gain: f64,
    qos: [f64; 2],
    switches: [f64; 2],
    rate: [f64; 2],
}

fn scaled_seed(seed: u64) -> SeedResult {
    let mut cfg = RunConfig::scaled();
    cfg.train.seed = seed;
    let kinds = [PolicyKind::Hdrl, PolicyKind::StraightLine, PolicyKind::MaxSinrCsac, PolicyKind::DdqnSl];
    let mut logs: Vec<EpisodeLog> = Vec::new();
    let results = compare::<f32>(&cfg, &kinds, 20, 1000 + seed, |k, log| {
        if k == PolicyKind::Hdrl {
            logs.push(log.clone());
        }
    })
    .unwrap();
    let agg = |k: PolicyKind| &results.iter().find(|r| r.kind == k).unwrap().aggregate;
    let (hdrl, sl, greedy, ddqn_sl) =
        (agg(PolicyKind::Hdrl), agg(PolicyKind::StraightLine), agg(PolicyKind::MaxSinrCsac), agg(PolicyKind::DdqnSl));
    let top: Vec<f64> = logs.iter().map(|l| l.top_return).collect();
    let low: Vec<f64> = logs.iter().map(|l| l.low_return).collect();
    let r = SeedResult {
        top_gain: smoothed_gain(&top),
        low_gain: smoothed_gain(&low),
        qos: [hdrl.qos_satisfaction_ratio, sl.qos_satisfaction_ratio],
        switches: [hdrl.switch_count, greedy.switch_count],
        rate: [hdrl.avg_link_rate_bps, ddqn_sl.avg_link_rate_bps],
    };
    println!(
        "  seed {seed}: gain top {:+.2} low {:+.2} | qos {:.3} vs sl {:.3} | switches {:.2} vs max-sinr {:.2} | rate {:.2} vs ddqn-sl {:.2} Mbps",
        r.top_gain,
        r.low_gain,
        r.qos[0],
        r.qos[1],
        r.switches[0],
        r.switches[1],
        r.rate[0] / 1e6,
        r.rate[1] / 1e6
    );
    r
}

fn scaled_experiment() -> [Outcome; 4] {
    let seeds: u64 = std::env::var("SAGIN_ACCEPTANCE_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let runs: Vec<SeedResult> = (1..=seeds).map(scaled_seed).collect();
    let col = |f: &dyn Fn(&SeedResult) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());

    let (top, low) = (col(&|r| r.top_gain), col(&|r| r.low_gain));
    let (qos, qos_sl) = (col(&|r| r.qos[0]), col(&|r| r.qos[1]));
    let (sw, sw_greedy) = (col(&|r| r.switches[0]), col(&|r| r.switches[1]));
    let (rate, rate_sl) = (col(&|r| r.rate[0]), col(&|r| r.rate[1]));
    [
        outcome(
            top >= 0.3 && low >= 0.3,
            format!("median smoothed gain top {:+.1}%, low {:+.1}% over {seeds} seeds", 100.0 * top, 100.0 * low),
        ),
        outcome(qos >= 0.9 && qos > qos_sl, format!("median qos {qos:.3} vs straight line {qos_sl:.3}")),
        outcome(sw <= sw_greedy, format!("median switches {sw:.2} vs max-sinr greedy {sw_greedy:.2}")),
        outcome(rate >= rate_sl, format!("median rate {:.2} vs ddqn+sl {:.2} Mbps", rate / 1e6, rate_sl / 1e6)),
    ]
}

fn main() {
    let names = [
        "gradient correctness",
        "bellman oracles",
        "handover oracle",
        "multiplier dynamics",
        "sac degeneracy",
        "cross-network isolation",
        "determinism",
        "monte-carlo channel",
        "convergence",
        "qos ordering",
        "switching ordering",
        "ablation ordering",
    ];
    let mut results = vec![
        gradient_correctness(),
        bellman_oracles(),
        handover_oracle(),
        multiplier_dynamics(),
        sac_degeneracy(),
        cross_network_isolation(),
        determinism(),
        channel_monte_carlo(),
    ];
    results.extend(scaled_experiment());

    let mut failed = Vec::new();
    for (i, (name, r)) in names.iter().zip(&results).enumerate() {
        println!("criterion {:>2} {name}: {} ({})", i + 1, if r.pass { "PASS" } else { "FAIL" }, r.detail);
        if !r.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
