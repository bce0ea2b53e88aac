//! Per-step traces, episode summaries and rate-bound calibration.
//!
//! Traces are CSV with a header; summaries are JSON lines. Both carry a
//! schema version and readers reject anything else.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, RateBounds};
use crate::env::{strongest_cell, UavEnv};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scenario::World;

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// One lower-level step of one UAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub schema_version: u32,
    pub episode: usize,
    pub step: usize,
    pub uav_id: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub serving_bs: usize,
    pub network_kind: String,
    #[serde(rename = "sinr_dB")]
    pub sinr_db: f64,
    pub rate_bps: f64,
    pub switched: bool,
    pub r_top: f64,
    pub r_low: f64,
    pub c_qos: f64,
    pub c_bnd: f64,
    pub done: bool,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "schema_version",
            "episode",
            "step",
            "uav_id",
            "x",
            "y",
            "z",
            "serving_bs",
            "network_kind",
            "sinr_dB",
            "rate_bps",
            "switched",
            "r_top",
            "r_low",
            "c_qos",
            "c_bnd",
            "done",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: TraceRow = rec?;
        if row.schema_version != TRACE_SCHEMA_VERSION {
            return Err(Error::Version { found: row.schema_version, expected: TRACE_SCHEMA_VERSION });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// The four mission metrics, per episode or averaged over a fleet of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub schema_version: u32,
    pub policy: String,
    /// `None` for aggregates.
    pub episode: Option<usize>,
    pub uav_id: Option<usize>,
    /// Number of (episode, UAV) runs folded into this record.
    pub runs: usize,
    pub avg_link_rate_bps: f64,
    pub switch_count: f64,
    pub qos_satisfaction_ratio: f64,
    pub flight_time_s: f64,
}

/// Metrics of a single (episode, UAV) trace; rows must be in step order.
pub fn compute_metrics(policy: &str, rows: &[TraceRow], dt_s: f64) -> Result<MetricSummary> {
    let first = rows.first().ok_or_else(|| Error::Domain("empty episode log".into()))?;
    if rows.iter().any(|r| r.episode != first.episode || r.uav_id != first.uav_id) {
        return Err(Error::Domain("trace mixes episodes or UAVs".into()));
    }
    let n = rows.len() as f64;
    Ok(MetricSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        policy: policy.to_string(),
        episode: Some(first.episode),
        uav_id: Some(first.uav_id),
        runs: 1,
        avg_link_rate_bps: rows.iter().map(|r| r.rate_bps).sum::<f64>() / n,
        switch_count: rows.iter().filter(|r| r.switched).count() as f64,
        qos_satisfaction_ratio: rows.iter().filter(|r| r.c_qos == 0.0).count() as f64 / n,
        flight_time_s: n * dt_s,
    })
}

/// Split a multi-episode trace into per-(episode, UAV) summaries.
pub fn summarize_trace(policy: &str, rows: &[TraceRow], dt_s: f64) -> Result<Vec<MetricSummary>> {
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.episode, r.uav_id)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.iter()
        .map(|&(e, u)| {
            let group: Vec<TraceRow> = rows.iter().filter(|r| r.episode == e && r.uav_id == u).cloned().collect();
            compute_metrics(policy, &group, dt_s)
        })
        .collect()
}

/// Mean of per-run summaries.
pub fn aggregate(policy: &str, runs: &[MetricSummary]) -> Result<MetricSummary> {
    if runs.is_empty() {
        return Err(Error::Domain("nothing to aggregate".into()));
    }
    let total: usize = runs.iter().map(|r| r.runs).sum();
    let w = |f: fn(&MetricSummary) -> f64| runs.iter().map(|r| f(r) * r.runs as f64).sum::<f64>() / total as f64;
    Ok(MetricSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        policy: policy.to_string(),
        episode: None,
        uav_id: None,
        runs: total,
        avg_link_rate_bps: w(|r| r.avg_link_rate_bps),
        switch_count: w(|r| r.switch_count),
        qos_satisfaction_ratio: w(|r| r.qos_satisfaction_ratio),
        flight_time_s: w(|r| r.flight_time_s),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

pub fn write_summaries(path: &Path, summaries: &[MetricSummary]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in summaries {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries(path: &Path) -> Result<Vec<MetricSummary>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MetricSummary = serde_json::from_str(&line)?;
        if s.schema_version != SUMMARY_SCHEMA_VERSION {
            return Err(Error::Version { found: s.schema_version, expected: SUMMARY_SCHEMA_VERSION });
        }
        out.push(s);
    }
    Ok(out)
}

/// Linear-interpolation percentile of unsorted data, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v * (1.0 / n);
        }
    }
}

/// Every per-step rate seen by a random-direction, max-RSRP policy.
pub fn random_policy_rates(world: &Arc<World>, cfg: &EnvConfig, n_episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut cfg = cfg.clone();
    // rewards are irrelevant here; any valid bounds will do
    cfg.rate_bounds = Some(RateBounds { min_bps: 0.0, max_bps: 1.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rates = Vec::new();
    for ep in 0..n_episodes {
        let mission = &cfg.uavs[ep % cfg.uavs.len().max(1)];
        let t0 = rng.random_range(0.0..1000.0);
        let (mut env, _) = UavEnv::reset(world.clone(), &cfg, mission.start, mission.goal, t0, rng.random())?;
        while !env.is_done() {
            let best = strongest_cell(env.measurements(), &cfg.allowed_networks)
                .ok_or_else(|| Error::Config("no cell in the allowed networks".into()))?;
            env.apply_association(best);
            let out = env.apply_low_action(random_unit(&mut rng))?;
            rates.push(out.info.rate_bps);
        }
    }
    Ok(rates)
}

/// 1st/99th percentile of [`random_policy_rates`].
pub fn calibrate_rate_bounds(world: &Arc<World>, cfg: &EnvConfig, n_episodes: usize, seed: u64) -> Result<RateBounds> {
    if n_episodes == 0 {
        return Err(Error::Domain("calibration needs at least one episode".into()));
    }
    if cfg.uavs.is_empty() {
        return Err(Error::Config("no UAV missions configured".into()));
    }
    let rates = random_policy_rates(world, cfg, n_episodes, seed)?;
    let lo = percentile(&rates, 1.0).expect("non-empty");
    let mut hi = percentile(&rates, 99.0).expect("non-empty");
    if hi <= lo {
        hi = lo + 1.0;
    }
    Ok(RateBounds { min_bps: lo, max_bps: hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::env::count_switches;
    use crate::scenario::deploy_scenario;

    fn row(episode: usize, step: usize, rate: f64, serving: usize, switched: bool) -> TraceRow {
        TraceRow {
            schema_version: TRACE_SCHEMA_VERSION,
            episode,
            step,
            uav_id: 0,
            x: 1.0,
            y: 2.0,
            z: 3.0,
            serving_bs: serving,
            network_kind: "GN".into(),
            sinr_db: 3.5,
            rate_bps: rate,
            switched,
            r_top: 0.1,
            r_low: 0.2,
            c_qos: ((2e6 - rate) / 2e6).max(0.0),
            c_bnd: 0.0,
            done: step == 9,
        }
    }

    #[test]
    fn constant_trace() {
        let rows: Vec<_> = (0..10).map(|s| row(0, s, 3e6, 4, false)).collect();
        let m = compute_metrics("x", &rows, 1.0).unwrap();
        assert_eq!(
            (m.avg_link_rate_bps, m.switch_count, m.qos_satisfaction_ratio, m.flight_time_s),
            (3e6, 0.0, 1.0, 10.0)
        );
    }

    #[test]
    fn alternating_rates_half_satisfied() {
        let rows: Vec<_> = (0..10).map(|s| row(0, s, if s % 2 == 0 { 1e6 } else { 3e6 }, 1, false)).collect();
        assert_eq!(compute_metrics("x", &rows, 1.0).unwrap().qos_satisfaction_ratio, 0.5);
        assert!(matches!(compute_metrics("x", &[], 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn recomputation_matches_streamed_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for ep in 0..100 {
            let n = rng.random_range(1..60);
            let mut serving = vec![rng.random_range(0..4)];
            let mut rows = Vec::new();
            let (mut sum, mut ok) = (0.0, 0);
            for s in 0..n {
                let b = if rng.random_bool(0.3) { rng.random_range(0..4) } else { *serving.last().unwrap() };
                let switched = b != *serving.last().unwrap();
                serving.push(b);
                let rate = rng.random_range(0.0..4e6);
                sum += rate;
                ok += usize::from(rate >= 2e6);
                rows.push(row(ep, s, rate, b, switched));
            }
            let m = compute_metrics("x", &rows, 0.5).unwrap();
            assert_eq!(m.switch_count as usize, count_switches(&serving));
            assert!((m.avg_link_rate_bps - sum / n as f64).abs() < 1e-6);
            assert_eq!(m.qos_satisfaction_ratio, ok as f64 / n as f64);
            assert_eq!(m.flight_time_s, n as f64 * 0.5);
        }
    }

    #[test]
    fn trace_and_summary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<_> = (0..10).map(|s| row(2, s, 1e6 + s as f64, s / 3, s % 3 == 0)).collect();
        let p = dir.path().join("trace.csv");
        write_trace(&p, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), rows.len() + 1);
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("schema_version,episode,step,uav_id,x,y,z,serving_bs,network_kind,sinr_dB,"));
        assert_eq!(read_trace(&p).unwrap(), rows);

        let s = summarize_trace("sl", &rows, 1.0).unwrap();
        let sp = dir.path().join("summary.jsonl");
        write_summaries(&sp, &s).unwrap();
        assert_eq!(read_summaries(&sp).unwrap(), s);

        let bad = std::fs::read_to_string(&sp).unwrap().replace("\"schema_version\":1", "\"schema_version\":9");
        std::fs::write(&sp, bad).unwrap();
        assert!(matches!(read_summaries(&sp), Err(Error::Version { found: 9, expected: 1 })));
        let bad = std::fs::read_to_string(&p).unwrap().replace("\n1,", "\n7,");
        std::fs::write(&p, bad).unwrap();
        assert!(matches!(read_trace(&p), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn aggregate_and_median() {
        let a = compute_metrics("p", &(0..4).map(|s| row(0, s, 1e6, 0, false)).collect::<Vec<_>>(), 1.0).unwrap();
        let b = compute_metrics("p", &(0..4).map(|s| row(1, s, 3e6, 0, s == 1)).collect::<Vec<_>>(), 1.0).unwrap();
        let agg = aggregate("p", &[a, b]).unwrap();
        assert_eq!(agg.runs, 2);
        assert_eq!(agg.avg_link_rate_bps, 2e6);
        assert_eq!(agg.switch_count, 0.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(percentile(&[0.0, 10.0], 25.0), Some(2.5));
    }

    #[test]
    fn calibration_is_ordered_deterministic_and_covers_rates() {
        let cfg = RunConfig::scaled();
        let world = Arc::new(deploy_scenario(&cfg.scenario).unwrap());
        let b1 = calibrate_rate_bounds(&world, &cfg.env, 10, 3).unwrap();
        let b2 = calibrate_rate_bounds(&world, &cfg.env, 10, 3).unwrap();
        assert_eq!(b1, b2);
        assert!(b1.min_bps < b1.max_bps);
        let fresh = random_policy_rates(&world, &cfg.env, 10, 99).unwrap();
        let inside = fresh.iter().filter(|&&r| r >= b1.min_bps && r <= b1.max_bps).count();
        assert!(inside as f64 >= 0.96 * fresh.len() as f64, "{inside}/{}", fresh.len());
    }
}
