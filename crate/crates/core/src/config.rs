//! Run configuration: world description, environment shaping, agent
//! hyper-parameters and the training schedule. Persisted as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetworkKind {
    #[serde(rename = "GN")]
    Ground,
    #[serde(rename = "AN")]
    Air,
    #[serde(rename = "SN")]
    Space,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 3] = [NetworkKind::Ground, NetworkKind::Air, NetworkKind::Space];

    pub fn index(self) -> usize {
        match self {
            NetworkKind::Ground => 0,
            NetworkKind::Air => 1,
            NetworkKind::Space => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NetworkKind::Ground => "GN",
            NetworkKind::Air => "AN",
            NetworkKind::Space => "SN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingParams {
    /// Built-up area ratio.
    pub alpha: f64,
    /// Buildings per square kilometer.
    pub beta_per_km2: f64,
    /// Rayleigh scale of building heights, meters.
    pub gamma_m: f64,
}

/// A sectorized terrestrial or aerial base-station network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorNetwork {
    /// Site ground coordinates `[x, y]`, meters.
    pub sites: Vec<[f64; 2]>,
    pub antenna_height_m: f64,
    pub sector_azimuths_deg: Vec<f64>,
    /// Electrical downtilt; negative values tilt the beam upward.
    pub downtilt_deg: f64,
    pub array_rows: usize,
    pub array_cols: usize,
    pub element_gain_dbi: f64,
    pub tx_power_dbm: f64,
    pub carrier_freq_ghz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteNetwork {
    pub altitude_m: f64,
    /// Ground-projected speed along +x, m/s.
    pub speed_mps: f64,
    /// Ground projection of each satellite at t = 0, `[x, y]` meters.
    pub initial_ground_xy: Vec<[f64; 2]>,
    /// Satellites wrap when leaving `center.x ± half_width`.
    pub coverage_half_width_m: f64,
    pub array_rows: usize,
    pub array_cols: usize,
    pub element_gain_dbi: f64,
    pub tx_power_dbm: f64,
    pub carrier_freq_ghz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    pub rician_k_db: f64,
    pub n_fading_draws: usize,
    pub uav_antenna_gain_dbi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub bounds: Aabb,
    pub building_seed: u64,
    pub buildings: BuildingParams,
    pub gn: SectorNetwork,
    pub an: SectorNetwork,
    pub sn: SatelliteNetwork,
    pub channel: ChannelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub min_bps: f64,
    pub max_bps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavMission {
    pub start: Vec3,
    pub goal: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dt_s: f64,
    pub v_max_mps: f64,
    pub max_steps: usize,
    /// Weight of the normalized rate terms.
    pub lambda_rate: f64,
    /// Weight of the link-switch penalty.
    pub lambda_switch: f64,
    /// Weight of the goal-approach term.
    pub lambda_goal: f64,
    pub eta_bnd: f64,
    pub r_req_bps: f64,
    /// `None` means `v_max * dt`.
    pub arrival_radius_m: Option<f64>,
    pub rate_bounds: Option<RateBounds>,
    pub allowed_networks: Vec<NetworkKind>,
    pub uavs: Vec<UavMission>,
    /// Uniform jitter applied to each start position per episode (horizontal).
    pub start_jitter_m: f64,
}

impl EnvConfig {
    pub fn arrival_radius(&self) -> f64 {
        self.arrival_radius_m.unwrap_or(self.v_max_mps * self.dt_s)
    }

    pub fn rate_bounds(&self) -> Result<RateBounds> {
        self.rate_bounds.ok_or_else(|| Error::Config("rate bounds not calibrated; run `calibrate` first".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdqnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub sync_period: u64,
    pub epsilon_init: f64,
    pub epsilon_final: f64,
    /// Fraction of the episode budget after which epsilon sits at its floor.
    pub epsilon_decay_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsacConfig {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub init_alpha: f64,
    pub target_entropy: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub multiplier_lr: f64,
    /// Tolerances `d_i`, ordered `[qos, boundary]`.
    pub cost_thresholds: Vec<f64>,
    pub init_multipliers: Vec<f64>,
    /// `false` freezes every multiplier at zero (plain SAC).
    pub constrained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Lower-level steps executed per top-level decision.
    pub hold_steps: usize,
    pub precision: Precision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub env: EnvConfig,
    pub ddqn: DdqnConfig,
    pub csac: CsacConfig,
    pub train: TrainConfig,
}

impl ScenarioConfig {
    /// Three GN sites, three AN sites and two LEO satellites over a 2 km x 2 km area.
    pub fn full_scale() -> Self {
        let bounds = Aabb::new(Vec3::new(0.0, 0.0, 100.0), Vec3::new(2000.0, 2000.0, 300.0));
        let cx = 1000.0;
        let cy = 1000.0;
        let half_width = 100_000.0;
        ScenarioConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            bounds,
            building_seed: 7,
            buildings: BuildingParams { alpha: 0.3, beta_per_km2: 300.0, gamma_m: 20.0 },
            gn: SectorNetwork {
                sites: vec![[500.0, 500.0], [1500.0, 700.0], [900.0, 1550.0]],
                antenna_height_m: 25.0,
                sector_azimuths_deg: vec![0.0, 120.0, 240.0],
                downtilt_deg: 10.0,
                array_rows: 4,
                array_cols: 2,
                element_gain_dbi: 8.0,
                tx_power_dbm: 46.0,
                carrier_freq_ghz: 6.7,
                bandwidth_hz: 1e6,
            },
            an: SectorNetwork {
                sites: vec![[1500.0, 1500.0], [350.0, 1300.0], [1100.0, 300.0]],
                antenna_height_m: 50.0,
                sector_azimuths_deg: vec![0.0, 120.0, 240.0],
                downtilt_deg: -10.0,
                array_rows: 4,
                array_cols: 2,
                element_gain_dbi: 8.0,
                tx_power_dbm: 46.0,
                carrier_freq_ghz: 4.9,
                bandwidth_hz: 1e6,
            },
            sn: SatelliteNetwork {
                altitude_m: 550_000.0,
                speed_mps: 7500.0,
                initial_ground_xy: vec![[cx - half_width / 2.0, cy], [cx + half_width / 2.0, cy]],
                coverage_half_width_m: half_width,
                array_rows: 8,
                array_cols: 8,
                element_gain_dbi: 8.0,
                tx_power_dbm: 46.0,
                carrier_freq_ghz: 2.185,
                bandwidth_hz: 1e6,
            },
            channel: ChannelParams {
                noise_psd_dbm_hz: -174.0,
                noise_figure_db: 7.0,
                rician_k_db: 15.0,
                n_fading_draws: 16,
                uav_antenna_gain_dbi: 0.0,
            },
        }
    }

    pub fn area_center(&self) -> Vec3 {
        self.bounds.center()
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt_s: 1.0,
            v_max_mps: 10.0,
            max_steps: 300,
            lambda_rate: 1.0,
            lambda_switch: 0.5,
            lambda_goal: 0.5,
            eta_bnd: 1.0,
            r_req_bps: 2e6,
            arrival_radius_m: None,
            rate_bounds: None,
            allowed_networks: NetworkKind::ALL.to_vec(),
            uavs: vec![UavMission { start: Vec3::new(150.0, 200.0, 150.0), goal: Vec3::new(1850.0, 1800.0, 150.0) }],
            start_jitter_m: 0.0,
        }
    }
}

impl Default for DdqnConfig {
    fn default() -> Self {
        DdqnConfig {
            hidden: vec![128, 64],
            learning_rate: 0.0005,
            gamma: 0.97,
            batch_size: 128,
            buffer_capacity: 50_000,
            sync_period: 200,
            epsilon_init: 0.5,
            epsilon_final: 0.05,
            epsilon_decay_fraction: 0.6,
        }
    }
}

impl Default for CsacConfig {
    fn default() -> Self {
        CsacConfig {
            hidden: vec![128, 64],
            actor_lr: 0.0003,
            critic_lr: 0.0003,
            alpha_lr: 0.0003,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 128,
            buffer_capacity: 50_000,
            init_alpha: 0.2,
            target_entropy: -3.0,
            log_std_min: -20.0,
            log_std_max: 2.0,
            multiplier_lr: 0.01,
            cost_thresholds: vec![0.05, 0.0],
            init_multipliers: vec![0.0, 0.0],
            constrained: true,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { episodes: 3000, seed: 1, hold_steps: 1, precision: Precision::F32 }
    }
}

impl RunConfig {
    pub fn full_scale() -> Self {
        RunConfig {
            scenario: ScenarioConfig::full_scale(),
            env: EnvConfig::default(),
            ddqn: DdqnConfig::default(),
            csac: CsacConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// Desk-scale variant: 500 m x 500 m, one GN site, one AN site, two satellites.
    pub fn scaled() -> Self {
        let mut cfg = RunConfig::full_scale();
        let s = &mut cfg.scenario;
        s.bounds = Aabb::new(Vec3::new(0.0, 0.0, 100.0), Vec3::new(500.0, 500.0, 300.0));
        s.gn.sites = vec![[120.0, 130.0]];
        s.an.sites = vec![[400.0, 380.0]];
        let half_width = s.sn.coverage_half_width_m;
        s.sn.initial_ground_xy = vec![[250.0 - half_width / 2.0, 250.0], [250.0 + half_width / 2.0, 250.0]];
        cfg.env.v_max_mps = 20.0;
        cfg.env.max_steps = 60;
        cfg.env.uavs = vec![UavMission { start: Vec3::new(30.0, 470.0, 150.0), goal: Vec3::new(470.0, 30.0, 150.0) }];
        // `calibrate` output for this layout: 10 random-policy episodes, seed 1
        cfg.env.rate_bounds = Some(RateBounds { min_bps: 186_040.666_745_758_85, max_bps: 11_601_652.660_870_448 });
        cfg.train.episodes = 600;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        if cfg.scenario.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Version { found: cfg.scenario.schema_version, expected: CONFIG_SCHEMA_VERSION });
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        crate::scenario::validate(&self.scenario)?;
        let e = &self.env;
        if !(e.dt_s > 0.0 && e.v_max_mps > 0.0 && e.max_steps > 0) {
            return Err(Error::Config("dt, v_max and max_steps must be positive".into()));
        }
        if e.uavs.is_empty() {
            return Err(Error::Config("at least one UAV mission required".into()));
        }
        for m in &e.uavs {
            if !self.scenario.bounds.contains(m.start) || !self.scenario.bounds.contains(m.goal) {
                return Err(Error::Config("UAV start/goal outside the world box".into()));
            }
        }
        if e.allowed_networks.is_empty() {
            return Err(Error::Config("no network allowed for association".into()));
        }
        let c = &self.csac;
        if c.cost_thresholds.len() != c.init_multipliers.len() {
            return Err(Error::Config("cost thresholds and multipliers differ in length".into()));
        }
        if c.init_multipliers.iter().any(|&l| l < 0.0) || c.init_alpha <= 0.0 {
            return Err(Error::Config("multipliers must be >= 0 and alpha > 0".into()));
        }
        if self.ddqn.batch_size == 0 || c.batch_size == 0 || self.train.hold_steps == 0 {
            return Err(Error::Config("batch sizes and hold_steps must be positive".into()));
        }
        Ok(())
    }
}
