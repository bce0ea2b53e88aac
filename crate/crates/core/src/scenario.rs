//! Static and kinematic world: airspace box, statistical building map,
//! base-station geometry and LEO satellite motion.

use rand::distr::{Distribution, Open01, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BuildingParams, NetworkKind, ScenarioConfig, SectorNetwork};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};

/// Minimum separation between two station sites.
const SITE_SEPARATION_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub center_xy: [f64; 2],
    pub footprint_wh: [f64; 2],
    pub height: f64,
}

impl Building {
    pub fn aabb(&self) -> Aabb {
        let [cx, cy] = self.center_xy;
        let [w, h] = self.footprint_wh;
        Aabb::new(Vec3::new(cx - w / 2.0, cy - h / 2.0, 0.0), Vec3::new(cx + w / 2.0, cy + h / 2.0, self.height))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BuildingMap {
    pub buildings: Vec<Building>,
    pub params: BuildingParams,
    pub seed: u64,
    #[serde(skip)]
    boxes: Vec<Aabb>,
    #[serde(skip)]
    tallest: f64,
}

impl BuildingMap {
    fn from_buildings(buildings: Vec<Building>, params: BuildingParams, seed: u64) -> Self {
        let boxes: Vec<Aabb> = buildings.iter().map(Building::aabb).collect();
        let tallest = buildings.iter().map(|b| b.height).fold(0.0, f64::max);
        BuildingMap { buildings, params, seed, boxes, tallest }
    }

    pub fn empty() -> Self {
        BuildingMap::from_buildings(Vec::new(), BuildingParams { alpha: 0.0, beta_per_km2: 0.0, gamma_m: 0.0 }, 0)
    }

    /// Map holding exactly the given boxes (test scenes, imported maps).
    pub fn with_buildings(buildings: Vec<Building>) -> Self {
        let params = BuildingParams { alpha: 0.0, beta_per_km2: 0.0, gamma_m: 0.0 };
        BuildingMap::from_buildings(buildings, params, 0)
    }

    pub fn len(&self) -> usize {
        self.buildings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buildings.is_empty()
    }

    pub fn tallest(&self) -> f64 {
        self.tallest
    }

    pub fn boxes(&self) -> &[Aabb] {
        &self.boxes
    }
}

/// Jittered-grid realization of the ITU statistical building model.
///
/// `round(beta * area_km2)` buildings of side `sqrt(alpha / beta)` km, one
/// per randomly chosen grid cell, heights Rayleigh-distributed with scale
/// `gamma`. Footprints are clipped to `bounds`.
pub fn generate_buildings(params: &BuildingParams, bounds: &Aabb, seed: u64) -> Result<BuildingMap> {
    let BuildingParams { alpha, beta_per_km2, gamma_m } = *params;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("building ratio alpha must be in (0,1), got {alpha}")));
    }
    if !(beta_per_km2 > 0.0) || !(gamma_m > 0.0) {
        return Err(Error::Config("building density beta and height scale gamma must be > 0".into()));
    }
    let ext = bounds.extent();
    let (width, depth) = (ext.x, ext.y);
    let area_km2 = width * depth / 1e6;
    let count = (beta_per_km2 * area_km2).round() as usize;
    let side = (alpha / beta_per_km2).sqrt() * 1000.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buildings = Vec::with_capacity(count);
    if count > 0 {
        let nx = ((count as f64 * width / depth).sqrt().ceil() as usize).max(1);
        let ny = count.div_ceil(nx);
        let (cw, ch) = (width / nx as f64, depth / ny as f64);
        let mut cells: Vec<usize> = (0..nx * ny).collect();
        cells.shuffle(&mut rng);
        cells.truncate(count);
        cells.sort_unstable();
        let unit = Uniform::new(-1.0, 1.0).expect("valid range");
        for cell in cells {
            let (ix, iy) = (cell % nx, cell / nx);
            let mx = ((cw - side) / 2.0).max(0.0);
            let my = ((ch - side) / 2.0).max(0.0);
            let cx = bounds.min.x + (ix as f64 + 0.5) * cw + mx * unit.sample(&mut rng);
            let cy = bounds.min.y + (iy as f64 + 0.5) * ch + my * unit.sample(&mut rng);
            let u: f64 = Open01.sample(&mut rng);
            let height = gamma_m * (-2.0 * u.ln()).sqrt();
            // clip footprint to the world
            let x0 = (cx - side / 2.0).max(bounds.min.x);
            let x1 = (cx + side / 2.0).min(bounds.max.x);
            let y0 = (cy - side / 2.0).max(bounds.min.y);
            let y1 = (cy + side / 2.0).min(bounds.max.y);
            buildings.push(Building {
                center_xy: [(x0 + x1) / 2.0, (y0 + y1) / 2.0],
                footprint_wh: [(x1 - x0).max(0.0), (y1 - y0).max(0.0)],
                height,
            });
        }
    }
    Ok(BuildingMap::from_buildings(buildings, params.clone(), seed))
}

/// True iff the open segment `(a, b)` crosses no building.
pub fn is_los(a: Vec3, b: Vec3, map: &BuildingMap) -> bool {
    if a.z > map.tallest && b.z > map.tallest {
        return true;
    }
    !map.boxes.iter().any(|bx| bx.segment_intersects(a, b))
}

/// One antenna panel of a site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorSpec {
    pub azimuth_deg: f64,
    /// Electrical downtilt, degrees; negative means uptilt.
    pub tilt_deg: f64,
    pub array_rows: usize,
    pub array_cols: usize,
    pub element_gain_dbi: f64,
    /// Nadir-pointing beam (satellites); azimuth and tilt are ignored.
    pub nadir: bool,
}

impl SectorSpec {
    /// Orthonormal frame `(boresight, horizontal, vertical)` of the panel.
    ///
    /// Array elements lie in the span of the last two axes.
    pub fn frame(&self) -> PanelFrame {
        if self.nadir {
            return PanelFrame {
                normal: Vec3::new(0.0, 0.0, -1.0),
                boresight: Vec3::new(0.0, 0.0, -1.0),
                horizontal: Vec3::new(1.0, 0.0, 0.0),
                vertical: Vec3::new(0.0, 1.0, 0.0),
                beam_vertical: Vec3::new(0.0, 1.0, 0.0),
            };
        }
        let az = self.azimuth_deg.to_radians();
        let el = -self.tilt_deg.to_radians();
        let normal = Vec3::new(az.cos(), az.sin(), 0.0);
        let horizontal = Vec3::new(-az.sin(), az.cos(), 0.0);
        let vertical = Vec3::new(0.0, 0.0, 1.0);
        let boresight = normal * el.cos() + vertical * el.sin();
        let beam_vertical = normal * (-el.sin()) + vertical * el.cos();
        PanelFrame { normal, boresight, horizontal, vertical, beam_vertical }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelFrame {
    pub normal: Vec3,
    pub boresight: Vec3,
    pub horizontal: Vec3,
    pub vertical: Vec3,
    /// Completes `(boresight, horizontal)` to a right-handed beam frame.
    pub beam_vertical: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSite {
    pub network_kind: NetworkKind,
    pub site_position: Vec3,
    pub sectors: Vec<SectorSpec>,
    pub tx_power_dbm: f64,
    pub carrier_freq_ghz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteEphemeris {
    pub altitude_m: f64,
    pub initial_ground_xy: [f64; 2],
    /// Ground-projected velocity; the track runs along +x.
    pub velocity: Vec3,
    pub window_min_x: f64,
    pub coverage_wrap_period_s: f64,
}

impl SatelliteEphemeris {
    pub fn speed(&self) -> f64 {
        self.velocity.norm()
    }
}

/// Satellite position at time `t`; leaving the coverage window wraps to its start.
pub fn satellite_position(eph: &SatelliteEphemeris, t: f64) -> Vec3 {
    let period = eph.coverage_wrap_period_s;
    let tm = t.rem_euclid(period);
    let span = eph.speed() * period;
    let [x0, y0] = eph.initial_ground_xy;
    let mut x = x0 + eph.velocity.x * tm;
    if x - eph.window_min_x >= span {
        x -= span;
    }
    Vec3::new(x, y0 + eph.velocity.y * tm, eph.altitude_m)
}

/// Stable identifier of a cell (GN/AN sector or SN beam), index into [`World::cells`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BsId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CellAnchor {
    Site(usize),
    Satellite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: BsId,
    pub kind: NetworkKind,
    pub anchor: CellAnchor,
    pub sector: SectorSpec,
    pub tx_power_dbm: f64,
    pub carrier_freq_ghz: f64,
    pub bandwidth_hz: f64,
}

/// Immutable deployed world.
#[derive(Debug, Clone)]
pub struct World {
    pub config: ScenarioConfig,
    pub buildings: BuildingMap,
    pub sites: Vec<StationSite>,
    pub satellites: Vec<SatelliteEphemeris>,
    pub cells: Vec<Cell>,
}

impl World {
    pub fn bounds(&self) -> &Aabb {
        &self.config.bounds
    }

    pub fn cell(&self, id: BsId) -> &Cell {
        &self.cells[id.0]
    }

    pub fn cell_position(&self, id: BsId, t: f64) -> Vec3 {
        match self.cells[id.0].anchor {
            CellAnchor::Site(s) => self.sites[s].site_position,
            CellAnchor::Satellite(s) => satellite_position(&self.satellites[s], t),
        }
    }

    pub fn cells_of(&self, kind: NetworkKind) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(move |c| c.kind == kind)
    }

    pub fn count(&self, kind: NetworkKind) -> usize {
        self.cells_of(kind).count()
    }

    /// Thermal noise power over `bandwidth_hz`, watts.
    pub fn noise_watts(&self, bandwidth_hz: f64) -> f64 {
        let ch = &self.config.channel;
        let dbm = ch.noise_psd_dbm_hz + ch.noise_figure_db + 10.0 * bandwidth_hz.log10();
        dbm_to_watts(dbm)
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub(crate) fn validate(cfg: &ScenarioConfig) -> Result<()> {
    let b = &cfg.bounds;
    if !(b.min.is_finite() && b.max.is_finite()) || b.max.x <= b.min.x || b.max.y <= b.min.y || b.max.z < b.min.z {
        return Err(Error::Config("world bounds must be finite with max > min".into()));
    }
    let bp = &cfg.buildings;
    if !(bp.alpha > 0.0 && bp.alpha < 1.0 && bp.beta_per_km2 > 0.0 && bp.gamma_m > 0.0) {
        return Err(Error::Config("building parameters must satisfy 0<alpha<1, beta>0, gamma>0".into()));
    }
    if cfg.sn.initial_ground_xy.is_empty() {
        return Err(Error::Config("at least one satellite is required for SN coverage".into()));
    }
    if !(cfg.sn.altitude_m > 0.0 && cfg.sn.speed_mps > 0.0 && cfg.sn.coverage_half_width_m > 0.0) {
        return Err(Error::Config("satellite altitude, speed and window must be > 0".into()));
    }
    let cx = b.center().x;
    let w = cfg.sn.coverage_half_width_m;
    for xy in &cfg.sn.initial_ground_xy {
        if xy[0] < cx - w || xy[0] >= cx + w {
            return Err(Error::Config("satellite starts outside its coverage window".into()));
        }
    }
    let mut sites: Vec<Vec3> = Vec::new();
    for (label, net) in [("GN", &cfg.gn), ("AN", &cfg.an)] {
        if net.sector_azimuths_deg.is_empty() || net.array_rows == 0 || net.array_cols == 0 {
            return Err(Error::Config(format!("{label} needs at least one sector and a non-empty array")));
        }
        for xy in &net.sites {
            if xy[0] < b.min.x || xy[0] > b.max.x || xy[1] < b.min.y || xy[1] > b.max.y {
                return Err(Error::Config(format!("{label} site {xy:?} outside the world bounds")));
            }
            let p = Vec3::new(xy[0], xy[1], net.antenna_height_m);
            if sites.iter().any(|q| q.distance(p) < SITE_SEPARATION_M) {
                return Err(Error::Config(format!("overlapping station sites at {xy:?}")));
            }
            sites.push(p);
        }
    }
    let ch = &cfg.channel;
    if ch.n_fading_draws == 0 {
        return Err(Error::Config("n_fading_draws must be >= 1".into()));
    }
    Ok(())
}

fn sector_sites(kind: NetworkKind, net: &SectorNetwork) -> Vec<StationSite> {
    net.sites
        .iter()
        .map(|xy| StationSite {
            network_kind: kind,
            site_position: Vec3::new(xy[0], xy[1], net.antenna_height_m),
            sectors: net
                .sector_azimuths_deg
                .iter()
                .map(|&az| SectorSpec {
                    azimuth_deg: az,
                    tilt_deg: net.downtilt_deg,
                    array_rows: net.array_rows,
                    array_cols: net.array_cols,
                    element_gain_dbi: net.element_gain_dbi,
                    nadir: false,
                })
                .collect(),
            tx_power_dbm: net.tx_power_dbm,
            carrier_freq_ghz: net.carrier_freq_ghz,
            bandwidth_hz: net.bandwidth_hz,
        })
        .collect()
}

/// Validate a scenario and build its immutable world.
pub fn deploy_scenario(config: &ScenarioConfig) -> Result<World> {
    validate(config)?;
    let buildings = generate_buildings(&config.buildings, &config.bounds, config.building_seed)?;
    let mut sites = sector_sites(NetworkKind::Ground, &config.gn);
    sites.extend(sector_sites(NetworkKind::Air, &config.an));

    let sn = &config.sn;
    let half = sn.coverage_half_width_m;
    let satellites: Vec<SatelliteEphemeris> = sn
        .initial_ground_xy
        .iter()
        .map(|&xy| SatelliteEphemeris {
            altitude_m: sn.altitude_m,
            initial_ground_xy: xy,
            velocity: Vec3::new(sn.speed_mps, 0.0, 0.0),
            window_min_x: config.bounds.center().x - half,
            coverage_wrap_period_s: 2.0 * half / sn.speed_mps,
        })
        .collect();

    let mut cells = Vec::new();
    for (si, site) in sites.iter().enumerate() {
        for sector in &site.sectors {
            cells.push(Cell {
                id: BsId(cells.len()),
                kind: site.network_kind,
                anchor: CellAnchor::Site(si),
                sector: *sector,
                tx_power_dbm: site.tx_power_dbm,
                carrier_freq_ghz: site.carrier_freq_ghz,
                bandwidth_hz: site.bandwidth_hz,
            });
        }
    }
    for si in 0..satellites.len() {
        cells.push(Cell {
            id: BsId(cells.len()),
            kind: NetworkKind::Space,
            anchor: CellAnchor::Satellite(si),
            sector: SectorSpec {
                azimuth_deg: 0.0,
                tilt_deg: 0.0,
                array_rows: sn.array_rows,
                array_cols: sn.array_cols,
                element_gain_dbi: sn.element_gain_dbi,
                nadir: true,
            },
            tx_power_dbm: sn.tx_power_dbm,
            carrier_freq_ghz: sn.carrier_freq_ghz,
            bandwidth_hz: sn.bandwidth_hz,
        });
    }
    Ok(World { config: config.clone(), buildings, sites, satellites, cells })
}
