//! Link-level channel: antenna gains, path loss, small-scale fading,
//! received power, per-network SINR and fading-averaged achievable rate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::NetworkKind;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scenario::{dbm_to_watts, is_los, BsId, SectorSpec, World};

/// Cap of the element-pattern attenuation (front-to-back ratio), dB.
pub const ELEMENT_ATTENUATION_CAP_DB: f64 = 30.0;
/// 3 dB beamwidth of the parabolic element pattern, degrees.
pub const ELEMENT_BEAMWIDTH_DEG: f64 = 65.0;
/// Floor on the normalized array factor so gains stay finite in exact nulls.
const ARRAY_FACTOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FadingModel {
    Rayleigh,
    Rician { k_db: f64 },
}

/// One small-scale power gain `|h|^2` with unit mean.
///
/// Both kinds consume exactly two standard normals so the random stream
/// does not depend on which links are in LoS.
pub fn draw_fading<R: Rng + ?Sized>(model: FadingModel, rng: &mut R) -> f64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    let (re, im) = (re * std::f64::consts::FRAC_1_SQRT_2, im * std::f64::consts::FRAC_1_SQRT_2);
    match model {
        FadingModel::Rayleigh => re * re + im * im,
        FadingModel::Rician { k_db } => {
            let k = 10f64.powf(k_db / 10.0);
            if k.is_infinite() {
                return 1.0;
            }
            let los = (k / (k + 1.0)).sqrt();
            let s = (1.0 / (k + 1.0)).sqrt();
            let (a, b) = (los + s * re, s * im);
            a * a + b * b
        }
    }
}

/// `|sum_{m<n} e^{j m psi}|^2`.
fn uniform_array_power(n: usize, psi: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for m in 0..n {
        let ph = m as f64 * psi;
        re += ph.cos();
        im += ph.sin();
    }
    re * re + im * im
}

/// Gain of one sector panel towards `direction` (unit vector from the panel), dBi.
///
/// Parabolic element pattern capped at 30 dB attenuation plus the array
/// factor of a half-wavelength uniform planar array steered to the sector
/// boresight. Directions behind the beam only see the element pattern.
pub fn antenna_gain(sector: &SectorSpec, direction: Vec3) -> f64 {
    let f = sector.frame();
    let along = direction.dot(f.boresight);
    let across = direction.dot(f.horizontal);
    let up = direction.dot(f.beam_vertical);
    let phi = across.atan2(along).to_degrees();
    let theta = up.atan2(along.hypot(across)).to_degrees();
    let attenuation = (12.0 * (theta / ELEMENT_BEAMWIDTH_DEG).powi(2) + 12.0 * (phi / ELEMENT_BEAMWIDTH_DEG).powi(2))
        .min(ELEMENT_ATTENUATION_CAP_DB);
    let element = sector.element_gain_dbi - attenuation;
    if along <= 0.0 {
        return element;
    }
    let pi = std::f64::consts::PI;
    let psi_v = pi * (direction.dot(f.vertical) - f.boresight.dot(f.vertical));
    let psi_h = pi * (direction.dot(f.horizontal) - f.boresight.dot(f.horizontal));
    let n = (sector.array_rows * sector.array_cols) as f64;
    let af = uniform_array_power(sector.array_rows, psi_v) * uniform_array_power(sector.array_cols, psi_h) / n;
    element + 10.0 * af.max(ARRAY_FACTOR_FLOOR).log10()
}

/// Large-scale path loss, dB.
///
/// GN/AN: urban-macro LoS/NLoS expressions; SN: free-space loss (LoS).
pub fn path_loss(kind: NetworkKind, los: bool, d3d_m: f64, fc_ghz: f64, uav_height_m: f64) -> Result<f64> {
    if !(d3d_m > 0.0) {
        return Err(Error::Domain(format!("path loss needs positive distance, got {d3d_m}")));
    }
    let f_term = 20.0 * fc_ghz.log10();
    Ok(match kind {
        NetworkKind::Ground | NetworkKind::Air => {
            let pl_los = 28.0 + 22.0 * d3d_m.log10() + f_term;
            if los {
                pl_los
            } else {
                let pl_nlos = 13.54 + 39.08 * d3d_m.log10() + f_term - 0.6 * (uav_height_m - 1.5);
                pl_los.max(pl_nlos)
            }
        }
        NetworkKind::Space => 32.45 + f_term + 20.0 * d3d_m.log10(),
    })
}

/// `P_tx * 10^(-PL/10) * 10^(G/10) * h`, watts.
pub fn received_power(tx_power_dbm: f64, path_loss_db: f64, gain_db: f64, fading: f64) -> f64 {
    dbm_to_watts(tx_power_dbm) * 10f64.powf(-path_loss_db / 10.0) * 10f64.powf(gain_db / 10.0) * fading
}

/// Serving power over same-network interference plus noise.
pub fn sinr(serving_w: f64, interferers_w: &[f64], noise_w: f64) -> Result<f64> {
    if !(noise_w > 0.0) {
        return Err(Error::Domain(format!("noise power must be positive, got {noise_w}")));
    }
    Ok(sinr_unchecked(serving_w, interferers_w.iter().copied(), noise_w))
}

fn sinr_unchecked(serving_w: f64, interferers_w: impl Iterator<Item = f64>, noise_w: f64) -> f64 {
    let mut total = 0.0;
    for p in interferers_w {
        total += p;
    }
    serving_w / (total + noise_w)
}

/// A transmitter as seen by the UAV: fading-free received power and fading law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGain {
    pub mean_power_w: f64,
    pub fading: FadingModel,
}

/// Fading-averaged rate of `links[serving]` with every other entry as
/// an interferer: `B * mean_k log2(1 + SINR_k)`.
///
/// Each draw samples the fading of every link in slice order.
pub fn expected_rate<R: Rng + ?Sized>(
    links: &[LinkGain],
    serving: usize,
    bandwidth_hz: f64,
    noise_w: f64,
    n_fading_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_fading_draws == 0 {
        return Err(Error::Domain("n_fading_draws must be >= 1".into()));
    }
    if serving >= links.len() {
        return Err(Error::Domain("serving index out of range".into()));
    }
    let rates = network_rates(links, bandwidth_hz, noise_w, n_fading_draws, rng)?;
    Ok(rates[serving])
}

/// Rates of every link when it serves, sharing one set of fading draws.
pub fn network_rates<R: Rng + ?Sized>(
    links: &[LinkGain],
    bandwidth_hz: f64,
    noise_w: f64,
    n_fading_draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(noise_w > 0.0) {
        return Err(Error::Domain(format!("noise power must be positive, got {noise_w}")));
    }
    let n = links.len();
    let mut acc = vec![0.0; n];
    let mut powers = vec![0.0; n];
    for _ in 0..n_fading_draws {
        for (p, l) in powers.iter_mut().zip(links) {
            *p = l.mean_power_w * draw_fading(l.fading, rng);
        }
        for i in 0..n {
            let others = powers.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &p)| p);
            acc[i] += (1.0 + sinr_unchecked(powers[i], others, noise_w)).log2();
        }
    }
    Ok(acc.into_iter().map(|a| bandwidth_hz * (a / n_fading_draws as f64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMeasurement {
    pub bs_id: BsId,
    pub kind: NetworkKind,
    pub los: bool,
    /// Fading-averaged received power, dBm.
    pub rsrp_dbm: f64,
    /// Large-scale SINR (fading at its unit mean).
    pub sinr_linear: f64,
    /// Fading-averaged achievable rate, bit/s.
    pub rate_bps: f64,
}

/// Deterministic part of one UAV-cell link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub los: bool,
    pub distance_m: f64,
    pub path_loss_db: f64,
    pub gain_db: f64,
    pub mean_power_w: f64,
    pub fading: FadingModel,
}

pub fn link_budget(world: &World, bs: BsId, uav_pos: Vec3, t: f64) -> Result<LinkBudget> {
    let cell = world.cell(bs);
    let tx = world.cell_position(bs, t);
    let k_db = world.config.channel.rician_k_db;
    let los = match cell.kind {
        NetworkKind::Space => true,
        _ => is_los(tx, uav_pos, &world.buildings),
    };
    let d = tx.distance(uav_pos);
    let path_loss_db = path_loss(cell.kind, los, d, cell.carrier_freq_ghz, uav_pos.z)?;
    let dir = (uav_pos - tx).normalized().ok_or_else(|| Error::Domain("UAV coincides with a transmitter".into()))?;
    let gain_db = antenna_gain(&cell.sector, dir) + world.config.channel.uav_antenna_gain_dbi;
    let fading = if los { FadingModel::Rician { k_db } } else { FadingModel::Rayleigh };
    Ok(LinkBudget {
        los,
        distance_m: d,
        path_loss_db,
        gain_db,
        mean_power_w: received_power(cell.tx_power_dbm, path_loss_db, gain_db, 1.0),
        fading,
    })
}

/// Measure every cell of every network at `uav_pos`.
///
/// Networks are processed in GN, AN, SN order and only interfere within
/// themselves (orthogonal bands).
pub fn measure_all<R: Rng + ?Sized>(world: &World, uav_pos: Vec3, t: f64, rng: &mut R) -> Result<Vec<LinkMeasurement>> {
    if !uav_pos.is_finite() || !world.bounds().contains(uav_pos) {
        return Err(Error::Domain(format!("UAV position {uav_pos:?} outside the world box")));
    }
    let draws = world.config.channel.n_fading_draws;
    let mut out = Vec::with_capacity(world.cells.len());
    for kind in NetworkKind::ALL {
        let cells: Vec<BsId> = world.cells_of(kind).map(|c| c.id).collect();
        if cells.is_empty() {
            continue;
        }
        let budgets = cells.iter().map(|&id| link_budget(world, id, uav_pos, t)).collect::<Result<Vec<_>>>()?;
        let links: Vec<LinkGain> =
            budgets.iter().map(|b| LinkGain { mean_power_w: b.mean_power_w, fading: b.fading }).collect();
        // one carrier per network
        let bandwidth = world.cell(cells[0]).bandwidth_hz;
        let noise = world.noise_watts(bandwidth);
        let rates = network_rates(&links, bandwidth, noise, draws, rng)?;
        for (i, (&id, b)) in cells.iter().zip(&budgets).enumerate() {
            let others = links.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, l)| l.mean_power_w);
            out.push(LinkMeasurement {
                bs_id: id,
                kind,
                los: b.los,
                rsrp_dbm: 10.0 * b.mean_power_w.log10() + 30.0,
                sinr_linear: sinr_unchecked(b.mean_power_w, others, noise),
                rate_bps: rates[i],
            });
        }
    }
    Ok(out)
}
