//! Comparison policies and the decomposition of every policy into an
//! association rule and a flight rule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::LinkMeasurement;
use crate::config::NetworkKind;
use crate::env::argmax_by;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::scenario::BsId;

/// Per-step greedy association rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GreedyRule {
    Rsrp,
    Rate,
    Sinr,
}

impl GreedyRule {
    pub fn select(self, measurements: &[LinkMeasurement], allowed: &[NetworkKind]) -> Option<BsId> {
        match self {
            GreedyRule::Rsrp => argmax_by(measurements, allowed, |m| m.rsrp_dbm),
            GreedyRule::Rate => argmax_by(measurements, allowed, |m| m.rate_bps),
            GreedyRule::Sinr => argmax_by(measurements, allowed, |m| m.sinr_linear),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopRule {
    Ddqn,
    Greedy(GreedyRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LowRule {
    /// Constrained SAC.
    Csac,
    /// Plain SAC: multipliers pinned at zero.
    Sac,
    StraightLine,
    /// One flat double-Q agent over [`DIRECT_RL_DIRECTIONS`]; association is max-SINR.
    DirectRl,
}

/// Every policy the harness can train or evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyKind {
    /// DDQN association over CSAC flight.
    Hdrl,
    /// Straight-line flight, max-RSRP association.
    StraightLine,
    DirectRl,
    RsrpCsac,
    MaxRateCsac,
    MaxSinrCsac,
    DdqnSac,
    DdqnSl,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 8] = [
        PolicyKind::Hdrl,
        PolicyKind::StraightLine,
        PolicyKind::DirectRl,
        PolicyKind::RsrpCsac,
        PolicyKind::MaxRateCsac,
        PolicyKind::MaxSinrCsac,
        PolicyKind::DdqnSac,
        PolicyKind::DdqnSl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Hdrl => "hdrl",
            PolicyKind::StraightLine => "sl",
            PolicyKind::DirectRl => "direct-rl",
            PolicyKind::RsrpCsac => "rsrp-csac",
            PolicyKind::MaxRateCsac => "maxrate-csac",
            PolicyKind::MaxSinrCsac => "maxsinr-csac",
            PolicyKind::DdqnSac => "ddqn-sac",
            PolicyKind::DdqnSl => "ddqn-sl",
        }
    }

    pub fn top(self) -> TopRule {
        match self {
            PolicyKind::Hdrl | PolicyKind::DdqnSac | PolicyKind::DdqnSl => TopRule::Ddqn,
            PolicyKind::StraightLine | PolicyKind::RsrpCsac => TopRule::Greedy(GreedyRule::Rsrp),
            PolicyKind::MaxRateCsac => TopRule::Greedy(GreedyRule::Rate),
            PolicyKind::MaxSinrCsac | PolicyKind::DirectRl => TopRule::Greedy(GreedyRule::Sinr),
        }
    }

    pub fn low(self) -> LowRule {
        match self {
            PolicyKind::Hdrl | PolicyKind::RsrpCsac | PolicyKind::MaxRateCsac | PolicyKind::MaxSinrCsac => {
                LowRule::Csac
            }
            PolicyKind::DdqnSac => LowRule::Sac,
            PolicyKind::StraightLine | PolicyKind::DdqnSl => LowRule::StraightLine,
            PolicyKind::DirectRl => LowRule::DirectRl,
        }
    }

    /// The policy whose training run supplies this policy's learned parts.
    ///
    /// Greedy-association ablations reuse the flight agent trained under the
    /// full method, so that only the association level differs.
    pub fn trained_with(self) -> PolicyKind {
        match self {
            PolicyKind::RsrpCsac | PolicyKind::MaxRateCsac | PolicyKind::MaxSinrCsac => PolicyKind::Hdrl,
            other => other,
        }
    }

    /// Whether any component learns.
    pub fn is_trainable(self) -> bool {
        self.top() == TopRule::Ddqn || self.low() != LowRule::StraightLine
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<PolicyKind> for String {
    fn from(p: PolicyKind) -> String {
        p.name().to_string()
    }
}

impl TryFrom<String> for PolicyKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', '+'], "-");
        let alias = match key.as_str() {
            "ddqn-csac" => "hdrl",
            "straight-line" => "sl",
            "direct" | "drl" => "direct-rl",
            other => other,
        };
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == alias)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

/// Unit vector from `pos` to `goal`; `None` when already there.
pub fn straight_line_direction(pos: Vec3, goal: Vec3) -> Option<Vec3> {
    (goal - pos).normalized()
}

/// Discrete flight actions of the direct-RL baseline: `+x, -x, +y, -y, +z, -z`.
pub const DIRECT_RL_DIRECTIONS: [Vec3; 6] = [
    Vec3 { x: 1.0, y: 0.0, z: 0.0 },
    Vec3 { x: -1.0, y: 0.0, z: 0.0 },
    Vec3 { x: 0.0, y: 1.0, z: 0.0 },
    Vec3 { x: 0.0, y: -1.0, z: 0.0 },
    Vec3 { x: 0.0, y: 0.0, z: 1.0 },
    Vec3 { x: 0.0, y: 0.0, z: -1.0 },
];
