//! Problem instance, line-of-sight channel model, coverage geometry and SIC
//! decoding order.
//!
//! Everything in here is stored in SI units: meters, Watts, linear gains and
//! bps/Hz. Unit conversion happens at the config boundary only.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the HAP in every per-UAV vector.
pub const HAP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point3(pub [f64; 3]);

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3([x, y, z])
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn z(&self) -> f64 {
        self.0[2]
    }

    pub fn dist_sq(&self, other: &Point3) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn horizontal_dist(&self, other: &Point3) -> f64 {
        (self.x() - other.x()).hypot(self.y() - other.y())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UavKind {
    Hap,
    /// LAP with its 1-based index in the LAP set.
    Lap(usize),
}

/// Axis-aligned horizontal placement box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XyBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl XyBox {
    pub fn square(side: f64) -> Self {
        XyBox {
            x_min: 0.0,
            x_max: side,
            y_min: 0.0,
            y_max: side,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn clamp(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x_min, self.x_max), y.clamp(self.y_min, self.y_max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavParams {
    pub kind: UavKind,
    /// Channel power gain at the 1 m reference distance (linear).
    pub beta: f64,
    /// Maximum radiated power, W.
    pub p_max: f64,
    /// Half-angle of the coverage cone, rad.
    pub coverage_angle: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub xy_box: XyBox,
    /// Fronthaul capacity C_u, bps/Hz.
    pub fronthaul_capacity: f64,
}

impl UavParams {
    fn check(&self, idx: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidScenario(format!("UAV {idx}: {what}")));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.p_max > 0.0 && self.p_max.is_finite()) {
            return bad("p_max must be positive");
        }
        if !(self.coverage_angle > 0.0 && self.coverage_angle < std::f64::consts::FRAC_PI_2) {
            return bad("coverage angle must lie in (0, pi/2)");
        }
        if !(self.z_min <= self.z_max) {
            return bad("z_min > z_max");
        }
        let b = &self.xy_box;
        if !(b.x_min <= b.x_max && b.y_min <= b.y_max) {
            return bad("empty placement box");
        }
        if !(self.fronthaul_capacity >= 0.0) {
            return bad("negative fronthaul capacity");
        }
        Ok(())
    }

    /// Horizontal coverage radius at altitude `z`.
    pub fn coverage_radius(&self, z: f64) -> f64 {
        z * self.coverage_angle.tan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Element 0 is the HAP, elements 1..=L are LAPs.
    pub uavs: Vec<UavParams>,
    pub ue_positions: Vec<Point3>,
    /// Receiver noise power per UE, W.
    pub noise_power: Vec<f64>,
    /// Minimum rate per UE, bps/Hz.
    pub rate_threshold: Vec<f64>,
    /// Minimum inter-UAV distance, m.
    pub d_min: f64,
    /// Total fronthaul budget C_T, bps/Hz, when capacities were derived from it.
    pub total_fronthaul: Option<f64>,
}

impl Scenario {
    /// Checks the instance invariants and returns the scenario unchanged.
    pub fn validated(self) -> Result<Self> {
        if self.uavs.is_empty() || self.uavs[HAP].kind != UavKind::Hap {
            return Err(Error::InvalidScenario("element 0 must be the HAP".into()));
        }
        if self.uavs[1..].iter().any(|u| u.kind == UavKind::Hap) {
            return Err(Error::InvalidScenario("exactly one HAP allowed".into()));
        }
        if self.ue_positions.is_empty() {
            return Err(Error::InvalidScenario("at least one UE required".into()));
        }
        let k = self.ue_positions.len();
        if self.noise_power.len() != k || self.rate_threshold.len() != k {
            return Err(Error::InvalidScenario(
                "noise_power and rate_threshold must have one entry per UE".into(),
            ));
        }
        if self.noise_power.iter().any(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(Error::InvalidScenario("noise power must be positive".into()));
        }
        if self.rate_threshold.iter().any(|&r| !(r >= 0.0)) {
            return Err(Error::InvalidScenario("rate threshold must be >= 0".into()));
        }
        if !(self.d_min >= 0.0) {
            return Err(Error::InvalidScenario("d_min must be >= 0".into()));
        }
        for (i, u) in self.uavs.iter().enumerate() {
            u.check(i)?;
        }
        Ok(self)
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn num_uavs(&self) -> usize {
        self.uavs.len()
    }

    pub fn num_laps(&self) -> usize {
        self.uavs.len() - 1
    }

    /// Re-derives all per-UAV capacities from a total budget.
    pub fn with_total_fronthaul(mut self, c_total: f64) -> Self {
        let caps = fronthaul_split(c_total, self.num_laps());
        for (u, c) in self.uavs.iter_mut().zip(caps) {
            u.fronthaul_capacity = c;
        }
        self.total_fronthaul = Some(c_total);
        self
    }

    /// The stand-alone HAP network. When capacities came from a total budget,
    /// the whole budget goes to the HAP.
    pub fn hap_only(&self) -> Scenario {
        let mut s = self.clone();
        s.uavs.truncate(1);
        if let Some(c) = self.total_fronthaul {
            s = s.with_total_fronthaul(c);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub q: Vec<Point3>,
}

/// Coverage sets and per-UE SIC decoding orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    /// K_u: UEs inside UAV u's coverage cone, ascending.
    pub served_ues: Vec<Vec<usize>>,
    /// U_k: UAVs covering UE k, ascending.
    pub serving_uavs: Vec<Vec<usize>>,
    /// Per UE, the UAVs of U_k in decoding order (first entry decoded first).
    pub decode_order: Vec<Vec<usize>>,
}

impl Topology {
    pub fn serves(&self, k: usize, u: usize) -> bool {
        self.serving_uavs[k].binary_search(&u).is_ok()
    }

    /// 0-based SIC position of UAV `u` at UE `k`.
    pub fn decode_position(&self, k: usize, u: usize) -> Option<usize> {
        self.decode_order[k].iter().position(|&x| x == u)
    }

    pub fn num_ues(&self) -> usize {
        self.serving_uavs.len()
    }

    pub fn num_uavs(&self) -> usize {
        self.served_ues.len()
    }

    /// Same coverage sets, ignoring decoding order.
    pub fn same_sets(&self, other: &Topology) -> bool {
        self.served_ues == other.served_ues && self.serving_uavs == other.serving_uavs
    }
}

/// LoS channel gain `beta / |q_uav - q_ue|^2`.
pub fn channel_gain(beta: f64, q_uav: &Point3, q_ue: &Point3) -> Result<f64> {
    let d2 = q_uav.dist_sq(q_ue);
    if d2 <= 0.0 {
        return Err(Error::DegenerateGeometry { uav: 0, ue: 0 });
    }
    Ok(beta / d2)
}

/// K x U matrix of channel gains.
pub fn gain_matrix(scenario: &Scenario, placement: &Placement) -> Result<Vec<Vec<f64>>> {
    scenario
        .ue_positions
        .iter()
        .enumerate()
        .map(|(k, ue)| {
            scenario
                .uavs
                .iter()
                .zip(&placement.q)
                .enumerate()
                .map(|(u, (p, q))| {
                    channel_gain(p.beta, q, ue)
                        .map_err(|_| Error::DegenerateGeometry { uav: u, ue: k })
                })
                .collect()
        })
        .collect()
}

fn covers(scenario: &Scenario, placement: &Placement, u: usize, k: usize) -> bool {
    let q = &placement.q[u];
    q.horizontal_dist(&scenario.ue_positions[k]) <= scenario.uavs[u].coverage_radius(q.z())
}

/// Builds K_u and U_k from the coverage-cone test. The decoding order is the
/// ascending UAV index until [`decoding_order`] is applied.
pub fn coverage_sets(scenario: &Scenario, placement: &Placement) -> Result<Topology> {
    let (n_ue, n_uav) = (scenario.num_ues(), scenario.num_uavs());
    let mut served_ues = vec![Vec::new(); n_uav];
    let mut serving_uavs = vec![Vec::new(); n_ue];
    for u in 0..n_uav {
        for k in 0..n_ue {
            if covers(scenario, placement, u, k) {
                served_ues[u].push(k);
                serving_uavs[k].push(u);
            }
        }
    }
    let uncovered: Vec<Violation> = (0..n_ue)
        .filter(|&k| serving_uavs[k].first() != Some(&HAP))
        .map(|ue| Violation::NotCoveredByHap { ue })
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::InfeasibleScenario(uncovered));
    }
    let decode_order = serving_uavs.clone();
    Ok(Topology {
        served_ues,
        serving_uavs,
        decode_order,
    })
}

/// Sorts each U_k by descending received common power `P^c_u g_{k,u}`, ties
/// broken by ascending UAV index.
pub fn decoding_order(topology: &Topology, gains: &[Vec<f64>], common_powers: &[f64]) -> Topology {
    let mut out = topology.clone();
    for (k, order) in out.decode_order.iter_mut().enumerate() {
        order.clone_from(&topology.serving_uavs[k]);
        order.sort_by(|&a, &b| {
            let pa = common_powers[a] * gains[k][a];
            let pb = common_powers[b] * gains[k][b];
            pb.total_cmp(&pa).then(a.cmp(&b))
        });
    }
    out
}

/// Splits a total budget so that the HAP gets twice each LAP's share.
pub fn fronthaul_split(c_total: f64, num_laps: usize) -> Vec<f64> {
    let unit = c_total / (num_laps as f64 + 2.0);
    let mut caps = vec![unit; num_laps + 1];
    caps[HAP] = c_total - unit * num_laps as f64;
    caps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    OutsideBox { uav: usize, x: f64, y: f64 },
    Altitude { uav: usize, z: f64, z_min: f64, z_max: f64 },
    Safety { a: usize, b: usize, distance: f64, d_min: f64 },
    NotCoveredByHap { ue: usize },
    Shape(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutsideBox { uav, x, y } => {
                write!(f, "placement box: UAV {uav} at ({x:.1}, {y:.1}) m")
            }
            Violation::Altitude { uav, z, z_min, z_max } => write!(
                f,
                "altitude: UAV {uav} at z={z:.1} m outside [{z_min:.1}, {z_max:.1}]"
            ),
            Violation::Safety { a, b, distance, d_min } => write!(
                f,
                "safety: UAVs {a} and {b} are {distance:.1} m apart (d_min {d_min:.1} m)"
            ),
            Violation::NotCoveredByHap { ue } => write!(f, "coverage: UE {ue} outside HAP cone"),
            Violation::Shape(s) => write!(f, "shape: {s}"),
        }
    }
}

/// Lists every violated placement constraint. An empty list means the
/// placement is valid for the scenario.
pub fn validate_scenario(scenario: &Scenario, placement: &Placement) -> Vec<Violation> {
    let mut out = Vec::new();
    if placement.q.len() != scenario.num_uavs() {
        out.push(Violation::Shape(format!(
            "{} positions for {} UAVs",
            placement.q.len(),
            scenario.num_uavs()
        )));
        return out;
    }
    for (u, (p, q)) in scenario.uavs.iter().zip(&placement.q).enumerate() {
        if !p.xy_box.contains(q.x(), q.y()) {
            out.push(Violation::OutsideBox {
                uav: u,
                x: q.x(),
                y: q.y(),
            });
        }
        if q.z() < p.z_min || q.z() > p.z_max {
            out.push(Violation::Altitude {
                uav: u,
                z: q.z(),
                z_min: p.z_min,
                z_max: p.z_max,
            });
        }
    }
    let d2 = scenario.d_min * scenario.d_min;
    for a in 0..placement.q.len() {
        for b in a + 1..placement.q.len() {
            let dist2 = placement.q[a].dist_sq(&placement.q[b]);
            if dist2 < d2 {
                out.push(Violation::Safety {
                    a,
                    b,
                    distance: dist2.sqrt(),
                    d_min: scenario.d_min,
                });
            }
        }
    }
    for k in 0..scenario.num_ues() {
        if !covers(scenario, placement, HAP, k) {
            out.push(Violation::NotCoveredByHap { ue: k });
        }
    }
    out
}
