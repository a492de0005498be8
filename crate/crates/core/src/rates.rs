//! Exact rate, interference, power and fronthaul expressions.
//!
//! These are the reference evaluations every surrogate bound and every solver
//! output is checked against. No approximation happens in this module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gain_matrix, Placement, Scenario, Topology, HAP};

/// Powers, quantization noise variances and common-rate shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// P^p_k, W.
    pub p_private: Vec<f64>,
    /// P^c_u, W.
    pub p_common: Vec<f64>,
    /// sigma^2_omega_u, W.
    pub quant_var: Vec<f64>,
    /// R^c_{k,u}, bps/Hz, K x U. Must be zero for k outside K_u.
    pub r_common: Vec<Vec<f64>>,
}

impl Allocation {
    pub fn zeros(num_ues: usize, num_uavs: usize) -> Self {
        Allocation {
            p_private: vec![0.0; num_ues],
            p_common: vec![0.0; num_uavs],
            quant_var: vec![0.0; num_uavs],
            r_common: vec![vec![0.0; num_uavs]; num_ues],
        }
    }

    /// Multiplies every power-like quantity by `c`.
    pub fn scale_powers(&self, c: f64) -> Self {
        let mut a = self.clone();
        a.p_private.iter_mut().for_each(|p| *p *= c);
        a.p_common.iter_mut().for_each(|p| *p *= c);
        a.quant_var.iter_mut().for_each(|p| *p *= c);
        a
    }

    /// Total common rate carried by UAV `u`.
    pub fn common_load(&self, u: usize) -> f64 {
        self.r_common.iter().map(|row| row[u]).sum()
    }
}

/// A scenario evaluated at a placement under a (possibly frozen) topology.
#[derive(Debug, Clone)]
pub struct Network<'a> {
    pub scenario: &'a Scenario,
    pub placement: &'a Placement,
    pub topology: &'a Topology,
    /// g_{k,u}, K x U.
    pub gains: Vec<Vec<f64>>,
}

impl<'a> Network<'a> {
    pub fn new(scenario: &'a Scenario, placement: &'a Placement, topology: &'a Topology) -> Result<Self> {
        if placement.q.len() != scenario.num_uavs()
            || topology.num_uavs() != scenario.num_uavs()
            || topology.num_ues() != scenario.num_ues()
        {
            return Err(Error::InvalidScenario("shape mismatch between scenario, placement and topology".into()));
        }
        Ok(Network {
            scenario,
            placement,
            topology,
            gains: gain_matrix(scenario, placement)?,
        })
    }

    pub fn num_ues(&self) -> usize {
        self.scenario.num_ues()
    }

    pub fn num_uavs(&self) -> usize {
        self.scenario.num_uavs()
    }

    fn check_pair(&self, k: usize, u: usize) -> Result<()> {
        if self.topology.serves(k, u) {
            Ok(())
        } else {
            Err(Error::Association { ue: k, uav: u })
        }
    }
}

/// sigma^2 of the CU baseband signal for `uav`.
pub fn tx_signal_variance(alloc: &Allocation, uav: usize) -> f64 {
    if uav == HAP {
        alloc.p_private.iter().sum::<f64>() + alloc.p_common[HAP]
    } else {
        alloc.p_common[uav]
    }
}

/// Required fronthaul rate `log2(1 + sigma_x^2 / sigma_omega^2)`.
pub fn fronthaul_rate(alloc: &Allocation, uav: usize) -> Result<f64> {
    let q = alloc.quant_var[uav];
    if !(q > 0.0) {
        return Err(Error::Domain(format!("UAV {uav}: quantization variance must be positive, got {q}")));
    }
    Ok((tx_signal_variance(alloc, uav) / q).ln_1p() / std::f64::consts::LN_2)
}

pub fn radiated_power(alloc: &Allocation, uav: usize) -> f64 {
    tx_signal_variance(alloc, uav) + alloc.quant_var[uav]
}

fn private_sum(alloc: &Allocation) -> f64 {
    alloc.p_private.iter().sum()
}

fn quant_noise_at(net: &Network<'_>, alloc: &Allocation, k: usize) -> f64 {
    net.topology.serving_uavs[k]
        .iter()
        .map(|&i| alloc.quant_var[i] * net.gains[k][i])
        .sum()
}

/// nu^c_{k,u}: interference plus noise while UE `k` decodes UAV `u`'s common
/// signal. Signals later in the SIC order are uncanceled; quantization noise
/// of every serving UAV is never canceled.
pub fn common_interference(net: &Network<'_>, alloc: &Allocation, k: usize, u: usize) -> Result<f64> {
    net.check_pair(k, u)?;
    let order = &net.topology.decode_order[k];
    let pos = net.topology.decode_position(k, u).ok_or(Error::Association { ue: k, uav: u })?;
    let uncanceled: f64 = order[pos + 1..]
        .iter()
        .map(|&j| alloc.p_common[j] * net.gains[k][j])
        .sum();
    Ok(uncanceled
        + private_sum(alloc) * net.gains[k][HAP]
        + quant_noise_at(net, alloc, k)
        + net.scenario.noise_power[k])
}

/// f^c_{k,u}: the rate at which UE `k` can decode UAV `u`'s common signal.
pub fn common_rate_cap(net: &Network<'_>, alloc: &Allocation, k: usize, u: usize) -> Result<f64> {
    let nu = common_interference(net, alloc, k, u)?;
    Ok((alloc.p_common[u] * net.gains[k][u] / nu).ln_1p() / std::f64::consts::LN_2)
}

/// nu^p_k: what remains after all common signals have been canceled.
pub fn private_interference(net: &Network<'_>, alloc: &Allocation, k: usize) -> f64 {
    (private_sum(alloc) - alloc.p_private[k]) * net.gains[k][HAP]
        + quant_noise_at(net, alloc, k)
        + net.scenario.noise_power[k]
}

pub fn private_rate(net: &Network<'_>, alloc: &Allocation, k: usize) -> f64 {
    let nu = private_interference(net, alloc, k);
    (alloc.p_private[k] * net.gains[k][HAP] / nu).ln_1p() / std::f64::consts::LN_2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub private_rate: Vec<f64>,
    /// Total common rate received by each UE.
    pub common_rate: Vec<f64>,
    /// min_{k in K_u} f^c_{k,u}; zero for UAVs with an empty K_u.
    pub common_rate_cap: Vec<f64>,
    pub fronthaul_rate: Vec<f64>,
    pub radiated_power: Vec<f64>,
    pub sum_rate: f64,
    /// R^p_k + sum_u R^c_{k,u} - R^th_k.
    pub qos_slack: Vec<f64>,
    /// common_rate_cap_u - sum_k R^c_{k,u}.
    pub common_cap_slack: Vec<f64>,
    /// C_u - R_u.
    pub fronthaul_slack: Vec<f64>,
    /// P_max - radiated power.
    pub power_slack: Vec<f64>,
}

impl RateReport {
    /// Smallest slack over the rate, fronthaul and power constraints.
    pub fn min_slack(&self) -> f64 {
        self.qos_slack
            .iter()
            .chain(&self.common_cap_slack)
            .chain(&self.fronthaul_slack)
            .chain(&self.power_slack)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_feasible(&self, tol: f64) -> bool {
        self.min_slack() >= -tol
    }

    /// UEs whose QoS constraint is violated by more than `tol`.
    pub fn qos_violators(&self, tol: f64) -> Vec<usize> {
        self.qos_slack
            .iter()
            .enumerate()
            .filter(|(_, &s)| s < -tol)
            .map(|(k, _)| k)
            .collect()
    }
}

pub fn rate_report(net: &Network<'_>, alloc: &Allocation) -> Result<RateReport> {
    let (n_ue, n_uav) = (net.num_ues(), net.num_uavs());
    if alloc.p_private.len() != n_ue
        || alloc.p_common.len() != n_uav
        || alloc.quant_var.len() != n_uav
        || alloc.r_common.len() != n_ue
        || alloc.r_common.iter().any(|r| r.len() != n_uav)
    {
        return Err(Error::InvalidScenario("allocation shape mismatch".into()));
    }
    for (k, row) in alloc.r_common.iter().enumerate() {
        for (u, &r) in row.iter().enumerate() {
            if r != 0.0 && !net.topology.serves(k, u) {
                return Err(Error::Association { ue: k, uav: u });
            }
        }
    }

    let private_rate: Vec<f64> = (0..n_ue).map(|k| private_rate(net, alloc, k)).collect();
    let common_rate: Vec<f64> = alloc.r_common.iter().map(|r| r.iter().sum()).collect();

    let mut caps = vec![0.0; n_uav];
    for (u, cap) in caps.iter_mut().enumerate() {
        let ues = &net.topology.served_ues[u];
        if !ues.is_empty() {
            let mut m = f64::INFINITY;
            for &k in ues {
                m = m.min(common_rate_cap(net, alloc, k, u)?);
            }
            *cap = m;
        }
    }

    let mut fronthaul_rate = Vec::with_capacity(n_uav);
    for u in 0..n_uav {
        fronthaul_rate.push(fronthaul_rate_checked(alloc, u)?);
    }
    let radiated_power: Vec<f64> = (0..n_uav).map(|u| radiated_power(alloc, u)).collect();

    let sum_rate = private_rate.iter().sum::<f64>() + common_rate.iter().sum::<f64>();
    let qos_slack = (0..n_ue)
        .map(|k| private_rate[k] + common_rate[k] - net.scenario.rate_threshold[k])
        .collect();
    let common_cap_slack = (0..n_uav)
        .map(|u| caps[u] - alloc.common_load(u))
        .collect();
    let fronthaul_slack = (0..n_uav)
        .map(|u| net.scenario.uavs[u].fronthaul_capacity - fronthaul_rate[u])
        .collect();
    let power_slack = (0..n_uav)
        .map(|u| net.scenario.uavs[u].p_max - radiated_power[u])
        .collect();

    Ok(RateReport {
        private_rate,
        common_rate,
        common_rate_cap: caps,
        fronthaul_rate,
        radiated_power,
        sum_rate,
        qos_slack,
        common_cap_slack,
        fronthaul_slack,
        power_slack,
    })
}

/// A UAV that sends nothing needs no fronthaul even at zero quantization noise.
fn fronthaul_rate_checked(alloc: &Allocation, u: usize) -> Result<f64> {
    if tx_signal_variance(alloc, u) == 0.0 && alloc.quant_var[u] >= 0.0 {
        Ok(0.0)
    } else {
        fronthaul_rate(alloc, u)
    }
}
