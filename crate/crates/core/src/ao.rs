//! Alternating optimization of placement and allocation, plus the baseline
//! modes that freeze one of the two blocks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{
    equal_power_split, feasible_initializer, optimize_common_rates, solve_allocation, AllocationOptions,
};
use crate::error::{Error, Result};
use crate::model::{
    coverage_sets, decoding_order, gain_matrix, validate_scenario, Placement, Point3, Scenario, Topology, HAP,
};
use crate::placement::{solve_placement, PlacementOptions, PlacementStatus};
use crate::rates::{rate_report, Allocation, Network, RateReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Placement and allocation both optimized.
    Full,
    /// Placement frozen at the initializer.
    NoPlacement,
    /// The HAP alone, holding the whole fronthaul budget.
    HapOnly,
    /// Equal power on every message; placement and common-rate shares optimized.
    NoPower,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoPlacement, Mode::HapOnly, Mode::NoPower];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoPlacement => "no-placement",
            Mode::HapOnly => "hap-only",
            Mode::NoPower => "no-power",
        }
    }

    fn moves_uavs(self) -> bool {
        self != Mode::NoPlacement
    }

    fn optimizes_power(self) -> bool {
        self != Mode::NoPower
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AoConfig {
    /// Outer stopping threshold on the sum-rate change, bps/Hz.
    pub epsilon: f64,
    pub max_outer: usize,
    pub mode: Mode,
    /// Seeds the k-means initializer.
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Record wall-clock time per iteration; off gives reproducible traces.
    pub record_time: bool,
    pub placement: PlacementOptions,
    pub allocation: AllocationOptions,
}

impl Default for AoConfig {
    fn default() -> Self {
        AoConfig {
            epsilon: 1e-3,
            max_outer: 50,
            mode: Mode::Full,
            seed: 0,
            kmeans_iters: 50,
            record_time: false,
            placement: PlacementOptions::default(),
            allocation: AllocationOptions::default(),
        }
    }
}

impl AoConfig {
    fn check(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.max_outer == 0 {
            return Err(Error::Config("max_outer must be at least 1".into()));
        }
        Ok(())
    }
}

/// How an outer iteration ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Initial,
    /// Allocation only, placement held.
    Allocation,
    /// Placement with refreshed coverage sets, then allocation.
    Alternating,
    /// Placement with coverage sets locked, then allocation.
    Locked,
    /// No improving step found; previous iterate kept.
    Kept,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sum_rate: f64,
    pub kind: StepKind,
    pub placement_status: Option<PlacementStatus>,
    pub allocation_iterations: usize,
    pub placement: Placement,
    pub topology: Topology,
    pub allocation: Allocation,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AoTrace {
    pub mode: Mode,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl AoTrace {
    pub fn sum_rates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.sum_rate).collect()
    }

    /// Largest decrease between consecutive records, zero if none.
    pub fn worst_decrease(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| w[0].sum_rate - w[1].sum_rate)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct AoSolution {
    /// The network actually solved (the HAP-only restriction in that mode).
    pub scenario: Scenario,
    pub initial_placement: Placement,
    pub placement: Placement,
    pub topology: Topology,
    pub allocation: Allocation,
    pub report: RateReport,
    pub trace: AoTrace,
}

impl AoSolution {
    pub fn sum_rate(&self) -> f64 {
        self.report.sum_rate
    }

    pub fn converged(&self) -> bool {
        self.trace.converged
    }

    /// Every constraint the final point violates by more than `tol`,
    /// recomputed from scratch.
    pub fn audit(&self, tol: f64) -> Result<Vec<String>> {
        let mut out: Vec<String> = validate_scenario(&self.scenario, &self.placement)
            .iter()
            .map(|v| v.to_string())
            .collect();
        let topo = coverage_sets(&self.scenario, &self.placement)?;
        if !topo.same_sets(&self.topology) {
            out.push("coverage sets differ from the placement".into());
        }
        let net = Network::new(&self.scenario, &self.placement, &self.topology)?;
        let r = rate_report(&net, &self.allocation)?;
        let named = [
            ("fronthaul", &r.fronthaul_slack),
            ("power", &r.power_slack),
            ("common cap", &r.common_cap_slack),
            ("QoS", &r.qos_slack),
        ];
        for (name, v) in named {
            for (i, s) in v.iter().enumerate() {
                if *s < -tol {
                    out.push(format!("{name} {i} violated by {:e}", -s));
                }
            }
        }
        if (r.sum_rate - self.report.sum_rate).abs() > 1e-9 {
            out.push("reported sum-rate does not match recomputation".into());
        }
        Ok(out)
    }
}

/// Seeded Lloyd iterations on the UE ground positions.
fn kmeans(points: &[[f64; 2]], k: usize, seed: u64, iters: usize) -> Vec<[f64; 2]> {
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<[f64; 2]> = if k <= points.len() {
        sample(&mut rng, points.len(), k).iter().map(|i| points[i]).collect()
    } else {
        (0..k).map(|i| points[i % points.len()]).collect()
    };
    let mut label = vec![0usize; points.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (p, l) in points.iter().zip(&mut label) {
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da = (p[0] - centers[a][0]).powi(2) + (p[1] - centers[a][1]).powi(2);
                    let db = (p[0] - centers[b][0]).powi(2) + (p[1] - centers[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            changed |= *l != best;
            *l = best;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for (p, _) in points.iter().zip(&label).filter(|(_, &l)| l == c) {
                sx += p[0];
                sy += p[1];
                n += 1;
            }
            if n > 0 {
                *center = [sx / n as f64, sy / n as f64];
            }
        }
        if !changed {
            break;
        }
    }
    centers
}

/// Pushes UAVs apart horizontally until every pair is at least
/// `1.001 d_min` apart, keeping each inside its box.
pub fn separate(scenario: &Scenario, placement: &Placement) -> Result<Placement> {
    let mut q = placement.clone();
    let target = scenario.d_min * 1.001;
    let n = q.q.len();
    for _ in 0..2000 {
        let mut moved = false;
        for a in 0..n {
            for b in a + 1..n {
                let d = q.q[a].dist_sq(&q.q[b]).sqrt();
                if d >= target {
                    continue;
                }
                moved = true;
                let dz = q.q[a].z() - q.q[b].z();
                let need_h = (target * target - dz * dz).max(0.0).sqrt();
                let (mut ux, mut uy) = (q.q[a].x() - q.q[b].x(), q.q[a].y() - q.q[b].y());
                let h = (ux * ux + uy * uy).sqrt();
                if h < 1e-9 {
                    let ang = 2.0 * std::f64::consts::PI * (a * n + b) as f64 / (n * n) as f64;
                    (ux, uy) = (ang.cos(), ang.sin());
                } else {
                    (ux, uy) = (ux / h, uy / h);
                }
                let push = 0.5 * (need_h - h) + 1e-6 * target;
                for (i, s) in [(a, 1.0), (b, -1.0)] {
                    let bx = &scenario.uavs[i].xy_box;
                    let (x, y) = bx.clamp(q.q[i].x() + s * push * ux, q.q[i].y() + s * push * uy);
                    q.q[i] = Point3::new(x, y, q.q[i].z());
                }
            }
        }
        if !moved {
            return Ok(q);
        }
    }
    let v = validate_scenario(scenario, &q);
    if v.is_empty() {
        Ok(q)
    } else {
        Err(Error::InfeasibleScenario(v))
    }
}

/// HAP over the box centre and LAPs over k-means centroids of the UEs, all at
/// their maximum altitude, then separated to the safety distance.
pub fn initial_placement(scenario: &Scenario, seed: u64, kmeans_iters: usize) -> Result<Placement> {
    let ues: Vec<[f64; 2]> = scenario.ue_positions.iter().map(|p| [p.x(), p.y()]).collect();
    let centers = kmeans(&ues, scenario.num_laps(), seed, kmeans_iters);
    let mut q = Vec::with_capacity(scenario.num_uavs());
    let hap = &scenario.uavs[HAP];
    let (cx, cy) = hap.xy_box.center();
    q.push(Point3::new(cx, cy, hap.z_max));
    for (c, p) in centers.iter().zip(&scenario.uavs[1..]) {
        let (x, y) = p.xy_box.clamp(c[0], c[1]);
        q.push(Point3::new(x, y, p.z_max));
    }
    separate(scenario, &Placement { q })
}

/// Baseline allocation: equal power on every message, fronthaul and power
/// budget tight, common-rate shares optimized.
pub fn equal_power_projection(net: &Network<'_>, opts: &AllocationOptions) -> Result<Allocation> {
    optimize_common_rates(net, &equal_power_split(net, opts.quant_floor), opts)
}

fn order_by_max_power(scenario: &Scenario, placement: &Placement, topology: &Topology) -> Result<Topology> {
    let p: Vec<f64> = scenario.uavs.iter().map(|u| u.p_max).collect();
    Ok(decoding_order(topology, &gain_matrix(scenario, placement)?, &p))
}

#[derive(Debug, Clone)]
struct State {
    placement: Placement,
    topology: Topology,
    allocation: Allocation,
    report: RateReport,
}

struct Driver<'s> {
    scenario: &'s Scenario,
    config: AoConfig,
}

impl Driver<'_> {
    fn allocate(&self, net: &Network<'_>, start: &Allocation) -> Result<(Allocation, RateReport, usize)> {
        if self.config.mode.optimizes_power() {
            // warm start, plus a restart from the initializer when it is
            // feasible; the warm start alone keeps the ascent property
            let opts = &self.config.allocation;
            let warm = solve_allocation(net, start, opts);
            let fresh = feasible_initializer(net, opts.quant_floor).and_then(|a| solve_allocation(net, &a, opts));
            let best = match (warm, fresh) {
                (Ok(w), Ok(f)) => {
                    if f.report.sum_rate > w.report.sum_rate {
                        f
                    } else {
                        w
                    }
                }
                (Ok(w), Err(_)) => w,
                (Err(_), Ok(f)) => f,
                (Err(e), Err(_)) => return Err(e),
            };
            Ok((best.allocation, best.report, best.iterations))
        } else {
            let a = equal_power_projection(net, &self.config.allocation)?;
            let r = rate_report(net, &a)?;
            Ok((a, r, 1))
        }
    }

    /// Re-sorts decoding orders by received common power; kept only if the
    /// incumbent stays feasible, which leaves the sum-rate unchanged.
    fn reorder(&self, st: State) -> Result<State> {
        let gains = gain_matrix(self.scenario, &st.placement)?;
        let t = decoding_order(&st.topology, &gains, &st.allocation.p_common);
        if t == st.topology {
            return Ok(st);
        }
        let net = Network::new(self.scenario, &st.placement, &t)?;
        let r = rate_report(&net, &st.allocation)?;
        if r.is_feasible(self.config.allocation.feas_tol) {
            Ok(State { topology: t, report: r, ..st })
        } else {
            Ok(st)
        }
    }

    fn allocation_step(&self, st: &State) -> Result<(State, usize)> {
        let net = Network::new(self.scenario, &st.placement, &st.topology)?;
        let (allocation, report, it) = self.allocate(&net, &st.allocation)?;
        Ok((
            State {
                placement: st.placement.clone(),
                topology: st.topology.clone(),
                allocation,
                report,
            },
            it,
        ))
    }

    /// Placement, coverage refresh, allocation.
    fn alternating_step(&self, st: &State, lock: bool) -> Result<(State, PlacementStatus, usize)> {
        let mut popts = self.config.placement;
        popts.lock_coverage = lock;
        let ps = solve_placement(self.scenario, &st.topology, &st.allocation, &st.placement, &popts)?;
        let topology = if lock {
            st.topology.clone()
        } else {
            let t = coverage_sets(self.scenario, &ps.q)?;
            decoding_order(&t, &gain_matrix(self.scenario, &ps.q)?, &ps.allocation.p_common)
        };
        let mut start = ps.allocation;
        for (k, row) in start.r_common.iter_mut().enumerate() {
            for (u, r) in row.iter_mut().enumerate() {
                if !topology.serves(k, u) {
                    *r = 0.0;
                }
            }
        }
        let net = Network::new(self.scenario, &ps.q, &topology)?;
        let (allocation, report, it) = self.allocate(&net, &start)?;
        Ok((
            State {
                placement: ps.q,
                topology,
                allocation,
                report,
            },
            ps.status,
            it,
        ))
    }

    fn record(&self, iteration: usize, st: &State, kind: StepKind, ps: Option<PlacementStatus>, it: usize, t0: Instant) -> IterationRecord {
        IterationRecord {
            iteration,
            sum_rate: st.report.sum_rate,
            kind,
            placement_status: ps,
            allocation_iterations: it,
            placement: st.placement.clone(),
            topology: st.topology.clone(),
            allocation: st.allocation.clone(),
            wall_ms: if self.config.record_time {
                t0.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        }
    }

    fn run(&self, start: State, initial_placement: Placement) -> Result<AoSolution> {
        let cfg = &self.config;
        let t0 = Instant::now();
        let mut st = start;
        let mut records = vec![self.record(0, &st, StepKind::Initial, None, 0, t0)];
        // Modes that optimize both blocks first settle the allocation at the
        // initial placement.
        let mut warmup = cfg.mode.moves_uavs() && cfg.mode.optimizes_power();
        let mut converged = false;
        let better = |new: &State, old: &State| new.report.sum_rate >= old.report.sum_rate;

        for r in 1..=cfg.max_outer {
            let prev = st.report.sum_rate;
            let mut kind = StepKind::Kept;
            let mut pstatus = None;
            let mut inner = 0;
            if warmup || !cfg.mode.moves_uavs() {
                if let Ok((next, it)) = self.allocation_step(&st) {
                    if better(&next, &st) {
                        (st, kind, inner) = (next, StepKind::Allocation, it);
                    }
                }
            } else {
                let mut accepted = false;
                if let Ok((next, ps, it)) = self.alternating_step(&st, false) {
                    if better(&next, &st) {
                        (st, kind, pstatus, inner, accepted) = (next, StepKind::Alternating, Some(ps), it, true);
                    }
                }
                if !accepted {
                    if let Ok((next, ps, it)) = self.alternating_step(&st, true) {
                        if better(&next, &st) {
                            (st, kind, pstatus, inner) = (next, StepKind::Locked, Some(ps), it);
                        }
                    }
                }
            }
            st = self.reorder(st)?;
            records.push(self.record(r, &st, kind, pstatus, inner, t0));
            if (st.report.sum_rate - prev).abs() <= cfg.epsilon {
                if warmup {
                    warmup = false;
                } else {
                    converged = true;
                    break;
                }
            }
        }
        Ok(AoSolution {
            scenario: self.scenario.clone(),
            initial_placement,
            placement: st.placement,
            topology: st.topology,
            allocation: st.allocation,
            report: st.report,
            trace: AoTrace {
                mode: cfg.mode,
                records,
                converged,
            },
        })
    }
}

/// The network a mode works on.
pub fn mode_scenario(scenario: &Scenario, mode: Mode) -> Scenario {
    if mode == Mode::HapOnly {
        scenario.hap_only()
    } else {
        scenario.clone()
    }
}

/// Initial placement, topology and allocation for `config.mode`.
pub fn initialize(scenario: &Scenario, config: &AoConfig) -> Result<(Placement, Topology, Allocation, RateReport)> {
    config.check()?;
    let scenario = mode_scenario(scenario, config.mode);
    let q = initial_placement(&scenario, config.seed, config.kmeans_iters)?;
    let v = validate_scenario(&scenario, &q);
    if !v.is_empty() {
        return Err(Error::InfeasibleScenario(v));
    }
    let t = order_by_max_power(&scenario, &q, &coverage_sets(&scenario, &q)?)?;
    let net = Network::new(&scenario, &q, &t)?;
    let a = if config.mode.optimizes_power() {
        feasible_initializer(&net, config.allocation.quant_floor)?
    } else {
        equal_power_projection(&net, &config.allocation)?
    };
    let r = rate_report(&net, &a)?;
    if !r.qos_violators(config.allocation.feas_tol).is_empty() && !config.mode.optimizes_power() {
        return Err(Error::QosInfeasible {
            ues: r.qos_violators(config.allocation.feas_tol),
        });
    }
    Ok((q, t, a, r))
}

/// Runs the alternating optimization from the default initializer.
pub fn run(scenario: &Scenario, config: &AoConfig) -> Result<AoSolution> {
    let (q, t, a, r) = initialize(scenario, config)?;
    let sc = mode_scenario(scenario, config.mode);
    let driver = Driver {
        scenario: &sc,
        config: *config,
    };
    let start = State {
        placement: q.clone(),
        topology: t,
        allocation: a,
        report: r,
    };
    driver.run(start, q)
}

/// Runs from a given placement, topology and allocation, for example a
/// solution of the same network with a smaller fronthaul budget. In the
/// equal-power mode the allocation is re-projected.
pub fn run_from(
    scenario: &Scenario,
    config: &AoConfig,
    placement: &Placement,
    topology: &Topology,
    allocation: &Allocation,
) -> Result<AoSolution> {
    config.check()?;
    let sc = mode_scenario(scenario, config.mode);
    let v = validate_scenario(&sc, placement);
    if !v.is_empty() {
        return Err(Error::InfeasibleScenario(v));
    }
    let net = Network::new(&sc, placement, topology)?;
    let allocation = if config.mode.optimizes_power() {
        allocation.clone()
    } else {
        equal_power_projection(&net, &config.allocation)?
    };
    let report = rate_report(&net, &allocation)?;
    if !report.is_feasible(config.allocation.feas_tol) {
        return Err(Error::QosInfeasible {
            ues: report.qos_violators(config.allocation.feas_tol),
        });
    }
    let driver = Driver {
        scenario: &sc,
        config: *config,
    };
    let start = State {
        placement: placement.clone(),
        topology: topology.clone(),
        allocation,
        report,
    };
    driver.run(start, placement.clone())
}

/// Independent runs in parallel; results keep the input order.
pub fn run_batch(jobs: &[(Scenario, AoConfig)]) -> Vec<Result<AoSolution>> {
    jobs.par_iter().map(|(s, c)| run(s, c)).collect()
}
