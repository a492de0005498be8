//! UAV placement for a fixed allocation.
//!
//! Rates are written as differences of logs of sums `a_i / d_i` over squared
//! UAV-UE distances `d_i`. The numerator log is convex in `d` and is replaced
//! by its tangent plane, which makes it concave in the coordinates. The
//! denominator log gets a slack `S_i <= d_i`, itself kept below an affine
//! under-estimator of `d_i`. Pairwise safety distances are linearized the same
//! way. All internal geometry is in kilometres.

use serde::{Deserialize, Serialize};

use crate::cvx::{self, BarrierOptions, Program, SmoothFn, Term};
use crate::error::{Error, Result};
use crate::model::{coverage_sets, validate_scenario, Placement, Point3, Scenario, Topology, HAP};
use crate::rates::{common_rate_cap, private_rate, rate_report, Allocation, Network};

const KM: f64 = 1e3;
const KM2: f64 = 1e6;
const LOG2E: f64 = std::f64::consts::LOG2_E;

fn positions(topology: &Topology, k: usize, u: usize, i: usize) -> Result<(usize, usize)> {
    let pu = topology.decode_position(k, u).ok_or(Error::Association { ue: k, uav: u })?;
    let pi = topology.decode_position(k, i).ok_or(Error::Association { ue: k, uav: i })?;
    Ok((pu, pi))
}

fn coeff(alloc: &Allocation, topology: &Topology, k: usize, u: usize, i: usize, desired: bool) -> Result<f64> {
    let (pu, pi) = positions(topology, k, u, i)?;
    let mut a = alloc.quant_var[i];
    if pu <= pi && (desired || i != u) {
        a += alloc.p_common[i];
    }
    if i == HAP {
        a += alloc.p_private.iter().sum::<f64>();
    }
    Ok(a)
}

/// A_{k,u,i}: weight of `g_{k,i}` in `nu^c_{k,u} + P^c_u g_{k,u}`.
pub fn interference_coeff(alloc: &Allocation, topology: &Topology, k: usize, u: usize, i: usize) -> Result<f64> {
    coeff(alloc, topology, k, u, i, true)
}

/// B_{k,u,i}: weight of `g_{k,i}` in `nu^c_{k,u}`.
pub fn residual_coeff(alloc: &Allocation, topology: &Topology, k: usize, u: usize, i: usize) -> Result<f64> {
    coeff(alloc, topology, k, u, i, false)
}

fn sub(a: &Point3, b: &Point3) -> [f64; 3] {
    [a.x() - b.x(), a.y() - b.y(), a.z() - b.z()]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Affine under-estimator of `|q_u - q_v|^2` expanded at `q_r`, m^2.
pub fn safety_linearization(q: &Placement, q_r: &Placement, u: usize, v: usize) -> f64 {
    let dr = sub(&q_r.q[u], &q_r.q[v]);
    let d = sub(&q.q[u], &q.q[v]);
    2.0 * dot(dr, d) - dot(dr, dr)
}

/// Affine under-estimator of `|q_i - ue|^2` expanded at `q_r`, m^2.
pub fn distance_linearization(q: &Placement, q_r: &Placement, ue: &Point3, i: usize) -> f64 {
    let dr = sub(&q_r.q[i], ue);
    let step = sub(&q.q[i], &q_r.q[i]);
    2.0 * dot(dr, step) + dot(dr, dr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Var(usize),
    Fixed(f64),
}

/// Variable layout of the placement program.
#[derive(Debug, Clone)]
struct Layout {
    coords: Vec<[Coord; 3]>,
    /// S_{k,i} index, K x U.
    slack: Vec<Vec<Option<usize>>>,
    eta_p: Vec<usize>,
    /// Common-rate share R^c_{k,u} index, K x U, for UAVs carrying common power.
    r: Vec<Vec<Option<usize>>>,
    zeta: usize,
    n: usize,
}

impl Layout {
    /// `movable[u]` selects UAVs whose coordinates are variables; degenerate
    /// bounds keep a coordinate fixed regardless.
    fn new(scenario: &Scenario, topology: &Topology, q_r: &Placement, movable: &[bool], active: &[bool]) -> Self {
        let mut n = 0;
        let mut coords = Vec::with_capacity(scenario.num_uavs());
        for (u, p) in scenario.uavs.iter().enumerate() {
            let q = &q_r.q[u];
            let b = &p.xy_box;
            let spans = [b.x_max > b.x_min, b.y_max > b.y_min, p.z_max > p.z_min];
            let mut c = [Coord::Fixed(0.0); 3];
            for d in 0..3 {
                c[d] = if movable[u] && spans[d] {
                    n += 1;
                    Coord::Var(n - 1)
                } else {
                    Coord::Fixed(q.0[d] / KM)
                };
            }
            coords.push(c);
        }
        let has_var = |c: &[Coord; 3]| c.iter().any(|x| matches!(x, Coord::Var(_)));
        let mut slack = vec![vec![None; scenario.num_uavs()]; scenario.num_ues()];
        for (k, row) in slack.iter_mut().enumerate() {
            for &i in &topology.serving_uavs[k] {
                if has_var(&coords[i]) {
                    row[i] = Some(n);
                    n += 1;
                }
            }
        }
        let eta_p: Vec<usize> = (0..scenario.num_ues()).map(|k| n + k).collect();
        n += scenario.num_ues();
        let mut r = vec![vec![None; scenario.num_uavs()]; scenario.num_ues()];
        for (u, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            for &k in &topology.served_ues[u] {
                r[k][u] = Some(n);
                n += 1;
            }
        }
        let zeta = n;
        n += 1;
        Layout {
            coords,
            slack,
            eta_p,
            r,
            zeta,
            n,
        }
    }

    fn has_var(&self, u: usize) -> bool {
        self.coords[u].iter().any(|c| matches!(c, Coord::Var(_)))
    }

    /// Packs coordinates (m) and slacks (m^2) into a km-unit vector; other
    /// entries are zero.
    fn pack(&self, q: &Placement, s: &[Vec<f64>]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (u, c) in self.coords.iter().enumerate() {
            for d in 0..3 {
                if let Coord::Var(j) = c[d] {
                    x[j] = q.q[u].0[d] / KM;
                }
            }
        }
        for (k, row) in self.slack.iter().enumerate() {
            for (i, idx) in row.iter().enumerate() {
                if let Some(j) = idx {
                    x[*j] = s[k][i] / KM2;
                }
            }
        }
        x
    }

    /// Coordinates in metres; fixed entries are copied from `q_r`.
    fn unpack_q(&self, x: &[f64], q_r: &Placement) -> Placement {
        let q = self
            .coords
            .iter()
            .zip(&q_r.q)
            .map(|(c, r)| {
                let mut p = *r;
                for d in 0..3 {
                    if let Coord::Var(j) = c[d] {
                        p.0[d] = x[j] * KM;
                    }
                }
                p
            })
            .collect();
        Placement { q }
    }

    /// Adds `coef * (q_u[d] - center)^2` to `f`.
    fn add_square(&self, f: &mut SmoothFn, u: usize, d: usize, center: f64, coef: f64) {
        match self.coords[u][d] {
            Coord::Var(j) => {
                f.add_term(Term::Square { var: j, center, coef });
            }
            Coord::Fixed(v) => {
                f.add_constant(coef * (v - center) * (v - center));
            }
        }
    }

    /// Adds `coef * q_u[d]` to `f`.
    fn add_coord(&self, f: &mut SmoothFn, u: usize, d: usize, coef: f64) {
        match self.coords[u][d] {
            Coord::Var(j) => {
                f.add_linear(j, coef);
            }
            Coord::Fixed(v) => {
                f.add_constant(coef * v);
            }
        }
    }

    /// `h^2 / (tan^2 theta z) - z` for UAV `u` and ground point `ue` (km); it is
    /// nonpositive exactly when `ue` lies inside the coverage cone.
    fn coverage_fn(&self, u: usize, ue: [f64; 3], tan2: f64) -> Option<SmoothFn> {
        let Coord::Var(zj) = self.coords[u][2] else {
            return None;
        };
        let mut num = Vec::new();
        let mut extra = 0.0;
        for d in 0..2 {
            match self.coords[u][d] {
                Coord::Var(j) => num.push((j, ue[d])),
                Coord::Fixed(v) => extra += (v - ue[d]) * (v - ue[d]),
            }
        }
        let mut f = SmoothFn::default();
        f.add_term(Term::QuadOverLin {
            coef: 1.0,
            num,
            extra,
            den: zj,
            den_scale: tan2,
        })
        .add_linear(zj, -1.0);
        Some(f)
    }
}

/// One log-ratio rate expression: `log2(1 + sum a_i/d_i) - log2(1 + sum b_i/d_i)`
/// with coefficients normalized by the UE noise power and distances in km^2.
#[derive(Debug, Clone)]
struct LogRatio {
    k: usize,
    parts: Vec<(usize, f64, f64)>,
}

/// Expansion point of the placement surrogate: a placement together with the
/// allocation and topology held fixed while it moves.
#[derive(Debug, Clone)]
pub struct TaylorPoint<'a> {
    pub scenario: &'a Scenario,
    pub q_r: &'a Placement,
    pub topology: &'a Topology,
    pub allocation: &'a Allocation,
    /// Squared UAV-UE distances at `q_r`, km^2, K x U.
    dist0: Vec<Vec<f64>>,
}

impl<'a> TaylorPoint<'a> {
    pub fn new(
        scenario: &'a Scenario,
        q_r: &'a Placement,
        topology: &'a Topology,
        allocation: &'a Allocation,
    ) -> Result<Self> {
        Network::new(scenario, q_r, topology)?;
        let dist0 = scenario
            .ue_positions
            .iter()
            .map(|ue| q_r.q.iter().map(|q| q.dist_sq(ue) / KM2).collect())
            .collect();
        Ok(TaylorPoint {
            scenario,
            q_r,
            topology,
            allocation,
            dist0,
        })
    }

    fn norm(&self, k: usize, i: usize) -> f64 {
        self.scenario.uavs[i].beta / (self.scenario.noise_power[k] * KM2)
    }

    fn common_ratio(&self, k: usize, u: usize) -> Result<LogRatio> {
        if !self.topology.serves(k, u) {
            return Err(Error::Association { ue: k, uav: u });
        }
        let parts = self.topology.serving_uavs[k]
            .iter()
            .map(|&i| {
                let s = self.norm(k, i);
                Ok((
                    i,
                    s * interference_coeff(self.allocation, self.topology, k, u, i)?,
                    s * residual_coeff(self.allocation, self.topology, k, u, i)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(LogRatio { k, parts })
    }

    fn private_ratio(&self, k: usize) -> LogRatio {
        let a = self.allocation;
        let total: f64 = a.p_private.iter().sum();
        let parts = self.topology.serving_uavs[k]
            .iter()
            .map(|&i| {
                let s = self.norm(k, i);
                let (num, den) = if i == HAP {
                    (a.quant_var[i] + total, a.quant_var[i] + total - a.p_private[k])
                } else {
                    (a.quant_var[i], a.quant_var[i])
                };
                (i, s * num, s * den.max(0.0))
            })
            .collect();
        LogRatio { k, parts }
    }

    /// `-lb` as a convex function over `layout`.
    fn neg_bound(&self, layout: &Layout, ratio: &LogRatio) -> SmoothFn {
        let k = ratio.k;
        let ue = self.scenario.ue_positions[k].0.map(|v| v / KM);
        let n0 = 1.0 + ratio.parts.iter().map(|&(i, a, _)| a / self.dist0[k][i]).sum::<f64>();
        let mut f = SmoothFn::constant(-n0.log2());
        let mut offset = 1.0;
        let mut parts = Vec::new();
        for &(i, a, b) in &ratio.parts {
            let d0 = self.dist0[k][i];
            let c = a * LOG2E / (n0 * d0 * d0);
            if c > 0.0 && layout.has_var(i) {
                f.add_constant(-c * d0);
                for d in 0..3 {
                    layout.add_square(&mut f, i, d, ue[d], c);
                }
            }
            match layout.slack[k][i] {
                Some(j) if b > 0.0 => parts.push((j, b)),
                Some(_) => {}
                None => offset += b / d0,
            }
        }
        if parts.is_empty() {
            f.add_constant(offset.log2());
        } else {
            f.add_term(Term::LnSumInv {
                coef: LOG2E,
                offset,
                parts,
            });
        }
        f
    }

    fn full_layout(&self) -> Layout {
        let n = self.scenario.num_uavs();
        Layout::new(self.scenario, self.topology, self.q_r, &vec![true; n], &vec![false; n])
    }

    /// Concave lower bound of `f^c_{k,u}` in the coordinates and slacks.
    pub fn common_bound(&self, k: usize, u: usize) -> Result<BoundFn> {
        let layout = self.full_layout();
        let neg = self.neg_bound(&layout, &self.common_ratio(k, u)?);
        Ok(BoundFn { layout, neg, k })
    }

    /// Concave lower bound of `R^p_k` in the coordinates and slacks.
    pub fn private_bound(&self, k: usize) -> BoundFn {
        let layout = self.full_layout();
        let neg = self.neg_bound(&layout, &self.private_ratio(k));
        BoundFn { layout, neg, k }
    }

    /// Tight slacks `S_{k,i} = |q_i - ue_k|^2` at `q`, m^2.
    pub fn tight_slacks(&self, q: &Placement) -> Vec<Vec<f64>> {
        self.scenario
            .ue_positions
            .iter()
            .map(|ue| q.q.iter().map(|p| p.dist_sq(ue)).collect())
            .collect()
    }
}

/// A rate lower bound as a function of the packed vector of all UAV
/// coordinates (km) and the slacks of one UE (km^2).
#[derive(Debug, Clone)]
pub struct BoundFn {
    layout: Layout,
    neg: SmoothFn,
    k: usize,
}

impl BoundFn {
    pub fn dim(&self) -> usize {
        self.layout.n
    }

    /// Packs a placement (m) and slacks (m^2, K x U) into the bound's domain.
    pub fn pack(&self, q: &Placement, s: &[Vec<f64>]) -> Vec<f64> {
        self.layout.pack(q, s)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        -self.neg.value(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.neg.gradient(x).into_iter().map(|g| -g).collect()
    }

    fn check_slacks(&self, s: &[Vec<f64>]) -> Result<()> {
        for (i, idx) in self.layout.slack[self.k].iter().enumerate() {
            if idx.is_some() && !(s[self.k][i] > 0.0) {
                return Err(Error::Domain(format!("slack S[{}][{i}] must be positive", self.k)));
            }
        }
        Ok(())
    }

    /// Bound value at a placement (m) and slacks (m^2).
    pub fn eval(&self, q: &Placement, s: &[Vec<f64>]) -> Result<f64> {
        self.check_slacks(s)?;
        Ok(self.value(&self.pack(q, s)))
    }
}

/// Lower bound of `f^c_{k,u}` at placement `q` with slacks `s` (m^2, K x U).
pub fn common_rate_lb(tp: &TaylorPoint<'_>, q: &Placement, s: &[Vec<f64>], k: usize, u: usize) -> Result<f64> {
    tp.common_bound(k, u)?.eval(q, s)
}

/// Lower bound of `R^p_k` at placement `q` with slacks `s` (m^2, K x U).
pub fn private_rate_lb(tp: &TaylorPoint<'_>, q: &Placement, s: &[Vec<f64>], k: usize) -> Result<f64> {
    tp.private_bound(k).eval(q, s)
}

/// Exact value of the placement objective under a frozen topology: the sum of
/// private rates plus, for every UAV carrying common power, its common-rate
/// cap.
pub fn placement_objective(scenario: &Scenario, topology: &Topology, alloc: &Allocation, q: &Placement) -> Result<f64> {
    let net = Network::new(scenario, q, topology)?;
    let mut v: f64 = (0..scenario.num_ues()).map(|k| private_rate(&net, alloc, k)).sum();
    for u in active_uavs(topology, alloc).into_iter().enumerate().filter(|p| p.1).map(|p| p.0) {
        let mut m = f64::INFINITY;
        for &k in &topology.served_ues[u] {
            m = m.min(common_rate_cap(&net, alloc, k, u)?);
        }
        v += m;
    }
    Ok(v)
}

fn active_uavs(topology: &Topology, alloc: &Allocation) -> Vec<bool> {
    (0..topology.num_uavs())
        .map(|u| !topology.served_ues[u].is_empty() && alloc.p_common[u] > 0.0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementOptions {
    /// Keep every coverage set unchanged.
    pub lock_coverage: bool,
    pub max_sca_iters: usize,
    /// Stop when the surrogate improves by less than this, bps/Hz.
    pub sca_tol: f64,
    /// Penalty on the elastic variable of the rate constraints.
    pub penalty: f64,
    pub barrier: BarrierOptions,
}

impl Default for PlacementOptions {
    fn default() -> Self {
        PlacementOptions {
            lock_coverage: false,
            max_sca_iters: 20,
            sca_tol: 1e-4,
            penalty: 1e4,
            barrier: BarrierOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementStatus {
    /// At least one step was accepted.
    Improved,
    /// The expansion point was already a fixed point.
    Unchanged,
    /// The first convex solve failed; the input placement is returned.
    SolverFailed,
}

#[derive(Debug, Clone)]
pub struct PlacementSolution {
    pub q: Placement,
    /// Per UE, bps/Hz.
    pub eta_p: Vec<f64>,
    /// Common load per UAV under [`PlacementSolution::allocation`], bps/Hz.
    pub eta_c: Vec<f64>,
    /// The input allocation with the common-rate shares chosen jointly with
    /// the placement.
    pub allocation: Allocation,
    /// Exact sum-rate of `allocation` at `q`.
    pub sum_rate: f64,
    /// S_{k,i}, m^2, K x U, zero outside U_k.
    pub slack_s: Vec<Vec<f64>>,
    pub surrogate_objective: f64,
    /// [`placement_objective`] at `q`.
    pub exact_objective: f64,
    pub iterations: usize,
    pub status: PlacementStatus,
    pub diagnostic: Option<String>,
}

struct Step {
    q: Placement,
    eta_p: Vec<f64>,
    r_common: Vec<Vec<f64>>,
    slack_s: Vec<Vec<f64>>,
    surrogate: f64,
}

fn sca_step(
    scenario: &Scenario,
    topology: &Topology,
    alloc: &Allocation,
    q_r: &Placement,
    opts: &PlacementOptions,
) -> Result<Step> {
    let tp = TaylorPoint::new(scenario, q_r, topology, alloc)?;
    let movable: Vec<bool> = topology.served_ues.iter().map(|s| !s.is_empty()).collect();
    let active = active_uavs(topology, alloc);
    let layout = Layout::new(scenario, topology, q_r, &movable, &active);
    let (n_ue, n_uav) = (scenario.num_ues(), scenario.num_uavs());

    let mut prog = Program::new(layout.n);
    let mut x0 = vec![0.0; layout.n];
    // interior start for the coordinates
    let mut bounds = Vec::new();
    for (u, p) in scenario.uavs.iter().enumerate() {
        let b = &p.xy_box;
        let lims = [(b.x_min, b.x_max), (b.y_min, b.y_max), (p.z_min, p.z_max)];
        for d in 0..3 {
            if let Coord::Var(j) = layout.coords[u][d] {
                let (lo, hi) = (lims[d].0 / KM, lims[d].1 / KM);
                let delta = 1e-7 * (hi - lo);
                x0[j] = (q_r.q[u].0[d] / KM).clamp(lo + delta, hi - delta);
                bounds.push((j, lo, hi));
            }
        }
    }
    let q0 = layout.unpack_q(&x0, q_r);
    for (k, ue) in scenario.ue_positions.iter().enumerate() {
        for &i in &topology.serving_uavs[k] {
            if let Some(j) = layout.slack[k][i] {
                let tau = distance_linearization(&q0, q_r, ue, i) / KM2;
                x0[j] = tau - (1e-9 * tau).max(1e-12);
            }
        }
    }

    let mut qos = Vec::new();
    for (j, lo, hi) in bounds {
        prog.add_lower_bound(j, lo);
        prog.add_upper_bound(j, hi);
    }

    // private rates
    for k in 0..n_ue {
        let neg = tp.neg_bound(&layout, &tp.private_ratio(k));
        let e = layout.eta_p[k];
        x0[e] = -neg.value(&x0) - 1.0;
        let mut g = neg.clone();
        g.add_linear(e, 1.0);
        prog.add_constraint(g);
        if scenario.rate_threshold[k] > 0.0 {
            let mut g = neg;
            g.add_constant(scenario.rate_threshold[k]).add_linear(layout.zeta, -1.0);
            for j in layout.r[k].iter().flatten() {
                g.add_linear(*j, -1.0);
            }
            qos.push((k, prog.add_constraint(g)));
        }
    }

    // common-rate shares below every cap of their UAV
    for u in (0..n_uav).filter(|&u| active[u]) {
        let served = &topology.served_ues[u];
        let mut lb_min = f64::INFINITY;
        for &k in served {
            let mut g = tp.neg_bound(&layout, &tp.common_ratio(k, u)?);
            lb_min = lb_min.min(-g.value(&x0));
            for &m in served {
                g.add_linear(layout.r[m][u].unwrap(), 1.0);
            }
            prog.add_constraint(g);
        }
        for &k in served {
            let j = layout.r[k][u].unwrap();
            prog.add_lower_bound(j, 0.0);
            x0[j] = 0.25 * lb_min.max(0.0) / served.len() as f64;
        }
    }

    // slack under the distance linearization
    for (k, ue) in scenario.ue_positions.iter().enumerate() {
        let uek = ue.0.map(|v| v / KM);
        for &i in &topology.serving_uavs[k] {
            let Some(j) = layout.slack[k][i] else { continue };
            let r = q_r.q[i].0.map(|v| v / KM);
            let mut g = SmoothFn::constant(-tp.dist0[k][i]);
            g.add_linear(j, 1.0);
            for d in 0..3 {
                let w = 2.0 * (r[d] - uek[d]);
                layout.add_coord(&mut g, i, d, -w);
                g.add_constant(w * r[d]);
            }
            prog.add_constraint(g);
        }
    }

    // pairwise safety
    let dmin2 = (scenario.d_min / KM).powi(2);
    for a in 0..n_uav {
        for b in a + 1..n_uav {
            if !(layout.has_var(a) || layout.has_var(b)) || dmin2 == 0.0 {
                continue;
            }
            let ra = q_r.q[a].0.map(|v| v / KM);
            let rb = q_r.q[b].0.map(|v| v / KM);
            let dr: [f64; 3] = std::array::from_fn(|d| ra[d] - rb[d]);
            let psi_r = dot(dr, dr);
            let target = (dmin2 * (1.0 + 1e-9)).min(0.5 * (dmin2 + psi_r));
            // target - (2 dr.(q_a - q_b) - |dr|^2) <= 0
            let mut g = SmoothFn::constant(target + psi_r);
            for d in 0..3 {
                layout.add_coord(&mut g, a, d, -2.0 * dr[d]);
                layout.add_coord(&mut g, b, d, 2.0 * dr[d]);
            }
            prog.add_constraint(g);
        }
    }

    // coverage
    for (u, p) in scenario.uavs.iter().enumerate() {
        let tan2 = p.coverage_angle.tan().powi(2);
        let lock_all = opts.lock_coverage && u != HAP;
        if u != HAP && !lock_all {
            continue;
        }
        if !layout.has_var(u) {
            continue;
        }
        for (k, ue) in scenario.ue_positions.iter().enumerate() {
            let uek = ue.0.map(|v| v / KM);
            if topology.serves(k, u) {
                if let Some(g) = layout.coverage_fn(u, uek, tan2) {
                    prog.add_constraint(g);
                } else {
                    // fixed altitude: plain horizontal disc
                    let Coord::Fixed(z) = layout.coords[u][2] else { unreachable!() };
                    let mut g = SmoothFn::constant(-tan2 * z * z);
                    for d in 0..2 {
                        layout.add_square(&mut g, u, d, uek[d], 1.0);
                    }
                    prog.add_constraint(g);
                }
            } else if lock_all {
                // stay outside: tan^2 z^2 <= linearization of |h|^2
                let r = q_r.q[u].0.map(|v| v / KM);
                let hr = [r[0] - uek[0], r[1] - uek[1]];
                let mut g = SmoothFn::constant(1e-9);
                layout.add_square(&mut g, u, 2, 0.0, tan2);
                for d in 0..2 {
                    layout.add_coord(&mut g, u, d, -2.0 * hr[d]);
                    g.add_constant(2.0 * hr[d] * uek[d] + hr[d] * hr[d]);
                }
                prog.add_constraint(g);
            }
        }
    }

    prog.add_lower_bound(layout.zeta, 0.0);
    for &c in layout.eta_p.iter().chain(layout.r.iter().flatten().flatten()) {
        prog.cost[c] = -1.0;
    }
    prog.cost[layout.zeta] = opts.penalty;

    x0[layout.zeta] = 0.0;
    let worst = qos
        .iter()
        .map(|&(_, i)| prog.constraints[i].value(&x0))
        .fold(0.0f64, f64::max);
    x0[layout.zeta] = worst + 1e-3;

    let sol = cvx::solve(&prog, &x0, &opts.barrier)?;
    let x = sol.x;
    let q = layout.unpack_q(&x, q_r);
    let eta_p: Vec<f64> = layout.eta_p.iter().map(|&j| x[j]).collect();
    let r_common: Vec<Vec<f64>> = layout
        .r
        .iter()
        .map(|row| row.iter().map(|e| e.map_or(0.0, |j| x[j].max(0.0))).collect())
        .collect();
    let mut slack_s = vec![vec![0.0; n_uav]; n_ue];
    for k in 0..n_ue {
        for &i in &topology.serving_uavs[k] {
            slack_s[k][i] = match layout.slack[k][i] {
                Some(j) => x[j] * KM2,
                None => q.q[i].dist_sq(&scenario.ue_positions[k]),
            };
        }
    }
    Ok(Step {
        surrogate: eta_p.iter().sum::<f64>() + r_common.iter().flatten().sum::<f64>(),
        q,
        eta_p,
        r_common,
        slack_s,
    })
}

/// Slacks of the rate constraints a placement must keep (per-UE QoS, then
/// per-UAV cap) and the exact sum-rate.
fn audit(scenario: &Scenario, topology: &Topology, alloc: &Allocation, q: &Placement) -> Result<(Vec<f64>, f64)> {
    let net = Network::new(scenario, q, topology)?;
    let r = rate_report(&net, alloc)?;
    let mut v = r.qos_slack.clone();
    v.extend_from_slice(&r.common_cap_slack);
    Ok((v, r.sum_rate))
}

/// Successive convex approximation of the placement subproblem for fixed
/// powers and quantization noise and a frozen topology, starting from `q_r`.
/// The common-rate shares are re-chosen with the placement, so the returned
/// allocation differs from `alloc` only in `r_common`.
pub fn solve_placement(
    scenario: &Scenario,
    topology: &Topology,
    alloc: &Allocation,
    q_r: &Placement,
    opts: &PlacementOptions,
) -> Result<PlacementSolution> {
    let tp = TaylorPoint::new(scenario, q_r, topology, alloc)?;
    let (mut base_slack, base_rate) = audit(scenario, topology, alloc, q_r)?;
    let mut sol = PlacementSolution {
        q: q_r.clone(),
        eta_p: {
            let net = Network::new(scenario, q_r, topology)?;
            (0..scenario.num_ues()).map(|k| private_rate(&net, alloc, k)).collect()
        },
        eta_c: (0..scenario.num_uavs()).map(|u| alloc.common_load(u)).collect(),
        allocation: alloc.clone(),
        sum_rate: base_rate,
        slack_s: tp.tight_slacks(q_r),
        surrogate_objective: base_rate,
        exact_objective: placement_objective(scenario, topology, alloc, q_r)?,
        iterations: 0,
        status: PlacementStatus::Unchanged,
        diagnostic: None,
    };

    for it in 0..opts.max_sca_iters {
        let step = match sca_step(scenario, topology, &sol.allocation, &sol.q, opts) {
            Ok(s) => s,
            Err(e) => {
                if it == 0 {
                    sol.status = PlacementStatus::SolverFailed;
                }
                sol.diagnostic = Some(e.to_string());
                break;
            }
        };
        let mut next = sol.allocation.clone();
        next.r_common = step.r_common;
        if let Some(reason) = reject_reason(scenario, topology, &next, &step.q, opts, &base_slack, sol.sum_rate)? {
            sol.diagnostic = Some(reason);
            break;
        }
        let (slack, rate) = audit(scenario, topology, &next, &step.q)?;
        let improvement = rate - sol.sum_rate;
        base_slack = slack;
        sol = PlacementSolution {
            exact_objective: placement_objective(scenario, topology, &next, &step.q)?,
            eta_c: (0..scenario.num_uavs()).map(|u| next.common_load(u)).collect(),
            q: step.q,
            eta_p: step.eta_p,
            allocation: next,
            sum_rate: rate,
            slack_s: step.slack_s,
            surrogate_objective: step.surrogate,
            iterations: it + 1,
            status: PlacementStatus::Improved,
            diagnostic: None,
        };
        if improvement < opts.sca_tol {
            break;
        }
    }
    Ok(sol)
}

fn reject_reason(
    scenario: &Scenario,
    topology: &Topology,
    alloc: &Allocation,
    q: &Placement,
    opts: &PlacementOptions,
    base_slack: &[f64],
    base_rate: f64,
) -> Result<Option<String>> {
    let v = validate_scenario(scenario, q);
    if !v.is_empty() {
        return Ok(Some(format!("step violates geometry: {}", v[0])));
    }
    if opts.lock_coverage {
        let t = coverage_sets(scenario, q)?;
        if !t.same_sets(topology) {
            return Ok(Some("step changed a locked coverage set".into()));
        }
    }
    let (slack, rate) = audit(scenario, topology, alloc, q)?;
    if slack.iter().zip(base_slack).any(|(s, b)| *s < b.min(0.0) - 1e-8) {
        return Ok(Some("step violates a rate constraint".into()));
    }
    if rate < base_rate - 1e-9 {
        return Ok(Some("step lowers the sum-rate".into()));
    }
    Ok(None)
}
