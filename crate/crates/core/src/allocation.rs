//! Power, quantization-noise and common-rate allocation for a fixed placement.
//!
//! Every rate is replaced by its weighted-MSE lower bound
//! `log2 w + (1 - w eps) / ln 2`, and every fronthaul rate by the tangent
//! upper bound of `log2(sigma_x^2 + sigma_omega^2)`. For fixed equalizers,
//! weights and tangent points the subproblem is convex. The closed-form
//! updates make both bounds tight, so alternating them is a block ascent on
//! the exact sum-rate.
//!
//! Inside the convex program powers are divided by the UAV power budget and
//! each UE's expressions by its noise power.

use serde::{Deserialize, Serialize};

use crate::cvx::{self, BarrierOptions, Program, SmoothFn, Term};
use crate::error::{Error, Result};
use crate::model::HAP;
use crate::rates::{
    common_interference, common_rate_cap, private_interference, private_rate, radiated_power,
    rate_report, tx_signal_variance, Allocation, Network, RateReport,
};

const LN2: f64 = std::f64::consts::LN_2;
const LOG2E: f64 = std::f64::consts::LOG2_E;

/// MSE of the common signal of UAV `u` at UE `k` with receive equalizer `e`.
pub fn mse_common(net: &Network<'_>, alloc: &Allocation, k: usize, u: usize, e: f64) -> Result<f64> {
    let nu = common_interference(net, alloc, k, u)?;
    let a = (alloc.p_common[u] * net.gains[k][u]).sqrt();
    Ok(e * e * nu + (1.0 - e * a).powi(2))
}

/// MSE of UE `k`'s private signal with receive equalizer `e`.
pub fn mse_private(net: &Network<'_>, alloc: &Allocation, k: usize, e: f64) -> f64 {
    let nu = private_interference(net, alloc, k);
    let a = (alloc.p_private[k] * net.gains[k][HAP]).sqrt();
    e * e * nu + (1.0 - e * a).powi(2)
}

/// Equalizers, MSE weights and fronthaul tangent points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WmmseState {
    /// e^c_{k,u}, K x U, zero outside U_k.
    pub eq_common: Vec<Vec<f64>>,
    pub eq_private: Vec<f64>,
    /// w^c_{k,u}, K x U, zero outside U_k.
    pub w_common: Vec<Vec<f64>>,
    pub w_private: Vec<f64>,
    /// Sigma_u, W.
    pub sigma_cap: Vec<f64>,
}

fn mmse(signal: f64, nu: f64) -> (f64, f64) {
    let e = signal.sqrt() / (nu + signal);
    // eps at the MMSE equalizer
    let eps = nu / (nu + signal);
    (e, 1.0 / eps)
}

/// MMSE equalizers, inverse-MSE weights and `Sigma_u = sigma_x^2 + sigma_omega^2`
/// at `alloc`, the point where every bound is tight.
pub fn update_equalizers_weights(net: &Network<'_>, alloc: &Allocation) -> Result<WmmseState> {
    let (n_ue, n_uav) = (net.num_ues(), net.num_uavs());
    let mut st = WmmseState {
        eq_common: vec![vec![0.0; n_uav]; n_ue],
        eq_private: vec![0.0; n_ue],
        w_common: vec![vec![0.0; n_uav]; n_ue],
        w_private: vec![0.0; n_ue],
        sigma_cap: (0..n_uav).map(|u| radiated_power(alloc, u)).collect(),
    };
    for k in 0..n_ue {
        for &u in &net.topology.serving_uavs[k] {
            let nu = common_interference(net, alloc, k, u)?;
            (st.eq_common[k][u], st.w_common[k][u]) = mmse(alloc.p_common[u] * net.gains[k][u], nu);
        }
        let nu = private_interference(net, alloc, k);
        (st.eq_private[k], st.w_private[k]) = mmse(alloc.p_private[k] * net.gains[k][HAP], nu);
    }
    if let Some(u) = st.sigma_cap.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Domain(format!("UAV {u}: zero radiated power, tangent point undefined")));
    }
    Ok(st)
}

fn wmmse_bound(w: f64, eps: f64) -> f64 {
    w.log2() + (1.0 - w * eps) / LN2
}

/// WMMSE lower bound of `f^c_{k,u}`.
pub fn rate_lb_common(net: &Network<'_>, alloc: &Allocation, st: &WmmseState, k: usize, u: usize) -> Result<f64> {
    Ok(wmmse_bound(st.w_common[k][u], mse_common(net, alloc, k, u, st.eq_common[k][u])?))
}

/// WMMSE lower bound of `R^p_k`.
pub fn rate_lb_private(net: &Network<'_>, alloc: &Allocation, st: &WmmseState, k: usize) -> f64 {
    wmmse_bound(st.w_private[k], mse_private(net, alloc, k, st.eq_private[k]))
}

/// Tangent upper bound of the fronthaul rate of `uav` at `sigma_cap`.
pub fn fronthaul_ub(alloc: &Allocation, uav: usize, sigma_cap: f64) -> Result<f64> {
    let q = alloc.quant_var[uav];
    if !(q > 0.0 && sigma_cap > 0.0) {
        return Err(Error::Domain(format!(
            "UAV {uav}: need positive quantization variance and tangent point"
        )));
    }
    let total = tx_signal_variance(alloc, uav) + q;
    Ok(sigma_cap.log2() + (total / sigma_cap - 1.0) / LN2 - q.log2())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocationOptions {
    /// Stop when the exact sum-rate improves by less than this, bps/Hz.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Penalty on the elastic variable of the rate constraints.
    pub penalty: f64,
    /// Lower bound on `sigma_omega^2 / P_max`.
    pub quant_floor: f64,
    /// Feasibility tolerance of the exact audit.
    pub feas_tol: f64,
    pub barrier: BarrierOptions,
}

impl Default for AllocationOptions {
    fn default() -> Self {
        AllocationOptions {
            inner_tol: 1e-5,
            max_inner: 100,
            penalty: 1e4,
            quant_floor: 1e-12,
            feas_tol: 1e-7,
            barrier: BarrierOptions::default(),
        }
    }
}

/// UAVs that may transmit: nonempty coverage set and positive fronthaul.
fn active_uavs(net: &Network<'_>) -> Vec<bool> {
    (0..net.num_uavs())
        .map(|u| !net.topology.served_ues[u].is_empty() && net.scenario.uavs[u].fronthaul_capacity > 0.0)
        .collect()
}

/// Equal power over every message a UAV carries, with the fronthaul link and
/// the power budget both tight. Common rates are left at zero.
pub fn equal_power_split(net: &Network<'_>, quant_floor: f64) -> Allocation {
    let (n_ue, n_uav) = (net.num_ues(), net.num_uavs());
    let active = active_uavs(net);
    let mut a = Allocation::zeros(n_ue, n_uav);
    for u in 0..n_uav {
        let p = &net.scenario.uavs[u];
        if !active[u] {
            a.quant_var[u] = quant_floor * p.p_max;
            continue;
        }
        let tail = (-p.fronthaul_capacity).exp2();
        let signal = p.p_max * (1.0 - tail);
        a.quant_var[u] = (p.p_max * tail).max(quant_floor * p.p_max);
        let messages = if u == HAP { n_ue + 1 } else { 1 };
        let each = signal / messages as f64;
        a.p_common[u] = each;
        if u == HAP {
            a.p_private.iter_mut().for_each(|x| *x = each);
        }
    }
    a
}

/// [`equal_power_split`] with each UAV's common-rate cap shared evenly by its
/// coverage set.
pub fn feasible_initializer(net: &Network<'_>, quant_floor: f64) -> Result<Allocation> {
    let mut a = equal_power_split(net, quant_floor);
    for u in 0..net.num_uavs() {
        let ues = &net.topology.served_ues[u];
        if ues.is_empty() || a.p_common[u] <= 0.0 {
            continue;
        }
        let mut cap = f64::INFINITY;
        for &k in ues {
            cap = cap.min(common_rate_cap(net, &a, k, u)?);
        }
        for &k in ues {
            a.r_common[k][u] = cap / ues.len() as f64;
        }
    }
    Ok(a)
}

/// Scales each UAV's common-rate shares down to its exact cap, removing the
/// residue of the elastic variable.
fn clip_to_caps(net: &Network<'_>, a: &mut Allocation) -> Result<()> {
    for u in 0..net.num_uavs() {
        let load = a.common_load(u);
        if load <= 0.0 {
            continue;
        }
        let mut cap = f64::INFINITY;
        for &k in &net.topology.served_ues[u] {
            cap = cap.min(common_rate_cap(net, a, k, u)?);
        }
        if load > cap {
            let f = cap.max(0.0) / load;
            a.r_common.iter_mut().for_each(|row| row[u] *= f);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Layout {
    p: Vec<Option<usize>>,
    xc: Vec<Option<usize>>,
    s: Vec<Option<usize>>,
    r: Vec<Vec<Option<usize>>>,
    eta: Vec<Option<usize>>,
    zeta: usize,
    n: usize,
}

/// The convex allocation subproblem over normalized variables
/// `p_k = P^p_k / P_max,H`, `x_u = P^c_u / P_max,u`, `s_u = sigma_omega_u^2 / P_max,u`.
#[derive(Debug, Clone)]
pub struct AllocationModel<'n, 'a> {
    net: &'n Network<'a>,
    opts: AllocationOptions,
    layout: Layout,
    /// P_max,u g_{k,u} / sigma_k^2.
    gain: Vec<Vec<f64>>,
}

impl<'n, 'a> AllocationModel<'n, 'a> {
    pub fn new(net: &'n Network<'a>, opts: AllocationOptions) -> Self {
        let (n_ue, n_uav) = (net.num_ues(), net.num_uavs());
        let active = active_uavs(net);
        let mut n = 0;
        let mut next = |on: bool| {
            if on {
                n += 1;
                Some(n - 1)
            } else {
                None
            }
        };
        let p = (0..n_ue).map(|_| next(active[HAP])).collect();
        let xc = (0..n_uav).map(|u| next(active[u])).collect();
        let s = (0..n_uav).map(|u| next(active[u])).collect();
        let r = (0..n_ue)
            .map(|k| (0..n_uav).map(|u| next(active[u] && net.topology.serves(k, u))).collect())
            .collect();
        let eta = (0..n_ue).map(|_| next(active[HAP])).collect();
        let zeta = n;
        let gain = (0..n_ue)
            .map(|k| {
                (0..n_uav)
                    .map(|u| net.scenario.uavs[u].p_max * net.gains[k][u] / net.scenario.noise_power[k])
                    .collect()
            })
            .collect();
        AllocationModel {
            net,
            opts,
            layout: Layout {
                p,
                xc,
                s,
                r,
                eta,
                zeta,
                n: zeta + 1,
            },
            gain,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.n
    }

    fn p_max(&self, u: usize) -> f64 {
        self.net.scenario.uavs[u].p_max
    }

    /// Normalized variable vector of `alloc`; `eta` and the elastic entry are
    /// zero.
    pub fn pack(&self, alloc: &Allocation) -> Vec<f64> {
        let l = &self.layout;
        let mut x = vec![0.0; l.n];
        for (k, j) in l.p.iter().enumerate() {
            if let Some(j) = j {
                x[*j] = alloc.p_private[k] / self.p_max(HAP);
            }
        }
        for u in 0..self.net.num_uavs() {
            if let Some(j) = l.xc[u] {
                x[j] = alloc.p_common[u] / self.p_max(u);
            }
            if let Some(j) = l.s[u] {
                x[j] = alloc.quant_var[u] / self.p_max(u);
            }
        }
        for (k, row) in l.r.iter().enumerate() {
            for (u, j) in row.iter().enumerate() {
                if let Some(j) = j {
                    x[*j] = alloc.r_common[k][u];
                }
            }
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> Allocation {
        let l = &self.layout;
        let (n_ue, n_uav) = (self.net.num_ues(), self.net.num_uavs());
        let mut a = Allocation::zeros(n_ue, n_uav);
        for k in 0..n_ue {
            if let Some(j) = l.p[k] {
                a.p_private[k] = x[j].max(0.0) * self.p_max(HAP);
            }
        }
        for u in 0..n_uav {
            a.p_common[u] = l.xc[u].map_or(0.0, |j| x[j].max(0.0) * self.p_max(u));
            a.quant_var[u] = l.s[u].map_or(self.opts.quant_floor, |j| x[j]) * self.p_max(u);
        }
        for k in 0..n_ue {
            for u in 0..n_uav {
                if let Some(j) = l.r[k][u] {
                    a.r_common[k][u] = x[j].max(0.0);
                }
            }
        }
        a
    }

    fn add_x(&self, f: &mut SmoothFn, u: usize, coef: f64) {
        if let Some(j) = self.layout.xc[u] {
            f.add_linear(j, coef);
        }
    }

    fn add_s(&self, f: &mut SmoothFn, u: usize, coef: f64) {
        match self.layout.s[u] {
            Some(j) => f.add_linear(j, coef),
            None => f.add_constant(coef * self.opts.quant_floor),
        };
    }

    fn add_private_sum(&self, f: &mut SmoothFn, except: Option<usize>, coef: f64) {
        for (k, j) in self.layout.p.iter().enumerate() {
            if let (Some(j), false) = (j, Some(k) == except) {
                f.add_linear(*j, coef);
            }
        }
    }

    /// `coef * nu^c_{k,u} / sigma_k^2`.
    fn add_nu_common(&self, f: &mut SmoothFn, k: usize, u: usize, coef: f64) {
        let t = self.net.topology;
        let g = &self.gain[k];
        let pos = t.decode_position(k, u).expect("u serves k");
        for &j in &t.decode_order[k][pos + 1..] {
            self.add_x(f, j, coef * g[j]);
        }
        self.add_private_sum(f, None, coef * g[HAP]);
        for &i in &t.serving_uavs[k] {
            self.add_s(f, i, coef * g[i]);
        }
        f.add_constant(coef);
    }

    /// `coef * nu^p_k / sigma_k^2`.
    fn add_nu_private(&self, f: &mut SmoothFn, k: usize, coef: f64) {
        let g = &self.gain[k];
        self.add_private_sum(f, Some(k), coef * g[HAP]);
        for &i in &self.net.topology.serving_uavs[k] {
            self.add_s(f, i, coef * g[i]);
        }
        f.add_constant(coef);
    }

    /// `(1 - e sqrt(G v))^2` with `v` the normalized power at index `var`.
    fn add_signal_error(f: &mut SmoothFn, var: usize, e: f64, g: f64, coef: f64) {
        f.add_constant(coef)
            .add_linear(var, coef * e * e * g)
            .add_term(Term::Sqrt {
                var,
                coef: -2.0 * coef * e * g.sqrt(),
            });
    }

    fn noise_amp(&self, k: usize) -> f64 {
        self.net.scenario.noise_power[k].sqrt()
    }

    /// MSE of the common signal of `u` at `k` as a function of the normalized
    /// variables; None when `u` carries no common signal.
    pub fn mse_common_fn(&self, st: &WmmseState, k: usize, u: usize) -> Option<SmoothFn> {
        let j = self.layout.xc[u]?;
        if !self.net.topology.serves(k, u) {
            return None;
        }
        let e = st.eq_common[k][u] * self.noise_amp(k);
        let mut f = SmoothFn::default();
        self.add_nu_common(&mut f, k, u, e * e);
        Self::add_signal_error(&mut f, j, e, self.gain[k][u], 1.0);
        Some(f)
    }

    /// MSE of UE `k`'s private signal; None when the HAP is silent.
    pub fn mse_private_fn(&self, st: &WmmseState, k: usize) -> Option<SmoothFn> {
        let j = self.layout.p[k]?;
        let e = st.eq_private[k] * self.noise_amp(k);
        let mut f = SmoothFn::default();
        self.add_nu_private(&mut f, k, e * e);
        Self::add_signal_error(&mut f, j, e, self.gain[k][HAP], 1.0);
        Some(f)
    }

    /// Fronthaul upper bound of `u`; None for an inactive UAV.
    pub fn fronthaul_fn(&self, st: &WmmseState, u: usize) -> Option<SmoothFn> {
        let sj = self.layout.s[u]?;
        let sigma = st.sigma_cap[u] / self.p_max(u);
        let mut f = SmoothFn::constant(sigma.log2() - LOG2E);
        let c = LOG2E / sigma;
        self.add_x(&mut f, u, c);
        if u == HAP {
            self.add_private_sum(&mut f, None, c);
        }
        f.add_linear(sj, c).add_term(Term::Ln { var: sj, coef: -LOG2E });
        Some(f)
    }

    /// `-(log2 w + (1 - w eps)/ln 2)`.
    fn neg_wmmse(mse: SmoothFn, w: f64) -> SmoothFn {
        let mut f = mse.scaled(w * LOG2E);
        f.add_constant(-w.log2() - LOG2E);
        f
    }

    /// Convex program for fixed `st`. Returns it with the indices of the
    /// elastic constraints. In phase one the objective is the elastic
    /// variable alone.
    fn program(&self, st: &WmmseState, phase_one: bool) -> (Program, Vec<usize>) {
        let l = &self.layout;
        let t = self.net.topology;
        let sc = self.net.scenario;
        let (n_ue, n_uav) = (self.net.num_ues(), self.net.num_uavs());
        let mut prog = Program::new(l.n);
        let mut soft = Vec::new();

        for k in 0..n_ue {
            if let (Some(e), Some(mse)) = (l.eta[k], self.mse_private_fn(st, k)) {
                let mut g = Self::neg_wmmse(mse, st.w_private[k]);
                g.add_linear(e, 1.0);
                prog.add_constraint(g);
            }
            let mut g = SmoothFn::constant(sc.rate_threshold[k]);
            if let Some(e) = l.eta[k] {
                g.add_linear(e, -1.0);
            }
            for j in l.r[k].iter().flatten() {
                g.add_linear(*j, -1.0);
            }
            if sc.rate_threshold[k] > 0.0 {
                g.add_linear(l.zeta, -1.0);
                soft.push(prog.add_constraint(g));
            }
        }

        for u in 0..n_uav {
            if l.xc[u].is_none() {
                continue;
            }
            for &k in &t.served_ues[u] {
                let mse = self.mse_common_fn(st, k, u).expect("active pair");
                let mut g = Self::neg_wmmse(mse, st.w_common[k][u]);
                for &kk in &t.served_ues[u] {
                    g.add_linear(l.r[kk][u].expect("member"), 1.0);
                }
                g.add_linear(l.zeta, -1.0);
                soft.push(prog.add_constraint(g));
            }
            let mut g = self.fronthaul_fn(st, u).expect("active");
            g.add_constant(-sc.uavs[u].fronthaul_capacity);
            prog.add_constraint(g);

            let mut g = SmoothFn::constant(-1.0);
            self.add_x(&mut g, u, 1.0);
            if u == HAP {
                self.add_private_sum(&mut g, None, 1.0);
            }
            self.add_s(&mut g, u, 1.0);
            prog.add_constraint(g);
            prog.add_lower_bound(l.xc[u].unwrap(), 0.0);
            prog.add_lower_bound(l.s[u].unwrap(), self.opts.quant_floor);
        }
        for j in l.p.iter().flatten().chain(l.r.iter().flatten().flatten()) {
            prog.add_lower_bound(*j, 0.0);
        }

        if phase_one {
            prog.cost[l.zeta] = 1.0;
            prog.add_lower_bound(l.zeta, -1.0);
        } else {
            for j in l.eta.iter().flatten().chain(l.r.iter().flatten().flatten()) {
                prog.cost[*j] = -1.0;
            }
            prog.cost[l.zeta] = self.opts.penalty;
            prog.add_lower_bound(l.zeta, 0.0);
        }
        (prog, soft)
    }

    /// Moves `alloc` strictly inside the power, fronthaul and sign
    /// constraints without changing the coverage structure.
    fn interior(&self, alloc: &Allocation) -> Allocation {
        let l = &self.layout;
        let floor = self.opts.quant_floor;
        let mut a = alloc.clone();
        for k in 0..self.net.num_ues() {
            if l.p[k].is_some() {
                a.p_private[k] = a.p_private[k].max(1e-9 * self.p_max(HAP));
            } else {
                a.p_private[k] = 0.0;
            }
            for u in 0..self.net.num_uavs() {
                a.r_common[k][u] = if l.r[k][u].is_some() {
                    a.r_common[k][u].max(1e-10)
                } else {
                    0.0
                };
            }
        }
        for u in 0..self.net.num_uavs() {
            let pm = self.p_max(u);
            if l.xc[u].is_none() {
                a.p_common[u] = 0.0;
                a.quant_var[u] = floor * pm;
                continue;
            }
            a.p_common[u] = a.p_common[u].max(1e-9 * pm);
            let signal = tx_signal_variance(&a, u);
            let c = self.net.scenario.uavs[u].fronthaul_capacity;
            let need = signal / (c.exp2() - 1.0) * (1.0 + 1e-6);
            a.quant_var[u] = a.quant_var[u].max(need).max(floor * pm * 1.001);
            let total = signal + a.quant_var[u];
            if total > pm * (1.0 - 1e-7) {
                let f = pm * (1.0 - 1e-6) / total;
                a.p_common[u] *= f;
                a.quant_var[u] *= f;
                if u == HAP {
                    a.p_private.iter_mut().for_each(|p| *p *= f);
                }
            }
        }
        a
    }

    /// Start vector for [`Self::program`]: `alloc` packed, rate slacks just below
    /// their bounds, and the elastic variable above the worst violation.
    fn start(&self, alloc: &Allocation, st: &WmmseState, prog: &Program, soft: &[usize]) -> Vec<f64> {
        let mut x = self.pack(alloc);
        for k in 0..self.net.num_ues() {
            if let (Some(e), Some(mse)) = (self.layout.eta[k], self.mse_private_fn(st, k)) {
                let lb = -Self::neg_wmmse(mse, st.w_private[k]).value(&x);
                x[e] = lb - 1e-6 * (1.0 + lb.abs());
            }
        }
        let z = self.layout.zeta;
        x[z] = 0.0;
        let worst = soft.iter().map(|&i| prog.constraints[i].value(&x)).fold(0.0f64, f64::max);
        x[z] = worst + 1e-4;
        x
    }
}

#[derive(Debug, Clone)]
pub struct AllocationSolution {
    pub allocation: Allocation,
    pub report: RateReport,
    /// Convex solves performed in the main phase.
    pub iterations: usize,
    /// Exact sum-rate of each accepted iterate, starting with the start point.
    pub history: Vec<f64>,
}

fn qos_check(report: &RateReport, tol: f64) -> Result<()> {
    let ues = report.qos_violators(tol);
    if ues.is_empty() {
        Ok(())
    } else {
        Err(Error::QosInfeasible { ues })
    }
}

/// Drives the start point into the QoS-feasible region by minimizing the
/// largest rate-constraint violation.
fn phase_one(model: &AllocationModel<'_, '_>, start: Allocation) -> Result<Allocation> {
    let net = model.net;
    let tol = model.opts.feas_tol;
    let mut cur = start;
    let mut last = f64::INFINITY;
    for _ in 0..model.opts.max_inner {
        let st = update_equalizers_weights(net, &cur)?;
        let (prog, soft) = model.program(&st, true);
        let x0 = model.start(&cur, &st, &prog, &soft);
        let sol = cvx::solve(&prog, &x0, &model.opts.barrier)?;
        let zeta = sol.x[model.layout.zeta];
        cur = model.interior(&model.unpack(&sol.x));
        let report = rate_report(net, &cur)?;
        if report.qos_violators(tol).is_empty() {
            return Ok(cur);
        }
        if zeta > last - 1e-9 {
            return qos_check(&report, tol).map(|_| cur);
        }
        last = zeta;
    }
    qos_check(&rate_report(net, &cur)?, tol).map(|_| cur)
}

/// Alternates closed-form WMMSE updates with the convex allocation program
/// until the exact sum-rate stalls. The topology is held fixed.
pub fn solve_allocation(net: &Network<'_>, init: &Allocation, opts: &AllocationOptions) -> Result<AllocationSolution> {
    let model = AllocationModel::new(net, *opts);
    let tol = opts.feas_tol;
    let mut cur = model.interior(init);
    let mut report = rate_report(net, &cur)?;
    if !report.qos_violators(tol).is_empty() {
        cur = phase_one(&model, cur)?;
        report = rate_report(net, &cur)?;
    }
    let mut best = report.is_feasible(tol).then(|| (cur.clone(), report.clone()));
    let mut history = vec![report.sum_rate];
    let mut iterations = 0;
    let mut value = report.sum_rate;

    for _ in 0..opts.max_inner {
        let st = update_equalizers_weights(net, &cur)?;
        let (prog, soft) = model.program(&st, false);
        let x0 = model.start(&cur, &st, &prog, &soft);
        let sol = match cvx::solve(&prog, &x0, &opts.barrier) {
            Ok(s) => s,
            Err(e) if best.is_none() => return Err(e.into()),
            Err(_) => break,
        };
        iterations += 1;
        let mut next = model.unpack(&sol.x);
        clip_to_caps(net, &mut next)?;
        let rep = rate_report(net, &next)?;
        if !rep.is_feasible(tol) {
            break;
        }
        let gain = rep.sum_rate - value;
        value = rep.sum_rate;
        history.push(value);
        if best.as_ref().is_none_or(|b| rep.sum_rate > b.1.sum_rate) {
            best = Some((next.clone(), rep));
        }
        cur = model.interior(&next);
        if gain < opts.inner_tol {
            break;
        }
    }
    let (allocation, report) = match best {
        Some(b) => b,
        None => {
            let r = rate_report(net, &cur)?;
            qos_check(&r, tol)?;
            return Err(Error::Domain("allocation did not reach a feasible point".into()));
        }
    };
    Ok(AllocationSolution {
        allocation,
        report,
        iterations,
        history,
    })
}

/// Maximizes the total common rate over the shares `R^c` alone, with every
/// power held at `alloc`.
pub fn optimize_common_rates(net: &Network<'_>, alloc: &Allocation, opts: &AllocationOptions) -> Result<Allocation> {
    let (n_ue, n_uav) = (net.num_ues(), net.num_uavs());
    let t = net.topology;
    let mut idx = vec![vec![None; n_uav]; n_ue];
    let mut n = 0;
    let mut caps = vec![0.0; n_uav];
    for u in 0..n_uav {
        if t.served_ues[u].is_empty() || alloc.p_common[u] <= 0.0 {
            continue;
        }
        let mut cap = f64::INFINITY;
        for &k in &t.served_ues[u] {
            cap = cap.min(common_rate_cap(net, alloc, k, u)?);
            idx[k][u] = Some(n);
            n += 1;
        }
        caps[u] = cap;
    }
    let zeta = n;
    let mut prog = Program::new(n + 1);
    let mut x0 = vec![0.0; n + 1];
    let mut soft = Vec::new();
    for u in 0..n_uav {
        let members: Vec<usize> = t.served_ues[u].iter().filter_map(|&k| idx[k][u]).collect();
        if members.is_empty() {
            continue;
        }
        let mut g = SmoothFn::constant(-caps[u]);
        for &j in &members {
            g.add_linear(j, 1.0);
            x0[j] = (caps[u] / members.len() as f64).max(1e-10);
            prog.add_lower_bound(j, 0.0);
            prog.cost[j] = -1.0;
        }
        g.add_linear(zeta, -1.0);
        soft.push(prog.add_constraint(g));
    }
    for k in 0..n_ue {
        let need = net.scenario.rate_threshold[k] - private_rate(net, alloc, k);
        if need <= 0.0 {
            continue;
        }
        let mut g = SmoothFn::constant(need);
        for j in idx[k].iter().flatten() {
            g.add_linear(*j, -1.0);
        }
        g.add_linear(zeta, -1.0);
        soft.push(prog.add_constraint(g));
    }
    prog.add_lower_bound(zeta, 0.0);
    prog.cost[zeta] = opts.penalty;
    let worst = soft.iter().map(|&i| prog.constraints[i].value(&x0)).fold(0.0f64, f64::max);
    x0[zeta] = worst + 1e-4;

    let sol = cvx::solve(&prog, &x0, &opts.barrier)?;
    let mut out = alloc.clone();
    for k in 0..n_ue {
        for u in 0..n_uav {
            out.r_common[k][u] = idx[k][u].map_or(0.0, |j| sol.x[j].max(0.0));
        }
    }
    clip_to_caps(net, &mut out)?;
    qos_check(&rate_report(net, &out)?, opts.feas_tol)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_scenario;
    use crate::rates::fronthaul_rate;
    use crate::model::{coverage_sets, decoding_order, gain_matrix, Placement, Point3, Scenario, Topology};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(ues: &[(f64, f64)], laps: &[(f64, f64, f64)]) -> (Scenario, Placement, Topology) {
        let s = small_scenario(ues, laps.len());
        let mut q = vec![Point3::new(5000.0, 5000.0, 20_000.0)];
        q.extend(laps.iter().map(|&(x, y, z)| Point3::new(x, y, z)));
        let q = Placement { q };
        let t = coverage_sets(&s, &q).unwrap();
        let t = decoding_order(&t, &gain_matrix(&s, &q).unwrap(), &s.uavs.iter().map(|u| u.p_max).collect::<Vec<_>>());
        (s, q, t)
    }

    fn random_alloc(rng: &mut ChaCha8Rng, s: &Scenario) -> Allocation {
        let (k, u) = (s.num_ues(), s.num_uavs());
        let mut a = Allocation::zeros(k, u);
        for p in &mut a.p_private {
            *p = rng.random_range(0.0..1.0);
        }
        for (i, p) in a.p_common.iter_mut().enumerate() {
            *p = rng.random_range(0.0..0.4) * s.uavs[i].p_max;
        }
        for (i, p) in a.quant_var.iter_mut().enumerate() {
            *p = rng.random_range(1e-6..1e-2) * s.uavs[i].p_max;
        }
        a
    }

    #[test]
    fn mse_examples() {
        let (s, q, t) = setup(&[(4000.0, 4000.0), (6000.0, 6000.0)], &[(4000.0, 4000.0, 2500.0)]);
        let net = Network::new(&s, &q, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_alloc(&mut rng, &s);
        assert_eq!(mse_common(&net, &a, 0, 1, 0.0).unwrap(), 1.0);
        assert_eq!(mse_private(&net, &a, 0, 0.0), 1.0);
        let nu = common_interference(&net, &a, 0, 1).unwrap();
        let sig = a.p_common[1] * net.gains[0][1];
        let (e, _) = mmse(sig, nu);
        assert!((mse_common(&net, &a, 0, 1, e).unwrap() - nu / (nu + sig)).abs() < 1e-12);
        let mut z = a.clone();
        z.p_common[1] = 0.0;
        for e in [0.0, 1.0, 1e5, -3.0] {
            assert!(mse_common(&net, &z, 0, 1, e).unwrap() >= 1.0);
        }
    }

    #[test]
    fn bounds_tight_after_update_and_safe_elsewhere() {
        let (s, q, t) = setup(
            &[(4000.0, 4000.0), (6000.0, 6000.0), (4500.0, 3500.0)],
            &[(4000.0, 4000.0, 2500.0)],
        );
        let net = Network::new(&s, &q, &t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let a = random_alloc(&mut rng, &s);
            let st = update_equalizers_weights(&net, &a).unwrap();
            for k in 0..3 {
                assert!((rate_lb_private(&net, &a, &st, k) - private_rate(&net, &a, k)).abs() < 1e-9);
                for &u in &t.serving_uavs[k] {
                    let lb = rate_lb_common(&net, &a, &st, k, u).unwrap();
                    assert!((lb - common_rate_cap(&net, &a, k, u).unwrap()).abs() < 1e-9);
                }
            }
            for u in 0..2 {
                let ub = fronthaul_ub(&a, u, st.sigma_cap[u]).unwrap();
                assert!((ub - fronthaul_rate(&a, u).unwrap()).abs() < 1e-9);
                assert!(fronthaul_ub(&a, u, 1.5 * st.sigma_cap[u]).unwrap() > fronthaul_rate(&a, u).unwrap());
            }
            for _ in 0..5 {
                let b = random_alloc(&mut rng, &s);
                for k in 0..3 {
                    assert!(rate_lb_private(&net, &b, &st, k) <= private_rate(&net, &b, k) + 1e-9);
                    for &u in &t.serving_uavs[k] {
                        assert!(rate_lb_common(&net, &b, &st, k, u).unwrap() <= common_rate_cap(&net, &b, k, u).unwrap() + 1e-9);
                    }
                }
                for u in 0..2 {
                    assert!(fronthaul_ub(&b, u, st.sigma_cap[u]).unwrap() >= fronthaul_rate(&b, u).unwrap() - 1e-9);
                }
            }
        }
    }

    #[test]
    fn degenerate_bound_values() {
        assert_eq!(wmmse_bound(1.0, 1.0), 0.0);
        let mut a = Allocation::zeros(1, 1);
        a.quant_var[0] = 0.3;
        assert!(fronthaul_ub(&a, 0, 0.3).unwrap().abs() < 1e-15);
        a.quant_var[0] = 0.0;
        assert!(matches!(fronthaul_ub(&a, 0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn model_functions_match_physical_values() {
        let (s, q, t) = setup(&[(4000.0, 4000.0), (6000.0, 6000.0)], &[(4000.0, 4000.0, 2500.0)]);
        let net = Network::new(&s, &q, &t).unwrap();
        let m = AllocationModel::new(&net, AllocationOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_alloc(&mut rng, &s);
        let b = random_alloc(&mut rng, &s);
        let st = update_equalizers_weights(&net, &a).unwrap();
        let x = m.pack(&b);
        for k in 0..2 {
            let v = m.mse_private_fn(&st, k).unwrap().value(&x);
            assert!((v - mse_private(&net, &b, k, st.eq_private[k])).abs() < 1e-9 * v.max(1.0));
            for &u in &t.serving_uavs[k] {
                let v = m.mse_common_fn(&st, k, u).unwrap().value(&x);
                let e = mse_common(&net, &b, k, u, st.eq_common[k][u]).unwrap();
                assert!((v - e).abs() < 1e-9 * v.max(1.0));
            }
        }
        for u in 0..2 {
            let v = m.fronthaul_fn(&st, u).unwrap().value(&x);
            assert!((v - fronthaul_ub(&b, u, st.sigma_cap[u]).unwrap()).abs() < 1e-9);
        }
        let back = m.unpack(&x);
        for u in 0..2 {
            assert!((back.p_common[u] - b.p_common[u]).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_power_projection_arithmetic() {
        let (mut s, q, t) = setup(&[(4000.0, 4000.0), (6000.0, 6000.0)], &[]);
        s.uavs[0].fronthaul_capacity = 10.0;
        let net = Network::new(&s, &q, &t).unwrap();
        let a = equal_power_split(&net, 1e-12);
        let signal = 10.0 * 1023.0 / 1024.0;
        assert!((a.p_private[0] - signal / 3.0).abs() < 1e-12);
        assert!((a.p_common[0] - signal / 3.0).abs() < 1e-12);
        assert!((fronthaul_rate(&a, 0).unwrap() - 10.0).abs() < 1e-9);
        assert!((radiated_power(&a, 0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn initializer_is_feasible() {
        let (s, q, t) = setup(
            &[(4000.0, 4000.0), (6000.0, 6000.0), (4500.0, 3500.0)],
            &[(4000.0, 4000.0, 2500.0)],
        );
        let net = Network::new(&s, &q, &t).unwrap();
        let a = feasible_initializer(&net, 1e-12).unwrap();
        let r = rate_report(&net, &a).unwrap();
        assert!(r.is_feasible(1e-9), "{r:?}");
    }

    #[test]
    fn solve_improves_and_stays_feasible() {
        let (s, q, t) = setup(
            &[(4000.0, 4000.0), (6000.0, 6000.0), (4500.0, 3500.0), (7000.0, 3000.0)],
            &[(4000.0, 4000.0, 2500.0)],
        );
        let net = Network::new(&s, &q, &t).unwrap();
        let init = feasible_initializer(&net, 1e-12).unwrap();
        let start = rate_report(&net, &init).unwrap().sum_rate;
        let sol = solve_allocation(&net, &init, &AllocationOptions::default()).unwrap();
        assert!(sol.report.is_feasible(1e-7));
        assert!(sol.report.sum_rate > start);
        for w in sol.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-7, "{:?}", sol.history);
        }
    }

    #[test]
    fn symmetric_ues_get_equal_private_power() {
        // equidistant from the HAP, no LAP
        let (s, q, t) = setup(&[(3000.0, 5000.0), (7000.0, 5000.0)], &[]);
        let net = Network::new(&s, &q, &t).unwrap();
        let init = feasible_initializer(&net, 1e-12).unwrap();
        let sol = solve_allocation(&net, &init, &AllocationOptions::default()).unwrap();
        let p = &sol.allocation.p_private;
        assert!((p[0] - p[1]).abs() <= 1e-4 * p[0].max(p[1]), "{p:?}");
    }

    #[test]
    fn unreachable_threshold_is_reported() {
        let (mut s, q, t) = setup(&[(4000.0, 4000.0), (6000.0, 6000.0)], &[]);
        s.rate_threshold = vec![40.0, 0.1];
        let net = Network::new(&s, &q, &t).unwrap();
        let init = feasible_initializer(&net, 1e-12).unwrap();
        match solve_allocation(&net, &init, &AllocationOptions::default()) {
            Err(Error::QosInfeasible { ues }) => assert!(ues.contains(&0)),
            other => panic!("expected QoS infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn common_rate_lp_fills_caps() {
        let (s, q, t) = setup(
            &[(4000.0, 4000.0), (6000.0, 6000.0), (4500.0, 3500.0)],
            &[(4000.0, 4000.0, 2500.0)],
        );
        let net = Network::new(&s, &q, &t).unwrap();
        let a = equal_power_split(&net, 1e-12);
        let out = optimize_common_rates(&net, &a, &AllocationOptions::default()).unwrap();
        let r = rate_report(&net, &out).unwrap();
        for u in 0..2 {
            assert!(r.common_cap_slack[u] >= -1e-9 && r.common_cap_slack[u] < 1e-5, "{:?}", r.common_cap_slack);
        }
        assert!(r.is_feasible(1e-7));
    }
}
