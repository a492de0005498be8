//! Experiment runners and their machine-readable outputs.

mod config;
mod scenario_file;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::*;
pub use scenario_file::*;

use crate::ao::{run, run_from, AoSolution, Mode};
use crate::error::{Error, Result};
use crate::model::{Scenario, UavKind};

pub const CONVERGENCE_CSV: &str = "convergence.csv";
pub const SWEEP_CSV: &str = "fronthaul_sweep.csv";
pub const SWEEP_MEANS_CSV: &str = "fronthaul_sweep_means.csv";
pub const PLACEMENT_CSV: &str = "placement.csv";
pub const PLACEMENT_JSON: &str = "placement.json";
pub const SOLUTION_JSON: &str = "solution.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub mode: Mode,
    pub iteration: usize,
    pub sum_rate_bps_hz: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub c_total: f64,
    pub seed: u64,
    pub sum_rate_bps_hz: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeanRow {
    pub mode: Mode,
    pub c_total: f64,
    pub mean_sum_rate_bps_hz: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRow {
    /// `uav` or `ue`.
    pub entity: String,
    pub index: usize,
    pub kind: String,
    pub initial_x_m: f64,
    pub initial_y_m: f64,
    pub initial_z_m: f64,
    pub final_x_m: f64,
    pub final_y_m: f64,
    pub final_z_m: f64,
    /// Served UEs of a UAV, or serving UAVs of a UE, separated by `;`.
    pub association: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavDump {
    pub index: usize,
    pub kind: String,
    pub initial_m: [f64; 3],
    pub final_m: [f64; 3],
    pub served_ues: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementDump {
    pub mode: Mode,
    pub seed: u64,
    pub sum_rate_bps_hz: f64,
    pub converged: bool,
    pub ue_positions_m: Vec<[f64; 3]>,
    pub serving_uavs: Vec<Vec<usize>>,
    pub uavs: Vec<UavDump>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

fn prepare(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn trace_rows(sol: &AoSolution) -> Vec<ConvergenceRow> {
    sol.trace
        .records
        .iter()
        .map(|r| ConvergenceRow {
            mode: sol.trace.mode,
            iteration: r.iteration,
            sum_rate_bps_hz: r.sum_rate,
            wall_ms: r.wall_ms,
        })
        .collect()
}

/// One solve of the configured mode; writes the trace and the final solution.
pub fn run_single(spec: &ExperimentSpec) -> Result<AoSolution> {
    let s = spec.scenario(spec.seed)?;
    let sol = run(&s, &spec.ao)?;
    prepare(&spec.out_dir)?;
    write_csv(&spec.out_dir.join(CONVERGENCE_CSV), &trace_rows(&sol))?;
    let json = serde_json::json!({
        "mode": sol.trace.mode,
        "seed": spec.seed,
        "sum_rate_bps_hz": sol.sum_rate(),
        "converged": sol.converged(),
        "placement": sol.placement,
        "topology": sol.topology,
        "allocation": sol.allocation,
        "private_rate_bps_hz": sol.report.private_rate,
        "common_rate_bps_hz": sol.report.common_rate,
        "fronthaul_rate_bps_hz": sol.report.fronthaul_rate,
    });
    std::fs::write(spec.out_dir.join(SOLUTION_JSON), serde_json::to_string_pretty(&json)?)?;
    Ok(sol)
}

/// Every listed mode on one scenario, traced per iteration.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<Vec<AoSolution>> {
    let s = spec.scenario(spec.seed)?;
    let sols: Vec<Result<AoSolution>> = spec
        .modes
        .par_iter()
        .map(|&m| run(&s, &spec.ao_for(m, spec.ao.seed)))
        .collect();
    let sols: Vec<AoSolution> = sols.into_iter().collect::<Result<_>>()?;
    let rows: Vec<ConvergenceRow> = sols.iter().flat_map(trace_rows).collect();
    prepare(&spec.out_dir)?;
    write_csv(&spec.out_dir.join(CONVERGENCE_CSV), &rows)?;
    Ok(sols)
}

fn better(a: Result<AoSolution>, b: Option<Result<AoSolution>>) -> Result<AoSolution> {
    match (a, b) {
        (Ok(x), Some(Ok(y))) => Ok(if y.sum_rate() > x.sum_rate() { y } else { x }),
        (Ok(x), _) => Ok(x),
        (Err(_), Some(Ok(y))) => Ok(y),
        (Err(e), _) => Err(e),
    }
}

/// Solves one (mode, seed) pair over an ascending budget list. Each point
/// keeps the better of a fresh run and a run started from the previous
/// point's solution.
pub fn sweep_chain(base: &Scenario, spec: &ExperimentSpec, mode: Mode, seed: u64, c_totals: &[f64]) -> Vec<(f64, Result<AoSolution>)> {
    let cfg = spec.ao_for(mode, seed);
    let mut out = Vec::with_capacity(c_totals.len());
    let mut prev: Option<AoSolution> = None;
    for &c in c_totals {
        let s = base.clone().with_total_fronthaul(c);
        let fresh = run(&s, &cfg);
        let warm = prev
            .as_ref()
            .map(|p| run_from(&s, &cfg, &p.placement, &p.topology, &p.allocation));
        let best = better(fresh, warm);
        if let Ok(b) = &best {
            prev = Some(b.clone());
        }
        out.push((c, best));
    }
    out
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub means: Vec<SweepMeanRow>,
    /// Points with no solution, as (mode, c_total, seed, message).
    pub failures: Vec<(Mode, f64, u64, String)>,
}

pub fn sweep_means(rows: &[SweepRow], modes: &[Mode], c_totals: &[f64]) -> Vec<SweepMeanRow> {
    let mut out = Vec::new();
    for &m in modes {
        for &c in c_totals {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.mode == m && r.c_total == c)
                .map(|r| r.sum_rate_bps_hz)
                .collect();
            if !v.is_empty() {
                out.push(SweepMeanRow {
                    mode: m,
                    c_total: c,
                    mean_sum_rate_bps_hz: v.iter().sum::<f64>() / v.len() as f64,
                    runs: v.len(),
                });
            }
        }
    }
    out
}

/// Sum-rate against the total fronthaul budget for every mode and seed.
pub fn run_fronthaul_sweep(spec: &ExperimentSpec) -> Result<SweepResult> {
    let mut cs = spec.c_totals.clone();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    let bases: Vec<Scenario> = spec.seeds.iter().map(|&s| spec.scenario(s)).collect::<Result<_>>()?;
    let jobs: Vec<(Mode, usize)> = spec
        .modes
        .iter()
        .flat_map(|&m| (0..spec.seeds.len()).map(move |i| (m, i)))
        .collect();
    let chains: Vec<Vec<(f64, Result<AoSolution>)>> = jobs
        .par_iter()
        .map(|&(m, i)| sweep_chain(&bases[i], spec, m, spec.seeds[i], &cs))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (&(mode, i), chain) in jobs.iter().zip(chains) {
        let seed = spec.seeds[i];
        for (c, r) in chain {
            match r {
                Ok(sol) => rows.push(SweepRow {
                    mode,
                    c_total: c,
                    seed,
                    sum_rate_bps_hz: sol.sum_rate(),
                    converged: sol.converged(),
                }),
                Err(e) => failures.push((mode, c, seed, e.to_string())),
            }
        }
    }
    let means = sweep_means(&rows, &spec.modes, &cs);
    prepare(&spec.out_dir)?;
    write_csv(&spec.out_dir.join(SWEEP_CSV), &rows)?;
    write_csv(&spec.out_dir.join(SWEEP_MEANS_CSV), &means)?;
    Ok(SweepResult { rows, means, failures })
}

fn kind_name(k: UavKind) -> String {
    match k {
        UavKind::Hap => "hap".into(),
        UavKind::Lap(_) => "lap".into(),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

pub fn placement_dump(sol: &AoSolution, seed: u64) -> PlacementDump {
    let s = &sol.scenario;
    let uavs = (0..s.num_uavs())
        .map(|u| UavDump {
            index: u,
            kind: kind_name(s.uavs[u].kind),
            initial_m: sol.initial_placement.q[u].0,
            final_m: sol.placement.q[u].0,
            served_ues: sol.topology.served_ues[u].clone(),
        })
        .collect();
    PlacementDump {
        mode: sol.trace.mode,
        seed,
        sum_rate_bps_hz: sol.sum_rate(),
        converged: sol.converged(),
        ue_positions_m: s.ue_positions.iter().map(|p| p.0).collect(),
        serving_uavs: sol.topology.serving_uavs.clone(),
        uavs,
    }
}

pub fn placement_rows(d: &PlacementDump) -> Vec<PlacementRow> {
    let mut rows: Vec<PlacementRow> = d
        .uavs
        .iter()
        .map(|u| PlacementRow {
            entity: "uav".into(),
            index: u.index,
            kind: u.kind.clone(),
            initial_x_m: u.initial_m[0],
            initial_y_m: u.initial_m[1],
            initial_z_m: u.initial_m[2],
            final_x_m: u.final_m[0],
            final_y_m: u.final_m[1],
            final_z_m: u.final_m[2],
            association: join(&u.served_ues),
        })
        .collect();
    for (k, p) in d.ue_positions_m.iter().enumerate() {
        rows.push(PlacementRow {
            entity: "ue".into(),
            index: k,
            kind: "ue".into(),
            initial_x_m: p[0],
            initial_y_m: p[1],
            initial_z_m: p[2],
            final_x_m: p[0],
            final_y_m: p[1],
            final_z_m: p[2],
            association: join(&d.serving_uavs[k]),
        });
    }
    rows
}

/// Initial and final UAV positions for the configured mode.
pub fn run_placement_dump(spec: &ExperimentSpec) -> Result<(AoSolution, PlacementDump)> {
    let s = spec.scenario(spec.seed)?;
    let sol = run(&s, &spec.ao)?;
    let dump = placement_dump(&sol, spec.seed);
    prepare(&spec.out_dir)?;
    write_csv(&spec.out_dir.join(PLACEMENT_CSV), &placement_rows(&dump))?;
    std::fs::write(spec.out_dir.join(PLACEMENT_JSON), serde_json::to_string_pretty(&dump)?)?;
    Ok((sol, dump))
}

/// What an experiment produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Every run reached the stopping criterion.
    pub converged: bool,
    pub summary: String,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<Outcome> {
    let dir = &spec.out_dir;
    match spec.kind {
        ExperimentKind::SingleRun => {
            let sol = run_single(spec)?;
            Ok(Outcome {
                files: vec![dir.join(CONVERGENCE_CSV), dir.join(SOLUTION_JSON)],
                converged: sol.converged(),
                summary: format!(
                    "{}: sum-rate {:.6} bps/Hz after {} iterations",
                    sol.trace.mode,
                    sol.sum_rate(),
                    sol.trace.records.len() - 1
                ),
            })
        }
        ExperimentKind::Convergence => {
            let sols = run_convergence(spec)?;
            let summary = sols
                .iter()
                .map(|s| format!("{}: {:.6}", s.trace.mode, s.sum_rate()))
                .collect::<Vec<_>>()
                .join(", ");
            Ok(Outcome {
                files: vec![dir.join(CONVERGENCE_CSV)],
                converged: sols.iter().all(|s| s.converged()),
                summary,
            })
        }
        ExperimentKind::FronthaulSweep => {
            let r = run_fronthaul_sweep(spec)?;
            if r.rows.is_empty() {
                return Err(Error::InvalidScenario(format!(
                    "no sweep point solved; first failure: {}",
                    r.failures.first().map(|f| f.3.as_str()).unwrap_or("none")
                )));
            }
            Ok(Outcome {
                files: vec![dir.join(SWEEP_CSV), dir.join(SWEEP_MEANS_CSV)],
                converged: r.rows.iter().all(|x| x.converged) && r.failures.is_empty(),
                summary: format!("{} points solved, {} failed", r.rows.len(), r.failures.len()),
            })
        }
        ExperimentKind::PlacementDump => {
            let (sol, d) = run_placement_dump(spec)?;
            Ok(Outcome {
                files: vec![dir.join(PLACEMENT_CSV), dir.join(PLACEMENT_JSON)],
                converged: sol.converged(),
                summary: format!(
                    "HAP altitude {:.1} m -> {:.1} m, sum-rate {:.6} bps/Hz",
                    d.uavs[0].initial_m[2], d.uavs[0].final_m[2], d.sum_rate_bps_hz
                ),
            })
        }
    }
}
