use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use haplap::ao::{initialize, mode_scenario};
use haplap::experiment::{
    run_experiment, write_scenario, ExperimentKind, ExperimentSpec, GeneratorParams, Overrides,
};
use haplap::model::validate_scenario;
use haplap::{Error, Mode};

const EXIT_FAILURE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "haplap", version, about = "HAP-LAP rate-splitting sum-rate maximizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// full, no-placement, hap-only or no-power.
    #[arg(long)]
    mode: Option<Mode>,
    /// Outer stopping threshold, bps/Hz.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    max_outer: Option<usize>,
    /// Generate scenarios with 10 UEs, 4 LAPs and C_T = 50 bps/Hz.
    #[arg(long)]
    full: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            epsilon: self.epsilon,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            max_outer: self.max_outer,
            full: self.full,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the single-scenario experiment described by a config.
    Solve {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a fronthaul-budget sweep over modes and seeds.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a random scenario file.
    GenScenario {
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        l: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total fronthaul budget, bps/Hz.
        #[arg(long, default_value_t = 40.0)]
        c_total: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config and the feasibility of its initial placement.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run_spec(spec: &ExperimentSpec) -> anyhow::Result<u8> {
    let out = run_experiment(spec)?;
    println!("{}", out.summary);
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    if out.converged {
        Ok(0)
    } else {
        eprintln!("warning: maximum outer iterations reached before convergence");
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn load(config: &Path, common: &Common) -> anyhow::Result<ExperimentSpec> {
    ExperimentSpec::load(config, &common.overrides()).with_context(|| format!("loading {}", config.display()))
}

fn validate(spec: &ExperimentSpec) -> anyhow::Result<u8> {
    let base = spec.scenario(spec.seed)?;
    let (q, topo, _, report) = initialize(&base, &spec.ao)?;
    let s = mode_scenario(&base, spec.ao.mode);
    let v = validate_scenario(&s, &q);
    for x in &v {
        println!("violation: {x}");
    }
    println!(
        "{} UEs, {} LAPs, initial sum-rate {:.6} bps/Hz, {} UEs also served by LAPs",
        s.num_ues(),
        s.num_laps(),
        report.sum_rate,
        topo.serving_uavs.iter().filter(|u| u.len() > 1).count()
    );
    Ok(if v.is_empty() { 0 } else { EXIT_INFEASIBLE })
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Solve { config, common } => {
            let spec = load(&config, &common)?;
            if spec.kind == ExperimentKind::FronthaulSweep {
                anyhow::bail!("config describes a sweep; use `haplap sweep`");
            }
            run_spec(&spec)
        }
        Command::Sweep { config, common } => {
            let mut spec = load(&config, &common)?;
            spec.kind = ExperimentKind::FronthaulSweep;
            if let Some(m) = common.mode {
                spec.modes = vec![m];
            }
            run_spec(&spec)
        }
        Command::GenScenario {
            k,
            l,
            seed,
            c_total,
            out,
        } => {
            let s = GeneratorParams {
                num_ues: k,
                num_laps: l,
                c_total_bps_hz: c_total,
                ..GeneratorParams::default()
            }
            .generate(seed)?;
            write_scenario(&out, &s)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Validate { config, common } => validate(&load(&config, &common)?),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let infeasible = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_infeasibility));
            ExitCode::from(if infeasible { EXIT_INFEASIBLE } else { EXIT_FAILURE })
        }
    }
}
