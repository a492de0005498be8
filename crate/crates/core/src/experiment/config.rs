//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scenario_file::{read_scenario, GeneratorParams};
use crate::ao::{AoConfig, Mode};
use crate::error::{Error, Result};
use crate::model::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SingleRun,
    Convergence,
    FronthaulSweep,
    PlacementDump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSection {
    pub mode: Mode,
    pub epsilon_bps_hz: f64,
    pub max_outer: usize,
    /// k-means seed; the scenario seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub kmeans_iters: usize,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        let d = AoConfig::default();
        AlgorithmSection {
            mode: d.mode,
            epsilon_bps_hz: d.epsilon,
            max_outer: d.max_outer,
            seed: None,
            kmeans_iters: d.kmeans_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub c_total_bps_hz: Vec<f64>,
    pub modes: Vec<Mode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub num_seeds: usize,
    pub out_dir: PathBuf,
    pub record_time: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            kind: ExperimentKind::SingleRun,
            c_total_bps_hz: vec![5.0, 10.0, 20.0, 30.0, 40.0, 50.0],
            modes: Mode::ALL.to_vec(),
            seeds: None,
            num_seeds: 10,
            out_dir: PathBuf::from("out"),
            record_time: false,
        }
    }
}

/// The `[scenario]` section: a scenario file, or generator keys plus a seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioSection {
    pub file: Option<PathBuf>,
    pub seed: u64,
    pub generator: GeneratorParams,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    pub scenario: ScenarioSection,
    pub algorithm: AlgorithmSection,
    pub experiment: ExperimentSection,
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut toml::Table, name: &str) -> Result<T> {
    match table.remove(name) {
        None => Ok(T::default()),
        Some(v) => v.try_into().map_err(|e| Error::Config(format!("[{name}]: {e}"))),
    }
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut sc = match root.remove("scenario") {
            None => toml::Table::new(),
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(Error::Config("[scenario] must be a table".into())),
        };
        let file = match sc.remove("file") {
            None => None,
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(Error::Config("scenario.file must be a string".into())),
        };
        let seed = match sc.remove("seed") {
            None => 0,
            Some(toml::Value::Integer(s)) if s >= 0 => s as u64,
            Some(_) => return Err(Error::Config("scenario.seed must be a non-negative integer".into())),
        };
        let generator: GeneratorParams = toml::Value::Table(sc)
            .try_into()
            .map_err(|e| Error::Config(format!("[scenario]: {e}")))?;
        let algorithm = section(&mut root, "algorithm")?;
        let experiment = section(&mut root, "experiment")?;
        if let Some(k) = root.keys().next() {
            return Err(Error::Config(format!("unknown section `{k}`")));
        }
        Ok(ConfigFile {
            scenario: ScenarioSection { file, seed, generator },
            algorithm,
            experiment,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        let err = |e: toml::ser::Error| Error::Config(e.to_string());
        let mut sc = toml::Table::try_from(&self.scenario.generator).map_err(err)?;
        if let Some(f) = &self.scenario.file {
            sc.insert("file".into(), toml::Value::String(f.display().to_string()));
        }
        sc.insert("seed".into(), toml::Value::Integer(self.scenario.seed as i64));
        let mut root = toml::Table::new();
        root.insert("scenario".into(), toml::Value::Table(sc));
        root.insert(
            "algorithm".into(),
            toml::Value::Table(toml::Table::try_from(&self.algorithm).map_err(err)?),
        );
        root.insert(
            "experiment".into(),
            toml::Value::Table(toml::Table::try_from(&self.experiment).map_err(err)?),
        );
        toml::to_string(&root).map_err(err)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub max_outer: Option<usize>,
    /// Generated scenarios at the larger reference scale.
    pub full: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    File(Scenario),
    Generated(GeneratorParams),
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub source: ScenarioSource,
    /// Scenario seed for single-scenario experiments.
    pub seed: u64,
    pub ao: AoConfig,
    pub c_totals: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    /// Resolves a config; relative scenario paths are taken from `base_dir`.
    pub fn resolve(cfg: &ConfigFile, overrides: &Overrides, base_dir: &Path) -> Result<Self> {
        let mut cfg = cfg.clone();
        if let Some(m) = overrides.mode {
            cfg.algorithm.mode = m;
        }
        if let Some(e) = overrides.epsilon {
            cfg.algorithm.epsilon_bps_hz = e;
        }
        if let Some(s) = overrides.seed {
            cfg.scenario.seed = s;
            cfg.algorithm.seed = None;
        }
        if let Some(m) = overrides.max_outer {
            cfg.algorithm.max_outer = m;
        }
        if let Some(d) = &overrides.out_dir {
            cfg.experiment.out_dir = d.clone();
        }
        if overrides.full {
            let p = GeneratorParams::reference_scale();
            let g = &mut cfg.scenario.generator;
            (g.num_ues, g.num_laps, g.c_total_bps_hz) = (p.num_ues, p.num_laps, p.c_total_bps_hz);
        }
        let source = match &cfg.scenario.file {
            Some(f) => {
                let path = if f.is_absolute() { f.clone() } else { base_dir.join(f) };
                ScenarioSource::File(read_scenario(&path)?)
            }
            None => ScenarioSource::Generated(cfg.scenario.generator.clone()),
        };
        let e = &cfg.experiment;
        if e.c_total_bps_hz.is_empty() || e.modes.is_empty() {
            return Err(Error::Config("sweep lists must be nonempty".into()));
        }
        if e.c_total_bps_hz.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("c_total_bps_hz entries must be finite and >= 0".into()));
        }
        let seeds = match &e.seeds {
            Some(s) if s.is_empty() => return Err(Error::Config("seeds must be nonempty".into())),
            Some(s) => s.clone(),
            None if e.num_seeds == 0 => return Err(Error::Config("num_seeds must be at least 1".into())),
            None => (0..e.num_seeds as u64).collect(),
        };
        let a = &cfg.algorithm;
        let ao = AoConfig {
            epsilon: a.epsilon_bps_hz,
            max_outer: a.max_outer,
            mode: a.mode,
            seed: a.seed.unwrap_or(cfg.scenario.seed),
            kmeans_iters: a.kmeans_iters,
            record_time: e.record_time,
            ..AoConfig::default()
        };
        if !(ao.epsilon > 0.0) || ao.max_outer == 0 {
            return Err(Error::Config("epsilon must be > 0 and max_outer >= 1".into()));
        }
        Ok(ExperimentSpec {
            kind: e.kind,
            source,
            seed: cfg.scenario.seed,
            ao,
            c_totals: e.c_total_bps_hz.clone(),
            modes: e.modes.clone(),
            seeds,
            out_dir: e.out_dir.clone(),
        })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::resolve(&ConfigFile::read(path)?, overrides, base)
    }

    /// The scenario for a seed. Files ignore the seed.
    pub fn scenario(&self, seed: u64) -> Result<Scenario> {
        match &self.source {
            ScenarioSource::File(s) => Ok(s.clone()),
            ScenarioSource::Generated(g) => g.generate(seed),
        }
    }

    pub fn ao_for(&self, mode: Mode, seed: u64) -> AoConfig {
        AoConfig { mode, seed, ..self.ao }
    }
}
