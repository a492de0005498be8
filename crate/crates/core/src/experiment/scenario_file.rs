//! Scenario files and the seeded scenario generator.

use std::f64::consts::FRAC_PI_4;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Point3, Scenario, UavKind, UavParams, XyBox};

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

fn one_of(what: &str, a: Option<f64>, b: Option<f64>, conv: fn(f64) -> f64) -> Result<f64> {
    match (a, b) {
        (Some(v), None) => Ok(v),
        (None, Some(v)) => Ok(conv(v)),
        _ => Err(Error::Config(format!("exactly one of the {what} keys must be given"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavEntry {
    /// `hap` or `lap`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_linear: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_db: Option<f64>,
    pub p_max_w: f64,
    pub coverage_angle_rad: f64,
    pub z_min_m: f64,
    pub z_max_m: f64,
    pub x_min_m: f64,
    pub x_max_m: f64,
    pub y_min_m: f64,
    pub y_max_m: f64,
    pub fronthaul_bps_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UeEntry {
    pub x_m: f64,
    pub y_m: f64,
    #[serde(default)]
    pub z_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_power_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_power_dbm: Option<f64>,
    pub rate_threshold_bps_hz: f64,
}

/// On-disk scenario. Either unit of a dual-unit quantity is accepted on
/// input; output always uses the linear one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub d_min_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_total_bps_hz: Option<f64>,
    pub uav: Vec<UavEntry>,
    pub ue: Vec<UeEntry>,
}

impl ScenarioFile {
    pub fn from_scenario(s: &Scenario) -> Self {
        let uav = s
            .uavs
            .iter()
            .map(|u| UavEntry {
                kind: match u.kind {
                    UavKind::Hap => "hap".into(),
                    UavKind::Lap(_) => "lap".into(),
                },
                beta_linear: Some(u.beta),
                beta_db: None,
                p_max_w: u.p_max,
                coverage_angle_rad: u.coverage_angle,
                z_min_m: u.z_min,
                z_max_m: u.z_max,
                x_min_m: u.xy_box.x_min,
                x_max_m: u.xy_box.x_max,
                y_min_m: u.xy_box.y_min,
                y_max_m: u.xy_box.y_max,
                fronthaul_bps_hz: u.fronthaul_capacity,
            })
            .collect();
        let ue = s
            .ue_positions
            .iter()
            .zip(&s.noise_power)
            .zip(&s.rate_threshold)
            .map(|((p, &n), &r)| UeEntry {
                x_m: p.x(),
                y_m: p.y(),
                z_m: p.z(),
                noise_power_w: Some(n),
                noise_power_dbm: None,
                rate_threshold_bps_hz: r,
            })
            .collect();
        ScenarioFile {
            d_min_m: s.d_min,
            c_total_bps_hz: s.total_fronthaul,
            uav,
            ue,
        }
    }

    pub fn to_scenario(&self) -> Result<Scenario> {
        let mut uavs = Vec::with_capacity(self.uav.len());
        for (i, u) in self.uav.iter().enumerate() {
            let kind = match u.kind.as_str() {
                "hap" => UavKind::Hap,
                "lap" => UavKind::Lap(i),
                other => return Err(Error::Config(format!("uav {i}: unknown kind `{other}`"))),
            };
            uavs.push(UavParams {
                kind,
                beta: one_of("beta_linear/beta_db", u.beta_linear, u.beta_db, db_to_linear)?,
                p_max: u.p_max_w,
                coverage_angle: u.coverage_angle_rad,
                z_min: u.z_min_m,
                z_max: u.z_max_m,
                xy_box: XyBox {
                    x_min: u.x_min_m,
                    x_max: u.x_max_m,
                    y_min: u.y_min_m,
                    y_max: u.y_max_m,
                },
                fronthaul_capacity: u.fronthaul_bps_hz,
            });
        }
        let mut noise = Vec::with_capacity(self.ue.len());
        for u in &self.ue {
            noise.push(one_of(
                "noise_power_w/noise_power_dbm",
                u.noise_power_w,
                u.noise_power_dbm,
                dbm_to_watts,
            )?);
        }
        Scenario {
            uavs,
            ue_positions: self.ue.iter().map(|u| Point3::new(u.x_m, u.y_m, u.z_m)).collect(),
            noise_power: noise,
            rate_threshold: self.ue.iter().map(|u| u.rate_threshold_bps_hz).collect(),
            d_min: self.d_min_m,
            total_fronthaul: self.c_total_bps_hz,
        }
        .validated()
    }
}

pub fn scenario_to_toml(s: &Scenario) -> Result<String> {
    toml::to_string(&ScenarioFile::from_scenario(s)).map_err(|e| Error::Config(e.to_string()))
}

pub fn scenario_from_toml(text: &str) -> Result<Scenario> {
    let f: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    f.to_scenario()
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    scenario_from_toml(&std::fs::read_to_string(path)?)
}

pub fn write_scenario(path: &Path, s: &Scenario) -> Result<()> {
    std::fs::write(path, scenario_to_toml(s)?)?;
    Ok(())
}

/// Generator inputs. Defaults are the simulation parameters of the reference
/// setup at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub num_ues: usize,
    pub num_laps: usize,
    pub area_m: f64,
    pub c_total_bps_hz: f64,
    pub beta_hap_db: f64,
    pub beta_lap_db: f64,
    pub p_max_hap_w: f64,
    pub p_max_lap_w: f64,
    pub coverage_angle_rad: f64,
    pub hap_z_min_m: f64,
    pub hap_z_max_m: f64,
    pub lap_z_min_m: f64,
    pub lap_z_max_m: f64,
    pub d_min_m: f64,
    pub noise_power_w: f64,
    pub rate_threshold_bps_hz: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            num_ues: 6,
            num_laps: 2,
            area_m: 10_000.0,
            c_total_bps_hz: 40.0,
            beta_hap_db: -10.0,
            beta_lap_db: -20.0,
            p_max_hap_w: 10.0,
            p_max_lap_w: 0.5,
            coverage_angle_rad: FRAC_PI_4,
            hap_z_min_m: 17_000.0,
            hap_z_max_m: 22_000.0,
            lap_z_min_m: 2000.0,
            lap_z_max_m: 3000.0,
            d_min_m: 2000.0,
            noise_power_w: 1e-13,
            rate_threshold_bps_hz: 0.1,
        }
    }
}

impl GeneratorParams {
    /// The larger reference configuration: ten UEs, four LAPs, C_T = 50.
    pub fn reference_scale() -> Self {
        GeneratorParams {
            num_ues: 10,
            num_laps: 4,
            c_total_bps_hz: 50.0,
            ..Self::default()
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Scenario> {
        if self.num_ues == 0 {
            return Err(Error::Config("num_ues must be at least 1".into()));
        }
        if !(self.area_m > 0.0) {
            return Err(Error::Config("area_m must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ue_positions = (0..self.num_ues)
            .map(|_| {
                let x = rng.random_range(0.0..=self.area_m);
                let y = rng.random_range(0.0..=self.area_m);
                Point3::new(x, y, 0.0)
            })
            .collect();
        let area = XyBox::square(self.area_m);
        let mk = |kind, beta_db: f64, p_max, z: (f64, f64)| UavParams {
            kind,
            beta: db_to_linear(beta_db),
            p_max,
            coverage_angle: self.coverage_angle_rad,
            z_min: z.0,
            z_max: z.1,
            xy_box: area,
            fronthaul_capacity: 0.0,
        };
        let mut uavs = vec![mk(
            UavKind::Hap,
            self.beta_hap_db,
            self.p_max_hap_w,
            (self.hap_z_min_m, self.hap_z_max_m),
        )];
        for l in 1..=self.num_laps {
            uavs.push(mk(
                UavKind::Lap(l),
                self.beta_lap_db,
                self.p_max_lap_w,
                (self.lap_z_min_m, self.lap_z_max_m),
            ));
        }
        Scenario {
            uavs,
            ue_positions,
            noise_power: vec![self.noise_power_w; self.num_ues],
            rate_threshold: vec![self.rate_threshold_bps_hz; self.num_ues],
            d_min: self.d_min_m,
            total_fronthaul: None,
        }
        .with_total_fronthaul(self.c_total_bps_hz)
        .validated()
    }
}

/// Desk-scale scenario with `k` UEs and `l` LAPs under the default budget.
pub fn generate_scenario(k: usize, l: usize, seed: u64) -> Result<Scenario> {
    GeneratorParams {
        num_ues: k,
        num_laps: l,
        ..GeneratorParams::default()
    }
    .generate(seed)
}
