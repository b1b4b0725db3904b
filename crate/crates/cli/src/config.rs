use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sticky_core::reflect::SimConfig;
use sticky_core::ModelSpec64;

use crate::error::CliError;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub sigma: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub burn_in: f64,
    pub seed: u64,
    pub replicas: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<Vec<f64>>,
    /// Spacing of the sticky-clock sample grid.
    #[serde(default = "default_sticky_dt")]
    pub sticky_dt: f64,
}

fn default_sticky_dt() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarSection {
    pub theta_grid: Vec<Vec<f64>>,
    /// Use the product-form MGFs instead of simulation.
    #[serde(default)]
    pub closed_form: bool,
    #[serde(default = "default_bar_tol")]
    pub tolerance: f64,
}

fn default_bar_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailsSection {
    #[serde(default = "default_window")]
    pub window: (f64, f64),
    /// 0-based coordinate pairs; all pairs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default = "default_block")]
    pub gumbel_block: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max: Option<f64>,
}

fn default_window() -> (f64, f64) {
    (0.90, 0.999)
}

fn default_levels() -> Vec<f64> {
    vec![0.9, 0.95, 0.99]
}

fn default_block() -> usize {
    100
}

impl Default for TailsSection {
    fn default() -> Self {
        Self {
            window: default_window(),
            pairs: None,
            levels: default_levels(),
            gumbel_block: default_block(),
            alpha_range: None,
            ratio_range: None,
            lambda_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpSection {
    pub targets: Vec<Vec<f64>>,
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    /// Reference values, one per target, checked at `rel_tolerance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<Vec<f64>>,
    #[serde(default = "default_ldp_tol")]
    pub rel_tolerance: f64,
}

fn default_segments() -> usize {
    32
}

fn default_restarts() -> usize {
    8
}

fn default_ldp_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_grid: Option<Vec<Vec<f64>>>,
    /// Absolute tolerance on boundary and interior masses.
    #[serde(default = "default_mass_tol")]
    pub mass_tolerance: f64,
}

fn default_mass_tol() -> f64 {
    0.02
}

impl Default for StationarySection {
    fn default() -> Self {
        Self {
            z_grid: None,
            mass_tolerance: default_mass_tol(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Analyses {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bar: Option<BarSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tails: Option<TailsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ldp: Option<LdpSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationary: Option<StationarySection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSection>,
    #[serde(default)]
    pub analyses: Analyses,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

fn bad(path: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_string(),
        message: msg.into(),
    }
}

fn check_square(path: &str, m: &[Vec<f64>], d: usize) -> Result<(), CliError> {
    if m.len() != d || m.iter().any(|r| r.len() != d) {
        return Err(bad(path, format!("expected a {d}x{d} matrix")));
    }
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return Err(bad(path, "entries must be finite"));
    }
    Ok(())
}

fn check_len(path: &str, v: &[f64], d: usize) -> Result<(), CliError> {
    if v.len() != d {
        return Err(bad(
            path,
            format!("expected {d} entries, found {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad(path, "entries must be finite"));
    }
    Ok(())
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        let d = m.d;
        if d == 0 {
            return Err(bad("model.d", "dimension must be positive"));
        }
        check_square("model.sigma", &m.sigma, d)?;
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (m.sigma[i][j], m.sigma[j][i]);
                if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                    return Err(bad(
                        "model.sigma",
                        format!("not symmetric at ({i},{j}): {a} vs {b}"),
                    ));
                }
            }
        }
        check_len("model.mu", &m.mu, d)?;
        check_square("model.R", &m.r, d)?;
        check_len("model.u", &m.u, d)?;
        if m.u.iter().any(|&u| u < 0.0) {
            return Err(bad("model.u", "stickiness must be non-negative"));
        }
        self.model_spec()?;

        if let Some(sim) = &self.sim {
            if sim.replicas == 0 {
                return Err(bad("sim.replicas", "must be at least 1"));
            }
            if !(sim.dt > 0.0 && sim.dt.is_finite()) {
                return Err(bad("sim.dt", "must be positive"));
            }
            if !(sim.horizon > sim.dt && sim.horizon.is_finite()) {
                return Err(bad("sim.horizon", "must exceed dt"));
            }
            if !(sim.burn_in >= 0.0 && sim.burn_in < sim.horizon) {
                return Err(bad("sim.burn_in", "must lie in [0, horizon)"));
            }
            if !(sim.sticky_dt > 0.0 && sim.sticky_dt.is_finite()) {
                return Err(bad("sim.sticky_dt", "must be positive"));
            }
            if let Some(z0) = &sim.z0 {
                check_len("sim.z0", z0, d)?;
                if z0.iter().any(|&z| z < 0.0) {
                    return Err(bad("sim.z0", "must lie in the orthant"));
                }
            }
        }

        let a = &self.analyses;
        if let Some(bar) = &a.bar {
            if bar.theta_grid.is_empty() {
                return Err(bad("analyses.bar.theta_grid", "must not be empty"));
            }
            for th in &bar.theta_grid {
                check_len("analyses.bar.theta_grid", th, d)?;
                if th.iter().any(|&t| t > 0.0) {
                    return Err(bad(
                        "analyses.bar.theta_grid",
                        "entries must be non-positive",
                    ));
                }
            }
        }
        if let Some(t) = &a.tails {
            let (lo, hi) = t.window;
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return Err(bad("analyses.tails.window", "need 0 < lo < hi < 1"));
            }
            if let Some(pairs) = &t.pairs {
                if pairs.iter().any(|&(i, j)| i >= d || j >= d || i == j) {
                    return Err(bad(
                        "analyses.tails.pairs",
                        format!("pairs must be distinct coordinates below {d}"),
                    ));
                }
            }
            if t.levels.iter().any(|&l| !(0.0 < l && l < 1.0)) {
                return Err(bad("analyses.tails.levels", "levels must lie in (0, 1)"));
            }
            if t.gumbel_block < 2 {
                return Err(bad("analyses.tails.gumbel_block", "must be at least 2"));
            }
        }
        if let Some(l) = &a.ldp {
            for x in &l.targets {
                check_len("analyses.ldp.targets", x, d)?;
                if x.iter().any(|&v| v < 0.0) {
                    return Err(bad(
                        "analyses.ldp.targets",
                        "targets must lie in the orthant",
                    ));
                }
            }
            if l.segments < 2 {
                return Err(bad("analyses.ldp.segments", "must be at least 2"));
            }
            if l.restarts == 0 {
                return Err(bad("analyses.ldp.restarts", "must be at least 1"));
            }
            if let Some(e) = &l.expected {
                if e.len() != l.targets.len() {
                    return Err(bad("analyses.ldp.expected", "needs one value per target"));
                }
            }
        }
        if let Some(s) = &a.stationary {
            if let Some(grid) = &s.z_grid {
                for z in grid {
                    check_len("analyses.stationary.z_grid", z, d)?;
                }
            }
        }
        if self.needs_simulation() && self.sim.is_none() {
            return Err(bad("sim", "the requested analyses need a sim section"));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec64, CliError> {
        let m = &self.model;
        ModelSpec64::from_f64(&m.sigma, &m.mu, &m.r, &m.u).map_err(|e| bad("model", e.to_string()))
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let s = self
            .sim
            .as_ref()
            .ok_or_else(|| bad("sim", "missing sim section"))?;
        Ok(SimConfig {
            dt: s.dt,
            horizon: s.horizon,
            seed: s.seed,
            replicas: s.replicas,
            z0: s.z0.clone().unwrap_or_else(|| vec![0.0; self.model.d]),
            burn_in: s.burn_in,
        })
    }

    pub fn needs_simulation(&self) -> bool {
        let a = &self.analyses;
        a.stationary.is_some()
            || a.tails.is_some()
            || a.bar.as_ref().is_some_and(|b| !b.closed_form)
    }

    /// Applies command-line overrides and revalidates.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        replicas: Option<usize>,
    ) -> Result<Self, CliError> {
        if seed.is_some() || replicas.is_some() {
            let sim = self
                .sim
                .as_mut()
                .ok_or_else(|| bad("sim", "--seed/--replicas need a sim section"))?;
            if let Some(s) = seed {
                sim.seed = s;
            }
            if let Some(r) = replicas {
                sim.replicas = r;
            }
        }
        self.validate()?;
        Ok(self)
    }
}
