use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CcivError, Result};
use crate::wald::Weighting;

/// How the low-dimensional instrument is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LowDimMode {
    /// Row mean of the many instruments.
    #[default]
    Mean,
    /// The true first-stage signal, after adding an extra instrument `s` with
    /// coefficient `κ = √(ψ_z √K / n)` to the regressor.
    Injected,
}

impl std::str::FromStr for LowDimMode {
    type Err = CcivError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LowDimMode::Mean),
            "injected" => Ok(LowDimMode::Injected),
            other => Err(CcivError::InvalidInput(format!("unknown lowdim_mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LowDimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LowDimMode::Mean => "mean",
            LowDimMode::Injected => "injected",
        })
    }
}

/// Every knob of the panel IV simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct DGPConfig {
    pub n: usize,
    pub clusters: usize,
    /// `K`, the number of many instruments.
    pub num_many_iv: usize,
    /// `d_w`
    pub num_controls: usize,
    /// Geometric decay of the first-stage coefficients.
    pub phi: f64,
    /// Strength of the many instruments.
    pub psi: f64,
    /// Endogeneity.
    pub rho: f64,
    /// Within-cluster equicorrelation of each instrument column.
    pub theta1: f64,
    /// Decay of the within-cluster error filter.
    pub theta2: f64,
    pub beta_true: f64,
    /// Exponent of the cluster-size allocation.
    pub gamma_dmn: f64,
    pub beta0_grid: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub alpha_level: f64,
    pub weighting: Weighting,
    pub lowdim_mode: LowDimMode,
    /// `ψ_z` for [`LowDimMode::Injected`].
    pub lowdim_strength: f64,
    /// Share one cluster shock `v` between both error equations. Off draws
    /// separate shocks, which makes the errors independent when `ρ = 0`.
    pub common_shock: bool,
    /// `σ = √((0.2 + (Wᵀδ)²)/2.4)`; off uses its mean value `√0.5`.
    pub heteroskedastic: bool,
}

/// Offsets of the default nine-point grid, in units of `step`.
pub const GRID_OFFSETS: [f64; 9] = [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0];

pub fn centered_grid(center: f64, step: f64) -> Vec<f64> {
    GRID_OFFSETS.iter().map(|k| center + k * step).collect()
}

impl Default for DGPConfig {
    /// The full-scale design with `K = 100`, `φ = 1`, `ψ = 30`.
    fn default() -> Self {
        Self {
            n: 2000,
            clusters: 500,
            num_many_iv: 100,
            num_controls: 10,
            phi: 1.0,
            psi: 30.0,
            rho: 0.5,
            theta1: 0.5,
            theta2: 0.7,
            beta_true: 0.3,
            gamma_dmn: 2.0,
            beta0_grid: centered_grid(0.3, 0.025),
            replications: 1000,
            seed: 20_240_601,
            alpha_level: 0.05,
            weighting: Weighting::Tsls,
            lowdim_mode: LowDimMode::Mean,
            lowdim_strength: 0.0,
            common_shock: true,
            heteroskedastic: true,
        }
    }
}

/// Names accepted by [`DGPConfig::preset`].
pub const PRESETS: &[&str] = &[
    "paper-fig1",
    "paper-fig2",
    "paper-fig3",
    "paper-fig4",
    "paper-fig5",
    "paper-fig6",
    "paper-fig7",
    "paper-fig8",
    "paper-fig9",
    "paper-fig1-desk",
    "paper-fig2-desk",
    "paper-fig3-desk",
    "paper-fig4-desk",
    "paper-fig5-desk",
    "paper-fig6-desk",
    "paper-fig7-desk",
    "paper-fig8-desk",
    "paper-fig9-desk",
    "weak-many-desk",
];

/// `(K, φ, ψ)` of the nine reference designs at full scale.
const DESIGNS: [(usize, f64, f64); 9] = [
    (100, 0.0, 30.0),
    (100, 0.95, 30.0),
    (100, 1.0, 30.0),
    (500, 0.0, 30.0),
    (500, 0.95, 30.0),
    (500, 1.0, 30.0),
    (500, 1.0, 20.0),
    (500, 1.0, 10.0),
    (500, 1.0, 5.0),
];

impl DGPConfig {
    /// Small design that runs a full power curve in minutes on one core:
    /// `n = 400`, `G = 100`, `K = 40`, `d_w = 5`, 1000 replications.
    pub fn desk() -> Self {
        Self {
            n: 400,
            clusters: 100,
            num_many_iv: 40,
            num_controls: 5,
            beta0_grid: centered_grid(0.3, 0.05),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        if name == "weak-many-desk" {
            return Ok(Self {
                psi: 1.0,
                lowdim_mode: LowDimMode::Injected,
                lowdim_strength: 30.0,
                ..Self::desk()
            });
        }
        let unknown = || CcivError::InvalidInput(format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")));
        let rest = name.strip_prefix("paper-fig").ok_or_else(unknown)?;
        let (num, desk) = match rest.strip_suffix("-desk") {
            Some(num) => (num, true),
            None => (rest, false),
        };
        let idx: usize = num.parse().map_err(|_| unknown())?;
        if !(1..=9).contains(&idx) {
            return Err(unknown());
        }
        let (k, phi, psi) = DESIGNS[idx - 1];
        Ok(if desk {
            // Designs 4-6 use K = 100 at desk scale, the others K = 40.
            let k = if (4..=6).contains(&idx) { 100 } else { 40 };
            Self {
                num_many_iv: k,
                phi,
                psi,
                ..Self::desk()
            }
        } else {
            Self {
                num_many_iv: k,
                phi,
                psi,
                ..Self::default()
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CcivError::InvalidInput(msg));
        if self.n == 0 || self.clusters == 0 || self.clusters > self.n {
            return bad(format!("need 1 <= clusters <= n, got G = {}, n = {}", self.clusters, self.n));
        }
        if self.num_many_iv == 0 || self.num_many_iv >= self.n {
            return bad(format!("need 1 <= K < n, got K = {}", self.num_many_iv));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return bad(format!("phi must lie in [0, 1], got {}", self.phi));
        }
        if !(self.psi > 0.0 && self.psi.is_finite()) {
            return bad(format!("psi must be positive, got {}", self.psi));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (-1, 1), got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.theta1) {
            return bad(format!("theta1 must lie in [0, 1], got {}", self.theta1));
        }
        if !self.theta2.is_finite() || !self.beta_true.is_finite() || !self.gamma_dmn.is_finite() {
            return bad("theta2, beta_true and gamma_dmn must be finite".into());
        }
        if self.beta0_grid.is_empty() || self.beta0_grid.iter().any(|b| !b.is_finite()) {
            return bad("beta0_grid must be a nonempty list of finite values".into());
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return bad(format!("alpha_level must lie in (0, 1), got {}", self.alpha_level));
        }
        if self.lowdim_mode == LowDimMode::Injected && !(self.lowdim_strength > 0.0) {
            return bad("injected low-dimensional instrument needs lowdim_strength > 0".into());
        }
        Ok(())
    }

    /// Sets one field from its `key = value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| CcivError::InvalidInput(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "n" => self.n = num(key, value)?,
            "clusters" | "G" => self.clusters = num(key, value)?,
            "num_many_iv" | "K" => self.num_many_iv = num(key, value)?,
            "num_controls" | "d_w" => self.num_controls = num(key, value)?,
            "phi" => self.phi = num(key, value)?,
            "psi" => self.psi = num(key, value)?,
            "rho" => self.rho = num(key, value)?,
            "theta1" => self.theta1 = num(key, value)?,
            "theta2" => self.theta2 = num(key, value)?,
            "beta_true" => self.beta_true = num(key, value)?,
            "gamma_dmn" => self.gamma_dmn = num(key, value)?,
            "beta0_grid" => {
                self.beta0_grid = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "replications" => self.replications = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "alpha_level" => self.alpha_level = num(key, value)?,
            "weighting" => self.weighting = value.parse()?,
            "lowdim_mode" => self.lowdim_mode = value.parse()?,
            "lowdim_strength" => self.lowdim_strength = num(key, value)?,
            "common_shock" => self.common_shock = num(key, value)?,
            "heteroskedastic" => self.heteroskedastic = num(key, value)?,
            other => return Err(CcivError::InvalidInput(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses the `key = value` format. Blank lines and `#` comments are
    /// skipped; a `preset = name` line resets every field to that preset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CcivError::InvalidInput(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                config = Self::preset(value)?;
            } else {
                config
                    .set(key, value)
                    .map_err(|e| CcivError::InvalidInput(format!("line {}: {e}", lineno + 1)))?;
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The `key = value` form read by [`DGPConfig::parse`].
    pub fn to_config_string(&self) -> String {
        let grid: Vec<String> = self.beta0_grid.iter().map(f64::to_string).collect();
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        line("n", self.n.to_string());
        line("clusters", self.clusters.to_string());
        line("num_many_iv", self.num_many_iv.to_string());
        line("num_controls", self.num_controls.to_string());
        line("phi", self.phi.to_string());
        line("psi", self.psi.to_string());
        line("rho", self.rho.to_string());
        line("theta1", self.theta1.to_string());
        line("theta2", self.theta2.to_string());
        line("beta_true", self.beta_true.to_string());
        line("gamma_dmn", self.gamma_dmn.to_string());
        line("beta0_grid", grid.join(", "));
        line("replications", self.replications.to_string());
        line("seed", self.seed.to_string());
        line("alpha_level", self.alpha_level.to_string());
        line("weighting", self.weighting.to_string());
        line("lowdim_mode", self.lowdim_mode.to_string());
        line("lowdim_strength", self.lowdim_strength.to_string());
        line("common_shock", self.common_shock.to_string());
        line("heteroskedastic", self.heteroskedastic.to_string());
        s
    }
}
