//! Experiment configuration: a line-oriented `key = value` file with `#`
//! comments. Every key has a default tuned to the desk-scale scenario, so an
//! empty file is a valid experiment.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

/// Estimation schemes the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Always-on protocol, optimized (or all-ones) steering.
    Proposed,
    /// Always-on protocol with a fresh random steering vector per trial.
    ProposedRandomSteering,
    /// Selected on-off baseline.
    OnOff,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::ProposedRandomSteering => "proposed_random_vartheta",
            Scheme::OnOff => "onoff",
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "proposed" => Ok(Scheme::Proposed),
            "proposed_random_vartheta" => Ok(Scheme::ProposedRandomSteering),
            "onoff" => Ok(Scheme::OnOff),
            other => Err(format!(
                "unknown scheme '{other}' (expected proposed, proposed_random_vartheta, onoff)"
            )),
        }
    }

    /// Stable tag mixed into per-trial seeds.
    pub fn seed_tag(&self) -> u64 {
        match self {
            Scheme::Proposed => 0x70726f70,
            Scheme::ProposedRandomSteering => 0x726e6476,
            Scheme::OnOff => 0x6f6e6f66,
        }
    }
}

/// Error raised while reading or validating a configuration.
#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    /// Parse failure with the 1-based line number.
    Parse { line: usize, message: String },
    /// A field failed validation.
    Invalid { field: &'static str, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse { line, message } => write!(f, "config line {line}: {message}"),
            ConfigError::Invalid { field, message } => {
                write!(f, "config field '{field}': {message}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Full experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub bs_antennas: usize,
    pub irs_elements: usize,
    pub users: usize,
    pub trials: usize,
    pub seed: u64,
    /// Transmit power sweep in dBm.
    pub power_dbm: Vec<f64>,
    pub noise_psd_dbm_hz: f64,
    pub bandwidth_hz: f64,
    /// Direct override of the noise power in mW; bypasses the PSD/bandwidth
    /// derivation (0 gives noiseless training).
    pub noise_var_mw: Option<f64>,
    pub schemes: Vec<Scheme>,
    /// Optimize the steering vector for the proposed scheme.
    pub phase_opt: bool,
    pub out: String,
    // Geometry preset and path-loss constants.
    pub bs_irs_distance_m: f64,
    pub user_distance_min_m: f64,
    pub user_distance_max_m: f64,
    pub pathloss_reflect_const_db: f64,
    pub pathloss_reflect_slope_db: f64,
    pub pathloss_direct_const_db: f64,
    pub pathloss_direct_slope_db: f64,
    pub penetration_db: f64,
    /// Amplitude reflection efficiency of the surface, folded into the
    /// BS-surface power gain.
    pub reflection_efficiency: f64,
    /// Surface rows when treated as a planar array (0 picks the largest
    /// divisor of N not exceeding sqrt(N); 1 degenerates to a line).
    pub irs_rows: usize,
    /// Peaked angular profiles (dominant arrival sectors); `uniform` flattens
    /// every link's spectrum.
    pub angular_profile_peaked: bool,
    /// Concentration of the BS-surface link around its arrival sector.
    pub bs_irs_decay: f64,
    /// Arrival-sector center of the BS-surface link as a fraction of the
    /// angular index range.
    pub bs_irs_center_frac: f64,
    /// Concentration of each surface-user link around its own sector
    /// (sectors are spread evenly across users).
    pub user_decay: f64,
    /// Concentration of the direct links at the BS side.
    pub direct_decay: f64,
    /// Full-rank threshold for the cascaded covariances.
    pub rank_tol: f64,
    /// Shrink the on-off baseline's relative channels toward zero using
    /// offline sample covariances (the stronger variant of the baseline);
    /// plain least squares otherwise.
    pub onoff_lmmse: bool,
    // Estimator knobs.
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bs_antennas: 4,
            irs_elements: 16,
            users: 4,
            trials: 200,
            seed: 1,
            power_dbm: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            noise_psd_dbm_hz: -170.0,
            bandwidth_hz: 200_000.0,
            noise_var_mw: None,
            schemes: vec![Scheme::Proposed, Scheme::OnOff],
            phase_opt: true,
            out: "results.csv".to_string(),
            bs_irs_distance_m: 10.0,
            user_distance_min_m: 2.0,
            user_distance_max_m: 7.0,
            pathloss_reflect_const_db: 40.0,
            pathloss_reflect_slope_db: 17.3,
            pathloss_direct_const_db: 30.0,
            pathloss_direct_slope_db: 31.9,
            penetration_db: 20.0,
            reflection_efficiency: 0.8,
            irs_rows: 0,
            angular_profile_peaked: true,
            bs_irs_decay: 1.5,
            bs_irs_center_frac: 0.6,
            user_decay: 0.4,
            direct_decay: 0.3,
            rank_tol: 1e-9,
            onoff_lmmse: true,
            max_iters: 20,
            tol: 1e-6,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("duplicate key '{key}'"),
                });
            }
            cfg.apply(key, value)
                .map_err(|message| ConfigError::Parse {
                    line: line_no,
                    message,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(value: &str, what: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("cannot parse '{value}' as {what}"))
        }
        match key {
            "m" => self.bs_antennas = num(value, "a positive integer")?,
            "n" => self.irs_elements = num(value, "a positive integer")?,
            "k" => self.users = num(value, "a positive integer")?,
            "trials" => self.trials = num(value, "a positive integer")?,
            "seed" => self.seed = num(value, "an unsigned integer")?,
            "power_dbm" => {
                self.power_dbm = value
                    .split(',')
                    .map(|v| num(v.trim(), "a number"))
                    .collect::<Result<_, _>>()?;
            }
            "noise_psd_dbm_hz" => self.noise_psd_dbm_hz = num(value, "a number")?,
            "bandwidth_hz" => self.bandwidth_hz = num(value, "a number")?,
            "noise_var_mw" => self.noise_var_mw = Some(num(value, "a number")?),
            "schemes" => {
                self.schemes = value
                    .split(',')
                    .map(|v| Scheme::parse(v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "phase_opt" => {
                self.phase_opt = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(format!("expected true or false, got '{other}'")),
                }
            }
            "out" => self.out = value.to_string(),
            "bs_irs_distance_m" => self.bs_irs_distance_m = num(value, "a number")?,
            "user_distance_min_m" => self.user_distance_min_m = num(value, "a number")?,
            "user_distance_max_m" => self.user_distance_max_m = num(value, "a number")?,
            "pathloss_reflect_const_db" => {
                self.pathloss_reflect_const_db = num(value, "a number")?
            }
            "pathloss_reflect_slope_db" => {
                self.pathloss_reflect_slope_db = num(value, "a number")?
            }
            "pathloss_direct_const_db" => self.pathloss_direct_const_db = num(value, "a number")?,
            "pathloss_direct_slope_db" => self.pathloss_direct_slope_db = num(value, "a number")?,
            "penetration_db" => self.penetration_db = num(value, "a number")?,
            "reflection_efficiency" => self.reflection_efficiency = num(value, "a number")?,
            "irs_rows" => self.irs_rows = num(value, "an integer")?,
            "angular_profile" => {
                self.angular_profile_peaked = match value {
                    "peaked" => true,
                    "uniform" => false,
                    other => {
                        return Err(format!("expected peaked or uniform, got '{other}'"))
                    }
                }
            }
            "bs_irs_decay" => self.bs_irs_decay = num(value, "a number")?,
            "bs_irs_center_frac" => self.bs_irs_center_frac = num(value, "a number")?,
            "user_decay" => self.user_decay = num(value, "a number")?,
            "direct_decay" => self.direct_decay = num(value, "a number")?,
            "rank_tol" => self.rank_tol = num(value, "a number")?,
            "onoff_lmmse" => {
                self.onoff_lmmse = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(format!("expected true or false, got '{other}'")),
                }
            }
            "max_iters" => self.max_iters = num(value, "a positive integer")?,
            "tol" => self.tol = num(value, "a number")?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        fn bad(field: &'static str, message: impl Into<String>) -> ConfigError {
            ConfigError::Invalid {
                field,
                message: message.into(),
            }
        }
        if self.bs_antennas == 0 {
            return Err(bad("m", "must be at least 1"));
        }
        if self.irs_elements == 0 {
            return Err(bad("n", "must be at least 1"));
        }
        if self.users == 0 {
            return Err(bad("k", "must be at least 1"));
        }
        if self.trials == 0 {
            return Err(bad("trials", "must be at least 1"));
        }
        if self.power_dbm.is_empty() {
            return Err(bad("power_dbm", "sweep must not be empty"));
        }
        if self.schemes.is_empty() {
            return Err(bad("schemes", "scheme list must not be empty"));
        }
        if let Some(v) = self.noise_var_mw {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad("noise_var_mw", "must be finite and >= 0"));
            }
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(bad("bandwidth_hz", "must be positive"));
        }
        for (field, v) in [
            ("bs_irs_distance_m", self.bs_irs_distance_m),
            ("user_distance_min_m", self.user_distance_min_m),
            ("user_distance_max_m", self.user_distance_max_m),
        ] {
            if !(v > 0.0) {
                return Err(bad(field, "must be positive"));
            }
        }
        if self.user_distance_max_m < self.user_distance_min_m {
            return Err(bad("user_distance_max_m", "must be >= user_distance_min_m"));
        }
        if !(self.reflection_efficiency > 0.0 && self.reflection_efficiency <= 1.0) {
            return Err(bad("reflection_efficiency", "must be in (0, 1]"));
        }
        if self.irs_rows != 0 && self.irs_elements % self.irs_rows != 0 {
            return Err(bad("irs_rows", "must divide n"));
        }
        if !(0.0..=1.0).contains(&self.bs_irs_center_frac) {
            return Err(bad("bs_irs_center_frac", "must be in [0, 1]"));
        }
        for (field, v) in [
            ("bs_irs_decay", self.bs_irs_decay),
            ("user_decay", self.user_decay),
            ("direct_decay", self.direct_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(bad(field, "must be finite and >= 0"));
            }
        }
        if !(self.rank_tol > 0.0) {
            return Err(bad("rank_tol", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(bad("max_iters", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(bad("tol", "must be positive"));
        }
        Ok(())
    }

    /// Noise power in mW, from the override or from PSD x bandwidth.
    pub fn noise_var_mw(&self) -> f64 {
        self.noise_var_mw.unwrap_or_else(|| {
            let dbm = self.noise_psd_dbm_hz + 10.0 * self.bandwidth_hz.log10();
            10f64.powf(dbm / 10.0)
        })
    }

    /// Surface-user distance of one user: evenly spaced over the configured
    /// range (midpoint for a single user).
    pub fn user_distance(&self, user: usize) -> f64 {
        let (lo, hi) = (self.user_distance_min_m, self.user_distance_max_m);
        if self.users == 1 {
            return 0.5 * (lo + hi);
        }
        lo + (hi - lo) * user as f64 / (self.users - 1) as f64
    }

    /// Row count of the planar surface: the configured value, or the largest
    /// divisor of N not exceeding sqrt(N).
    pub fn irs_rows_effective(&self) -> usize {
        if self.irs_rows != 0 {
            return self.irs_rows;
        }
        let n = self.irs_elements;
        (1..=n)
            .filter(|r| n % r == 0 && r * r <= n)
            .max()
            .unwrap_or(1)
    }

    /// Angular-sector center of the BS-surface link.
    pub fn bs_irs_center(&self) -> usize {
        ((self.irs_elements - 1) as f64 * self.bs_irs_center_frac).round() as usize
    }

    /// Angular-sector center of one user, spread evenly across the index
    /// range.
    pub fn user_sector_center(&self, user: usize) -> usize {
        let span = (self.irs_elements - 1) as f64;
        (span * (2 * user + 1) as f64 / (2 * self.users) as f64).round() as usize
    }
}

/// dBm to linear mW.
pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}
