//! Experiment configuration: a TOML file, command-line overrides, and range
//! validation performed before any computation starts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable that overrides the cache directory.
pub const CACHE_ENV: &str = "BEREZIN_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("unknown command `{0}`")]
    UnknownCommand(String),
}

/// Experiments the runner knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    KernelCheck,
    Trace,
    ToeplitzIdentities,
    CuspAction,
    Poincare,
    Density,
    FullSuite,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Self::KernelCheck,
        Self::Trace,
        Self::ToeplitzIdentities,
        Self::CuspAction,
        Self::Poincare,
        Self::Density,
        Self::FullSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::KernelCheck => "kernel-check",
            Self::Trace => "trace",
            Self::ToeplitzIdentities => "toeplitz-identities",
            Self::CuspAction => "cusp-action",
            Self::Poincare => "poincare",
            Self::Density => "density",
            Self::FullSuite => "full-suite",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| ConfigError::UnknownCommand(s.to_string()))
    }

    /// Acceptance criteria covered by the command, in run order.
    pub fn criteria(self) -> &'static [u32] {
        match self {
            Self::KernelCheck => &[1, 2, 3],
            Self::Trace => &[5, 6],
            Self::ToeplitzIdentities => &[8, 9],
            Self::CuspAction => &[4, 7],
            Self::Poincare => &[10],
            Self::Density => &[11],
            Self::FullSuite => &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub emit_svg: bool,
    pub cache: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("berezin-out"), emit_svg: false, cache: None }
    }
}

/// All parameters of a run. Defaults reproduce the acceptance settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Default command when none is given on the command line.
    pub command: Option<Command>,
    pub seed: u64,
    /// Fundamental-domain quadrature level.
    pub level: usize,
    /// Working truncation N.
    pub truncation: usize,
    /// Truncation ladder for convergence checks.
    pub ladder: Vec<usize>,
    /// Base weight m of H_m.
    pub m: u32,
    /// Cusp-form weight p of the intertwiners.
    pub p: u32,
    /// Block weights of the matrix-valued checks.
    pub block: Vec<u32>,
    /// Γ-height of the operator B sum.
    pub height: i64,
    /// Γ-height of the Poincaré series.
    pub poincare_height: i64,
    /// Order M of the q-expansions.
    pub depth: usize,
    /// Dictionary weights of the density experiment.
    pub dictionary: Vec<u32>,
    pub output: OutputConfig,
    /// Tolerance overrides keyed by check name.
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 20_240_601,
            level: 6,
            truncation: 60,
            ladder: vec![40, 60, 80],
            m: 4,
            p: 12,
            block: vec![4, 16],
            height: 30,
            poincare_height: 16,
            depth: 200,
            dictionary: vec![12, 16, 18, 20, 22, 24],
            output: OutputConfig::default(),
            tolerances: BTreeMap::new(),
        }
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub level: Option<usize>,
    pub truncation: Option<usize>,
    pub ladder: Option<Vec<usize>>,
    pub emit_svg: bool,
    pub seed: Option<u64>,
    pub cache: Option<PathBuf>,
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, message: message.into() }
}

fn in_range<T: PartialOrd + fmt::Display + Copy>(field: &'static str, v: T, lo: T, hi: T) -> Result<(), ConfigError> {
    if v < lo || v > hi {
        return Err(invalid(field, format!("{v} is outside [{lo}, {hi}]")));
    }
    Ok(())
}

/// Weights k with a nonzero cusp space S_k.
fn has_cusp_forms(k: u32) -> bool {
    k >= 12 && k % 2 == 0 && k != 14
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
        if let Some(v) = o.level {
            self.level = v;
        }
        if let Some(v) = o.truncation {
            self.truncation = v;
        }
        if let Some(v) = &o.ladder {
            self.ladder = v.clone();
        }
        if o.emit_svg {
            self.output.emit_svg = true;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.cache {
            self.output.cache = Some(v.clone());
        }
    }

    /// Applies the cache-directory environment override, if set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            self.output.cache = Some(PathBuf::from(dir));
        }
    }

    /// The rule cache directory, `<output dir>/cache` unless configured.
    pub fn cache_dir(&self) -> PathBuf {
        self.output.cache.clone().unwrap_or_else(|| self.output.dir.join("cache"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        in_range("level", self.level, 1, 10)?;
        in_range("truncation", self.truncation, 10, 200)?;
        if self.ladder.len() < 2 || self.ladder.len() > 6 {
            return Err(invalid("ladder", "needs between 2 and 6 truncations"));
        }
        for &n in &self.ladder {
            in_range("ladder", n, 10, 200)?;
        }
        if self.ladder.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("ladder", "must be strictly increasing"));
        }
        in_range("m", self.m, 2, 32)?;
        if !has_cusp_forms(self.p) || self.p > 40 {
            return Err(invalid("p", format!("{} is not a weight in 12..=40 with cusp forms", self.p)));
        }
        if self.block.is_empty() || self.block.len() > 4 {
            return Err(invalid("block", "needs between 1 and 4 weights"));
        }
        for &w in &self.block {
            in_range("block", w, 2, 64)?;
        }
        in_range("height", self.height, 1, 64)?;
        in_range("poincare_height", self.poincare_height, 4, 40)?;
        in_range("depth", self.depth, 40, 400)?;
        if self.dictionary.is_empty() {
            return Err(invalid("dictionary", "is empty"));
        }
        for &k in &self.dictionary {
            if !has_cusp_forms(k) || k > 40 {
                return Err(invalid("dictionary", format!("{k} is not a weight in 12..=40 with cusp forms")));
            }
        }
        if self.dictionary.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("dictionary", "must be strictly increasing"));
        }
        for (name, &tol) in &self.tolerances {
            if !crate::suite::TOLERANCE_NAMES.contains(&name.as_str()) {
                return Err(invalid("tolerances", format!("unknown check `{name}`")));
            }
            if !(tol.is_finite() && tol > 0.0) {
                return Err(invalid("tolerances", format!("`{name}` must be positive and finite")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML of the fields that affect results.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.command = None;
        canon.output = OutputConfig::default();
        hex::encode(Sha256::digest(canon.to_toml().as_bytes()))
    }

    pub fn tolerance(&self, name: &str, default: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn shipped_default_file_matches_the_defaults() {
        let c = ExperimentConfig::from_toml(include_str!("../../../configs/default.toml")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ExperimentConfig::from_toml("truncation = 40\n[output]\nemit_svg = true\n").unwrap();
        assert_eq!(c.truncation, 40);
        assert!(c.output.emit_svg);
        assert_eq!(c.ladder, vec![40, 60, 80]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("truncaton = 40"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn ranges_are_enforced() {
        let bad = [
            "level = 0",
            "truncation = 5",
            "ladder = [40]",
            "ladder = [60, 40]",
            "p = 14",
            "block = []",
            "dictionary = [12, 10]",
            "[tolerances]\nnope = 1.0",
            "[tolerances]\n\"trace.tau_identity\" = -1.0",
        ];
        for text in bad {
            let c = ExperimentConfig::from_toml(text).unwrap();
            assert!(matches!(c.validate(), Err(ConfigError::Invalid { .. })), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_paths_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        b.command = Some(Command::Trace);
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::default();
        c.apply(&Overrides { level: Some(3), ladder: Some(vec![20, 30]), emit_svg: true, ..Default::default() });
        assert_eq!((c.level, c.ladder.clone(), c.output.emit_svg), (3, vec![20, 30], true));
    }

    #[test]
    fn commands_parse_by_name() {
        for c in Command::ALL {
            assert_eq!(Command::parse(c.name()).unwrap(), c);
        }
        assert!(Command::parse("nope").is_err());
    }
}
