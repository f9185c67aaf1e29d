//! The experiment config file: flat `key = value` lines grouped under
//! `[harness]`, `[probe]` and `[experiment]` sections. `#` and `;` start
//! comment lines; there are no trailing comments. Every key has a
//! command-line flag of the same name.
//!
//! ```text
//! [harness]
//! # program and arguments, shell-quoted
//! command = ./run-tests --verbose
//! list-args = --list
//! working-dir = .
//! # seconds per harness process
//! timeout = 300
//! # repeatable
//! env = RUST_LOG=warn
//!
//! [probe]
//! # rapl | simulated
//! backend = simulated
//! scenario = scenario.txt
//! powercap-root = /sys/class/powercap
//! update-interval-ns = 1000000
//!
//! [experiment]
//! # real | virtual
//! clock = real
//! # probe polls per second
//! rate = 100
//! iterations = 5
//! # empty: all discovered tests
//! select = suite::a, suite::b
//! # default: git HEAD
//! revision = abc123
//! # off | calibrate:<secs> | fixed:<path>
//! baseline = off
//! data-dir = .manai
//! ```

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::experiment::{BaselineMode, ClockMode, ExperimentConfig};
use crate::harness::{HarnessCommand, TestId};
use crate::probe::{ProbeSelection, DEFAULT_POWERCAP_ROOT, DEFAULT_RAPL_UPDATE_INTERVAL_NS};
use crate::sampler::BaselineProfile;

pub const DEFAULT_RATE_HZ: f64 = 100.0;
pub const DEFAULT_ITERATIONS: u32 = 5;
pub const DEFAULT_LIST_ARGS: &str = "--list";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Syntax { path: String, line: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("missing `{0}`")]
    Missing(&'static str),
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
}

fn value_err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.to_owned(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendChoice {
    Rapl,
    Simulated,
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rapl" => Ok(Self::Rapl),
            "simulated" => Ok(Self::Simulated),
            _ => Err(format!("expected rapl or simulated, got `{s}`")),
        }
    }
}

impl FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Self::Real),
            "virtual" => Ok(Self::Virtual),
            _ => Err(format!("expected real or virtual, got `{s}`")),
        }
    }
}

/// `off`, `calibrate:<secs>` or `fixed:<path to a baseline profile>`.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineSpec {
    Off,
    Calibrate(f64),
    Fixed(PathBuf),
}

impl FromStr for BaselineSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "off" {
            return Ok(Self::Off);
        }
        if let Some(secs) = s.strip_prefix("calibrate:") {
            let secs: f64 = secs.parse().map_err(|_| format!("bad calibration duration `{secs}`"))?;
            return Ok(Self::Calibrate(secs));
        }
        if let Some(path) = s.strip_prefix("fixed:") {
            if path.is_empty() {
                return Err("fixed: needs a profile path".into());
            }
            return Ok(Self::Fixed(path.into()));
        }
        Err(format!("expected off, calibrate:<secs> or fixed:<path>, got `{s}`"))
    }
}

impl std::fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Off => f.write_str("off"),
            Self::Calibrate(s) => write!(f, "calibrate:{s}"),
            Self::Fixed(p) => write!(f, "fixed:{}", p.display()),
        }
    }
}

/// Partially specified settings from one source (file or flags).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub command: Option<Vec<String>>,
    pub list_args: Option<Vec<String>>,
    pub working_dir: Option<PathBuf>,
    pub timeout_s: Option<f64>,
    pub env: Vec<(String, String)>,
    pub backend: Option<BackendChoice>,
    pub scenario: Option<PathBuf>,
    pub powercap_root: Option<PathBuf>,
    pub update_interval_ns: Option<u64>,
    pub clock: Option<ClockMode>,
    pub rate_hz: Option<f64>,
    pub iterations: Option<u32>,
    pub select: Option<Vec<TestId>>,
    pub revision: Option<String>,
    pub baseline: Option<BaselineSpec>,
    pub data_dir: Option<PathBuf>,
}

pub fn split_words(key: &str, s: &str) -> Result<Vec<String>, ConfigError> {
    shlex::split(s).ok_or_else(|| value_err(key, "unbalanced quotes"))
}

pub fn parse_env_pair(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_owned(), v.to_owned())),
        _ => Err(value_err("env", format!("expected KEY=VALUE, got `{s}`"))),
    }
}

pub fn parse_selection(s: &str) -> Result<Vec<TestId>, ConfigError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<TestId>().map_err(|e| value_err("select", e.to_string())))
        .collect()
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| value_err(key, e.to_string()))
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let syntax = |message: String| ConfigError::Syntax {
                path: origin.to_owned(),
                line: i + 1,
                message,
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["harness", "probe", "experiment"].contains(&name) {
                    return Err(syntax(format!("unknown section [{name}]")));
                }
                section = Some(name.to_owned());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(syntax(format!("expected `key = value`, got `{line}`")));
            };
            let Some(sec) = section.as_deref() else {
                return Err(syntax("key outside of a section".into()));
            };
            let (key, value) = (key.trim(), strip_comment(value).trim());
            s.set(sec, key, value).map_err(|e| match e {
                ConfigError::Value { key, message } => syntax(format!("{key}: {message}")),
                other => other,
            })?;
        }
        Ok(s)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), ConfigError> {
        match (section, key) {
            ("harness", "command") => self.command = Some(split_words(key, v)?),
            ("harness", "list-args") => self.list_args = Some(split_words(key, v)?),
            ("harness", "working-dir") => self.working_dir = Some(v.into()),
            ("harness", "timeout") => self.timeout_s = Some(parse(key, v)?),
            ("harness", "env") => self.env.push(parse_env_pair(v)?),
            ("probe", "backend") => self.backend = Some(parse(key, v)?),
            ("probe", "scenario") => self.scenario = Some(v.into()),
            ("probe", "powercap-root") => self.powercap_root = Some(v.into()),
            ("probe", "update-interval-ns") => self.update_interval_ns = Some(parse(key, v)?),
            ("experiment", "clock") => self.clock = Some(parse(key, v)?),
            ("experiment", "rate") => self.rate_hz = Some(parse(key, v)?),
            ("experiment", "iterations") => self.iterations = Some(parse(key, v)?),
            ("experiment", "select") => self.select = Some(parse_selection(v)?),
            ("experiment", "revision") => self.revision = Some(v.to_owned()).filter(|r| !r.is_empty()),
            ("experiment", "baseline") => self.baseline = Some(parse(key, v)?),
            ("experiment", "data-dir") => self.data_dir = Some(v.into()),
            _ => return Err(value_err(key, format!("unknown key in [{section}]"))),
        }
        Ok(())
    }

    /// `self` with every value set in `over` taking precedence.
    pub fn overlay(mut self, over: Settings) -> Settings {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(
            command,
            list_args,
            working_dir,
            timeout_s,
            backend,
            scenario,
            powercap_root,
            update_interval_ns,
            clock,
            rate_hz,
            iterations,
            select,
            revision,
            baseline,
            data_dir
        );
        self.env.extend(over.env);
        self
    }

    /// The backend: explicit, else simulated when a scenario is given, else RAPL.
    pub fn probe_selection(&self) -> ProbeSelection {
        let backend = self.backend.unwrap_or(if self.scenario.is_some() {
            BackendChoice::Simulated
        } else {
            BackendChoice::Rapl
        });
        match backend {
            BackendChoice::Rapl => ProbeSelection::Rapl {
                powercap_root: self
                    .powercap_root
                    .clone()
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_POWERCAP_ROOT)),
                update_interval_ns: self.update_interval_ns.unwrap_or(DEFAULT_RAPL_UPDATE_INTERVAL_NS),
            },
            BackendChoice::Simulated => ProbeSelection::Simulated {
                scenario: self.scenario.clone(),
            },
        }
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock.unwrap_or_default()
    }

    pub fn harness(&self) -> Result<HarnessCommand, ConfigError> {
        let words = self.command.as_ref().ok_or(ConfigError::Missing("harness command (--harness)"))?;
        let (program, args) = words
            .split_first()
            .ok_or_else(|| value_err("command", "empty harness command"))?;
        let mut cmd = HarnessCommand::new(program);
        cmd.args = args.to_vec();
        cmd.list_args = match &self.list_args {
            Some(a) => a.clone(),
            None => vec![DEFAULT_LIST_ARGS.to_owned()],
        };
        if let Some(dir) = &self.working_dir {
            cmd.working_dir = dir.clone();
        }
        if let Some(t) = self.timeout_s {
            if !(t.is_finite() && t > 0.0) {
                return Err(value_err("timeout", "must be a positive number of seconds"));
            }
            cmd.timeout = Duration::try_from_secs_f64(t).map_err(|e| value_err("timeout", e.to_string()))?;
        }
        cmd.env = self.env.iter().cloned().collect::<BTreeMap<_, _>>();
        Ok(cmd)
    }

    pub fn baseline_mode(&self) -> Result<BaselineMode, ConfigError> {
        Ok(match self.baseline.clone().unwrap_or(BaselineSpec::Off) {
            BaselineSpec::Off => BaselineMode::Off,
            BaselineSpec::Calibrate(duration_s) => BaselineMode::Calibrate { duration_s },
            BaselineSpec::Fixed(path) => {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| value_err("baseline", format!("{}: {e}", path.display())))?;
                let profile: BaselineProfile = serde_json::from_str(&text)
                    .map_err(|e| value_err("baseline", format!("{}: {e}", path.display())))?;
                BaselineMode::Fixed { profile }
            }
        })
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, ConfigError> {
        Ok(ExperimentConfig {
            harness: self.harness()?,
            probe: self.probe_selection(),
            clock: self.clock_mode(),
            sampling_rate_hz: self.rate_hz.unwrap_or(DEFAULT_RATE_HZ),
            iterations: self.iterations.unwrap_or(DEFAULT_ITERATIONS),
            selection: self.select.clone().unwrap_or_default(),
            baseline: self.baseline_mode()?,
            revision_label: self.revision.clone(),
        })
    }

    /// The effective settings in config-file syntax, with every default filled in.
    pub fn echo(&self, data_dir: &Path) -> Result<String, ConfigError> {
        let cfg = self.experiment()?;
        let quote = |words: &[String]| {
            shlex::try_join(words.iter().map(String::as_str)).expect("arguments contain no NUL bytes")
        };
        let h = &cfg.harness;
        let mut command = vec![h.program.display().to_string()];
        command.extend(h.args.iter().cloned());

        let mut out = String::from("[harness]\n");
        let _ = writeln!(out, "command = {}", quote(&command));
        let _ = writeln!(out, "list-args = {}", quote(&h.list_args));
        let _ = writeln!(out, "working-dir = {}", h.working_dir.display());
        let _ = writeln!(out, "timeout = {}", h.timeout.as_secs_f64());
        for (k, v) in &h.env {
            let _ = writeln!(out, "env = {k}={v}");
        }
        out.push_str("\n[probe]\n");
        match &cfg.probe {
            ProbeSelection::Rapl {
                powercap_root,
                update_interval_ns,
            } => {
                out.push_str("backend = rapl\n");
                let _ = writeln!(out, "powercap-root = {}", powercap_root.display());
                let _ = writeln!(out, "update-interval-ns = {update_interval_ns}");
            }
            ProbeSelection::Simulated { scenario } => {
                out.push_str("backend = simulated\n");
                if let Some(s) = scenario {
                    let _ = writeln!(out, "scenario = {}", s.display());
                }
            }
        }
        out.push_str("\n[experiment]\n");
        let clock = match cfg.clock {
            ClockMode::Real => "real",
            ClockMode::Virtual => "virtual",
        };
        let _ = writeln!(out, "clock = {clock}");
        let _ = writeln!(out, "rate = {}", cfg.sampling_rate_hz);
        let _ = writeln!(out, "iterations = {}", cfg.iterations);
        let select: Vec<String> = cfg.selection.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "select = {}", select.join(", "));
        let _ = writeln!(out, "revision = {}", cfg.revision_label.as_deref().unwrap_or(""));
        let _ = writeln!(out, "baseline = {}", self.baseline.clone().unwrap_or(BaselineSpec::Off));
        let _ = writeln!(out, "data-dir = {}", data_dir.display());
        Ok(out)
    }
}

/// Drops a trailing ` # comment` (a `#` preceded by whitespace).
fn strip_comment(value: &str) -> &str {
    let bytes = value.as_bytes();
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'#' && i > 0 && bytes[i - 1].is_ascii_whitespace() {
            return &value[..i];
        }
    }
    value
}
