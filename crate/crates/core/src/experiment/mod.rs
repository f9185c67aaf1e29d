//! The experiment runner: binds a harness, a probe and a sampler
//! configuration, runs every selected test for the configured number of
//! iterations and attributes the measured energy to each execution.
//!
//! Per iteration: start the sampler, run the test in a fresh harness process,
//! wait until a sample covers END, stop the sampler, attribute the energy
//! inside `[BEGIN, END]`. Tests run strictly one after another.

mod attribution;
mod stats;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use chrono::Utc;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use attribution::{attribute, attribute_exact};
pub use stats::Stats;

use crate::clock::Clock;
use crate::harness::{self, HarnessCommand, HarnessError, TestId, TestStatus};
use crate::probe::{open_probe, EnergyDomain, Probe, ProbeDescriptor, ProbeError, ProbeSelection};
use crate::sampler::{calibrate_baseline, BaselineProfile, EnergySample, SamplerConfig, SamplerError, SamplerHandle};
use crate::store::{self, RevisionRecord, Store, StoreError, FORMAT_VERSION};

const NANOS_PER_SEC: f64 = 1e9;

/// Label used when no revision is given and the working tree is not a git checkout.
pub const UNVERSIONED_LABEL: &str = "unversioned";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// OS monotonic clock; harness work takes real time.
    #[default]
    Real,
    /// Deterministic virtual time reported by the harness through `ADVANCE`.
    Virtual,
}

impl ClockMode {
    pub fn make_clock(self) -> Clock {
        match self {
            ClockMode::Real => Clock::monotonic(),
            ClockMode::Virtual => Clock::new_virtual(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BaselineMode {
    #[default]
    Off,
    Calibrate {
        duration_s: f64,
    },
    Fixed {
        profile: BaselineProfile,
    },
}

/// A replicable experiment definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub harness: HarnessCommand,
    pub probe: ProbeSelection,
    pub clock: ClockMode,
    pub sampling_rate_hz: f64,
    /// Repeated executions per test.
    pub iterations: u32,
    /// Tests to run in order; empty means every discovered test.
    pub selection: Vec<TestId>,
    pub baseline: BaselineMode,
    /// Defaults to the git HEAD of the harness working directory.
    pub revision_label: Option<String>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let invalid = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.iterations == 0 {
            return invalid("iterations must be >= 1".into());
        }
        SamplerConfig::new(self.sampling_rate_hz)
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        self.harness
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        match &self.baseline {
            BaselineMode::Off => {}
            BaselineMode::Calibrate { duration_s } => {
                if !(duration_s.is_finite() && *duration_s >= 1.0) {
                    return invalid(format!("baseline calibration needs at least 1 s, got {duration_s}"));
                }
            }
            BaselineMode::Fixed { profile } => {
                if let Some((d, w)) = profile.power_w.iter().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
                    return invalid(format!("baseline power for {d} must be >= 0, got {w}"));
                }
            }
        }
        if let Some(label) = &self.revision_label {
            store::validate_label(label).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;
        }
        if let ProbeSelection::Rapl { update_interval_ns: 0, .. } = self.probe {
            return invalid("update_interval_ns must be > 0".into());
        }
        Ok(())
    }

    /// SHA-256 of the configuration content, ignoring the revision label so
    /// the same experiment can be compared across revisions.
    pub fn digest(&self) -> String {
        let mut content = self.clone();
        content.revision_label = None;
        let bytes = serde_json::to_vec(&content).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Failure {
    /// Harness exited or was killed between BEGIN and END.
    Crashed { exit_code: Option<i32>, timed_out: bool },
    /// Marker stream violated the protocol; nothing was attributed.
    ProtocolError { reason: String },
}

/// One execution of one test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestExecutionResult {
    pub test: TestId,
    pub iteration: u32,
    pub begin_ns: u64,
    pub end_ns: u64,
    pub duration_ns: u64,
    pub energy_j: BTreeMap<EnergyDomain, f64>,
    pub mean_power_w: BTreeMap<EnergyDomain, f64>,
    pub samples: Vec<EnergySample>,
    pub status: TestStatus,
    pub failure: Option<Failure>,
    /// The test ran for less than one probe update interval.
    pub low_confidence: bool,
    pub baseline_applied: bool,
}

impl TestExecutionResult {
    fn measured(
        test: &TestId,
        iteration: u32,
        window: (u64, u64),
        samples: Vec<EnergySample>,
        domains: &[EnergyDomain],
        update_interval_ns: u64,
        baseline_applied: bool,
    ) -> Self {
        let (begin_ns, end_ns) = window;
        let duration_ns = end_ns - begin_ns;
        let mut energy_j = attribute(&samples, begin_ns, end_ns);
        for d in domains {
            energy_j.entry(*d).or_insert(0.0);
        }
        let secs = duration_ns as f64 / NANOS_PER_SEC;
        let mean_power_w = energy_j.iter().map(|(d, j)| (*d, j / secs)).collect();
        Self {
            test: test.clone(),
            iteration,
            begin_ns,
            end_ns,
            duration_ns,
            energy_j,
            mean_power_w,
            samples,
            status: TestStatus::Pass,
            failure: None,
            low_confidence: duration_ns < update_interval_ns,
            baseline_applied,
        }
    }

    fn unmeasured(test: &TestId, iteration: u32, samples: Vec<EnergySample>, failure: Failure, baseline_applied: bool) -> Self {
        Self {
            test: test.clone(),
            iteration,
            begin_ns: 0,
            end_ns: 0,
            duration_ns: 0,
            energy_j: BTreeMap::new(),
            mean_power_w: BTreeMap::new(),
            samples,
            status: TestStatus::Fail,
            failure: Some(failure),
            low_confidence: true,
            baseline_applied,
        }
    }

    /// Whether energy was attributed to this execution.
    pub fn is_measured(&self) -> bool {
        self.end_ns > self.begin_ns
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSummary {
    pub energy_j: Stats,
    pub power_w: Stats,
}

/// Cross-iteration statistics for one test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub test: TestId,
    pub iterations: u32,
    /// Iterations with attributed energy (excludes protocol failures).
    pub measured: u32,
    pub domains: BTreeMap<EnergyDomain, DomainSummary>,
    pub mean_duration_ns: f64,
    pub any_low_confidence: bool,
    pub pass_count: u32,
    pub fail_count: u32,
    pub skip_count: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SummaryError {
    #[error("no results to summarize")]
    EmptyInput,
    #[error("results mix tests {0} and {1}")]
    MixedTests(TestId, TestId),
}

pub fn summarize(results: &[TestExecutionResult]) -> Result<TestSummary, SummaryError> {
    let first = results.first().ok_or(SummaryError::EmptyInput)?;
    if let Some(other) = results.iter().find(|r| r.test != first.test) {
        return Err(SummaryError::MixedTests(first.test.clone(), other.test.clone()));
    }
    let measured: Vec<&TestExecutionResult> = results.iter().filter(|r| r.is_measured()).collect();

    let mut per_domain: BTreeMap<EnergyDomain, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &measured {
        for (d, j) in &r.energy_j {
            let entry = per_domain.entry(*d).or_default();
            entry.0.push(*j);
            entry.1.push(r.mean_power_w[d]);
        }
    }
    let domains = per_domain
        .into_iter()
        .map(|(d, (e, p))| {
            let summary = DomainSummary {
                energy_j: Stats::of(&e).expect("non-empty"),
                power_w: Stats::of(&p).expect("non-empty"),
            };
            (d, summary)
        })
        .collect();
    let durations: Vec<f64> = measured.iter().map(|r| r.duration_ns as f64).collect();
    let count = |s: TestStatus| results.iter().filter(|r| r.status == s).count() as u32;

    Ok(TestSummary {
        test: first.test.clone(),
        iterations: results.len() as u32,
        measured: measured.len() as u32,
        domains,
        mean_duration_ns: Stats::of(&durations).map_or(0.0, |s| s.mean),
        any_low_confidence: results.iter().any(|r| r.low_confidence),
        pass_count: count(TestStatus::Pass),
        fail_count: count(TestStatus::Fail),
        skip_count: count(TestStatus::Skip),
    })
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment configuration: {0}")]
    InvalidConfig(String),
    #[error("no tests selected (the harness declared none)")]
    EmptySelection,
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Progress notifications emitted while an experiment runs.
#[derive(Debug)]
pub enum Progress<'a> {
    Started {
        revision_label: &'a str,
        tests: &'a [TestId],
        probe: &'a ProbeDescriptor,
    },
    Baseline(&'a BaselineProfile),
    Iteration(&'a TestExecutionResult),
    TestDone(&'a TestSummary),
}

/// Resolves the label: explicit, else git HEAD (with `-dirty` for a modified
/// tree), else [`UNVERSIONED_LABEL`].
pub fn resolve_revision_label(explicit: Option<&str>, working_dir: &Path) -> String {
    if let Some(label) = explicit {
        return label.to_owned();
    }
    let git = |args: &[&str]| {
        Command::new("git")
            .arg("-C")
            .arg(working_dir)
            .args(args)
            .stderr(std::process::Stdio::null())
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_owned())
    };
    match git(&["rev-parse", "--short=12", "HEAD"]) {
        Some(head) if !head.is_empty() => {
            let dirty = git(&["status", "--porcelain", "--untracked-files=no"]).is_some_and(|s| !s.is_empty());
            if dirty {
                format!("{head}-dirty")
            } else {
                head
            }
        }
        _ => {
            warn!("no revision label given and no git HEAD found; using `{UNVERSIONED_LABEL}`");
            UNVERSIONED_LABEL.to_owned()
        }
    }
}

/// Runs `config` to completion and persists the resulting record in `store`.
///
/// Probe loss and harness launch failures abort without persisting anything.
/// A protocol violation records a failed execution and moves on to the next
/// test.
pub fn run_experiment(
    config: &ExperimentConfig,
    store: &Store,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<RevisionRecord, ExperimentError> {
    config.validate()?;
    let lock = store.lock()?;
    let revision_label = resolve_revision_label(config.revision_label.as_deref(), &config.harness.working_dir);
    store::validate_label(&revision_label).map_err(|e| ExperimentError::InvalidConfig(e.to_string()))?;

    let clock = config.clock.make_clock();
    let mut probe = open_probe(&config.probe, clock.clone())?;
    let descriptor = probe.descriptor().clone();

    let selection = if config.selection.is_empty() {
        harness::discover(&config.harness)?
    } else {
        config.selection.clone()
    };
    if selection.is_empty() {
        return Err(ExperimentError::EmptySelection);
    }
    progress(Progress::Started {
        revision_label: &revision_label,
        tests: &selection,
        probe: &descriptor,
    });

    let baseline = match &config.baseline {
        BaselineMode::Off => None,
        BaselineMode::Fixed { profile } => Some(profile.clone()),
        BaselineMode::Calibrate { duration_s } => {
            let profile = calibrate_baseline(probe.as_mut(), *duration_s, &clock)?;
            progress(Progress::Baseline(&profile));
            Some(profile)
        }
    };
    let mut sampler_config = SamplerConfig::new(config.sampling_rate_hz);
    sampler_config.baseline = baseline.clone();

    let mut results = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    for test in &selection {
        let mut runs = Vec::with_capacity(config.iterations as usize);
        for iteration in 0..config.iterations {
            let (returned, result) = run_iteration(
                probe,
                &sampler_config,
                &clock,
                &config.harness,
                test,
                iteration,
                &descriptor,
            );
            probe = returned;
            let result = result?;
            progress(Progress::Iteration(&result));
            let protocol_failure = matches!(result.failure, Some(Failure::ProtocolError { .. }));
            runs.push(result);
            if protocol_failure {
                warn!("{test}: protocol violation, skipping its remaining iterations");
                break;
            }
        }
        let summary = summarize(&runs).expect("at least one iteration per test");
        progress(Progress::TestDone(&summary));
        summaries.insert(test.clone(), summary);
        results.insert(test.clone(), runs);
    }

    let record = RevisionRecord {
        format_version: FORMAT_VERSION,
        revision_label,
        created_at: Utc::now(),
        config_digest: config.digest(),
        config: config.clone(),
        probe: descriptor,
        baseline,
        summaries,
        results,
    };
    let path = store.save(&lock, &record)?;
    info!("stored {}", path.display());
    Ok(record)
}

type IterationOutput = (Box<dyn Probe>, Result<TestExecutionResult, ExperimentError>);

fn run_iteration(
    probe: Box<dyn Probe>,
    sampler_config: &SamplerConfig,
    clock: &Clock,
    harness_cmd: &HarnessCommand,
    test: &TestId,
    iteration: u32,
    descriptor: &ProbeDescriptor,
) -> IterationOutput {
    let mut handle = match SamplerHandle::spawn(probe, sampler_config.clone(), clock) {
        Ok(h) => h,
        Err((probe, e)) => return (probe, Err(e.into())),
    };
    let outcome = harness::run_one(harness_cmd, test, clock);

    let window = match &outcome {
        Ok(o) => Some((o.begin_ns, o.end_ns)),
        Err(HarnessError::TestCrashed {
            begin_ns: Some(b),
            end_ns,
            ..
        }) => Some((*b, (*end_ns).max(b + 1))),
        Err(_) => None,
    };
    if let Some((_, end)) = window {
        clock.pass_until(handle.deadline_covering(end));
        handle.collect_until(end);
    }
    let (probe, samples) = handle.finish();
    let samples = match samples {
        Ok(s) => s,
        Err(e) => return (probe, Err(e.into())),
    };

    let baseline_applied = sampler_config.baseline.is_some();
    let result = match (outcome, window) {
        (Ok(o), Some(w)) => {
            let mut r = TestExecutionResult::measured(
                test,
                iteration,
                w,
                samples,
                &descriptor.domains,
                descriptor.update_interval_ns,
                baseline_applied,
            );
            r.status = o.status;
            Ok(r)
        }
        (Err(HarnessError::TestCrashed { exit_code, timed_out, .. }), window) => {
            let failure = Failure::Crashed { exit_code, timed_out };
            Ok(match window {
                Some(w) => {
                    let mut r = TestExecutionResult::measured(
                        test,
                        iteration,
                        w,
                        samples,
                        &descriptor.domains,
                        descriptor.update_interval_ns,
                        baseline_applied,
                    );
                    r.status = TestStatus::Fail;
                    r.failure = Some(failure);
                    r
                }
                None => TestExecutionResult::unmeasured(test, iteration, samples, failure, baseline_applied),
            })
        }
        (Err(HarnessError::ProtocolViolation { reason, .. }), _) => Ok(TestExecutionResult::unmeasured(
            test,
            iteration,
            samples,
            Failure::ProtocolError { reason },
            baseline_applied,
        )),
        (Err(e), _) => Err(e.into()),
        (Ok(_), None) => unreachable!("successful runs always have a window"),
    };
    (probe, result)
}
