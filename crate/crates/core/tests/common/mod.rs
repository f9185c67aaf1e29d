#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use rand::Rng;

use manai::experiment::{
    BaselineMode, ClockMode, DomainSummary, ExperimentConfig, Failure, Stats, TestExecutionResult, TestSummary,
};
use manai::harness::{HarnessCommand, TestId, TestStatus};
use manai::probe::{Backend, DomainKind, EnergyDomain, Power, ProbeDescriptor, ProbeSelection, SimulationScenario};
use manai::sampler::{BaselineProfile, DomainEnergy, EnergySample};
use manai::store::{RevisionRecord, FORMAT_VERSION};

pub mod oracles;

pub const PKG: EnergyDomain = EnergyDomain::package(0);
pub const DRAM: EnergyDomain = EnergyDomain::new(DomainKind::Dram, 0);
pub const MS: u64 = 1_000_000;
pub const SEC: u64 = 1_000_000_000;
/// Package counter range of a typical RAPL implementation.
pub const RAPL_RANGE_UJ: u64 = 262_143_328_850;

pub fn fixture_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_manai-fixture"))
}

pub fn manai_bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_manai"))
}

pub fn id(s: &str) -> TestId {
    s.parse().expect("valid test id")
}

/// A fixture harness command declaring the given `suite::name=actions` tests.
pub fn fixture_cmd(tests: &[&str]) -> HarnessCommand {
    let mut cmd = HarnessCommand::new(fixture_bin());
    cmd.args = tests.iter().map(|s| s.to_string()).collect();
    cmd.list_args = vec!["--list".into()];
    cmd.timeout = Duration::from_secs(30);
    cmd
}

pub fn constant_scenario(watts: &[(EnergyDomain, f64)], update_interval_ns: u64) -> SimulationScenario {
    SimulationScenario::constant(
        watts.iter().map(|(d, w)| (*d, Power::from_watts(*w).expect("valid power"))),
        RAPL_RANGE_UJ,
        update_interval_ns,
    )
    .expect("valid scenario")
}

pub fn write_scenario(dir: &Path, name: &str, scenario: &SimulationScenario) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, scenario.to_string()).expect("write scenario");
    path
}

/// A virtual-clock experiment on the simulated probe.
pub fn sim_config(
    scenario: &Path,
    tests: &[&str],
    iterations: u32,
    rate_hz: f64,
    label: &str,
) -> ExperimentConfig {
    ExperimentConfig {
        harness: fixture_cmd(tests),
        probe: ProbeSelection::Simulated {
            scenario: Some(scenario.to_owned()),
        },
        clock: ClockMode::Virtual,
        sampling_rate_hz: rate_hz,
        iterations,
        selection: Vec::new(),
        baseline: BaselineMode::Off,
        revision_label: Some(label.to_owned()),
    }
}

/// Any finite f64, including subnormals, negative zero and extreme exponents.
pub fn any_finite<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let v = match rng.gen_range(0..4) {
            0 => f64::from_bits(rng.gen()),
            1 => rng.gen_range(0.0..1e3),
            2 => rng.gen::<f64>() * 10f64.powi(rng.gen_range(-300..300)),
            _ => [0.0, -0.0, f64::MIN_POSITIVE, f64::MAX, 5e-324, 0.1 + 0.2][rng.gen_range(0..6)],
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn any_stats<R: Rng>(rng: &mut R) -> Stats {
    Stats {
        mean: any_finite(rng),
        median: any_finite(rng),
        min: any_finite(rng),
        max: any_finite(rng),
        stddev: any_finite(rng),
    }
}

fn any_status<R: Rng>(rng: &mut R) -> TestStatus {
    [TestStatus::Pass, TestStatus::Fail, TestStatus::Skip][rng.gen_range(0..3)]
}

/// A structurally valid record with arbitrary numeric content.
pub fn random_record<R: Rng>(rng: &mut R, label: &str, created_at: DateTime<Utc>, tests: &[TestId]) -> RevisionRecord {
    let domains = [PKG, DRAM];
    let mut summaries = BTreeMap::new();
    let mut results = BTreeMap::new();
    for test in tests {
        let n = rng.gen_range(1..=3u32);
        let runs: Vec<TestExecutionResult> = (0..n)
            .map(|iteration| {
                let begin_ns = rng.gen_range(0..u64::MAX / 4);
                let duration_ns = rng.gen_range(1..SEC);
                let samples = (0..rng.gen_range(0..3))
                    .map(|k| EnergySample {
                        start_ns: begin_ns + k * 10,
                        end_ns: begin_ns + k * 10 + 10,
                        domains: domains
                            .iter()
                            .map(|d| {
                                let e = DomainEnergy {
                                    raw_uj: rng.gen(),
                                    joules: any_finite(rng),
                                    watts: any_finite(rng),
                                };
                                (*d, e)
                            })
                            .collect(),
                    })
                    .collect();
                TestExecutionResult {
                    test: test.clone(),
                    iteration,
                    begin_ns,
                    end_ns: begin_ns + duration_ns,
                    duration_ns,
                    energy_j: domains.iter().map(|d| (*d, any_finite(rng))).collect(),
                    mean_power_w: domains.iter().map(|d| (*d, any_finite(rng))).collect(),
                    samples,
                    status: any_status(rng),
                    failure: if rng.gen_bool(0.2) {
                        Some(Failure::Crashed {
                            exit_code: Some(rng.gen_range(1..255)),
                            timed_out: rng.gen(),
                        })
                    } else {
                        None
                    },
                    low_confidence: rng.gen(),
                    baseline_applied: rng.gen(),
                }
            })
            .collect();
        let summary = TestSummary {
            test: test.clone(),
            iterations: n,
            measured: n,
            domains: domains
                .iter()
                .map(|d| {
                    let s = DomainSummary {
                        energy_j: any_stats(rng),
                        power_w: any_stats(rng),
                    };
                    (*d, s)
                })
                .collect(),
            mean_duration_ns: any_finite(rng),
            any_low_confidence: rng.gen(),
            pass_count: n,
            fail_count: 0,
            skip_count: 0,
        };
        summaries.insert(test.clone(), summary);
        results.insert(test.clone(), runs);
    }
    let config = ExperimentConfig {
        harness: fixture_cmd(&["s::t"]),
        probe: ProbeSelection::Simulated {
            scenario: Some("s.txt".into()),
        },
        clock: ClockMode::Virtual,
        sampling_rate_hz: rng.gen_range(1.0..1e4),
        iterations: 3,
        selection: tests.to_vec(),
        baseline: BaselineMode::Off,
        revision_label: Some(label.to_owned()),
    };
    RevisionRecord {
        format_version: FORMAT_VERSION,
        revision_label: label.to_owned(),
        created_at,
        config_digest: config.digest(),
        config,
        probe: ProbeDescriptor {
            backend: Backend::Simulated,
            domains: domains.to_vec(),
            update_interval_ns: MS,
        },
        baseline: rng.gen_bool(0.3).then(|| BaselineProfile {
            power_w: domains.iter().map(|d| (*d, any_finite(rng))).collect(),
            duration_s: any_finite(rng),
            calibrated_at_ns: rng.gen(),
        }),
        summaries,
        results,
    }
}

pub fn timestamp(secs: i64, nanos: u32) -> DateTime<Utc> {
    Utc.timestamp_opt(1_700_000_000 + secs, nanos).single().expect("valid timestamp")
}

fn stats_bits(s: &Stats, out: &mut Vec<u64>) {
    out.extend([s.mean, s.median, s.min, s.max, s.stddev].map(f64::to_bits));
}

/// Bit patterns of every float in a record, in a fixed traversal order.
pub fn float_bits(r: &RevisionRecord) -> Vec<u64> {
    let mut out = vec![r.config.sampling_rate_hz.to_bits()];
    if let Some(b) = &r.baseline {
        out.extend(b.power_w.values().map(|v| v.to_bits()));
        out.push(b.duration_s.to_bits());
    }
    for s in r.summaries.values() {
        for d in s.domains.values() {
            stats_bits(&d.energy_j, &mut out);
            stats_bits(&d.power_w, &mut out);
        }
        out.push(s.mean_duration_ns.to_bits());
    }
    for run in r.results.values().flatten() {
        out.extend(run.energy_j.values().map(|v| v.to_bits()));
        out.extend(run.mean_power_w.values().map(|v| v.to_bits()));
        for s in &run.samples {
            for e in s.domains.values() {
                out.extend([e.joules.to_bits(), e.watts.to_bits()]);
            }
        }
    }
    out
}

/// Runs `tests` on a constant-power simulated package and stores the record.
pub fn simulated_run(
    dir: &Path,
    store: &manai::store::Store,
    package_w: f64,
    tests: &[&str],
    iterations: u32,
    label: &str,
) -> RevisionRecord {
    let scenario = write_scenario(dir, &format!("{label}.scenario"), &constant_scenario(&[(PKG, package_w)], MS));
    let cfg = sim_config(&scenario, tests, iterations, 100.0, label);
    manai::experiment::run_experiment(&cfg, store, &mut |_| {}).expect("experiment runs")
}

/// Block characters of a rendered bar, in eighths of a cell.
pub fn bar_eighths_of(line: &str) -> usize {
    line.chars()
        .map(|c| match c {
            '█' => 8,
            '▏' => 1,
            '▎' => 2,
            '▍' => 3,
            '▌' => 4,
            '▋' => 5,
            '▊' => 6,
            '▉' => 7,
            _ => 0,
        })
        .sum()
}
