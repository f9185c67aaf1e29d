//! Energy measurement backends.
//!
//! A probe exposes cumulative, wrapping per-domain energy counters in
//! microjoules. Two backends exist: [`RaplProbe`] reads the Linux powercap
//! tree, [`SimulatedProbe`] integrates a [`SimulationScenario`] over a
//! [`Clock`](crate::clock::Clock).

mod rapl;
mod scenario;
mod simulated;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::clock::Clock;

pub use rapl::{RaplProbe, DEFAULT_POWERCAP_ROOT, DEFAULT_RAPL_UPDATE_INTERVAL_NS};
pub use scenario::{Power, Segment, SimulationScenario};
pub use simulated::SimulatedProbe;

/// RAPL power domain kinds, in the order domains are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DomainKind {
    Package,
    Core,
    Uncore,
    Dram,
    Psys,
}

impl DomainKind {
    pub const ALL: [DomainKind; 5] = [
        DomainKind::Package,
        DomainKind::Core,
        DomainKind::Uncore,
        DomainKind::Dram,
        DomainKind::Psys,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainKind::Package => "package",
            DomainKind::Core => "core",
            DomainKind::Uncore => "uncore",
            DomainKind::Dram => "dram",
            DomainKind::Psys => "psys",
        }
    }
}

impl FromStr for DomainKind {
    type Err = ParseDomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DomainKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ParseDomainError(s.to_owned()))
    }
}

/// A power domain on one socket. Rendered as `<kind>-<socket>`, e.g. `package-0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnergyDomain {
    pub kind: DomainKind,
    pub socket: u32,
}

impl EnergyDomain {
    pub const fn new(kind: DomainKind, socket: u32) -> Self {
        Self { kind, socket }
    }

    pub const fn package(socket: u32) -> Self {
        Self::new(DomainKind::Package, socket)
    }
}

impl fmt::Display for EnergyDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.kind.as_str(), self.socket)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown energy domain `{0}` (expected package, core, uncore, dram or psys, optionally suffixed with -<socket>)")]
pub struct ParseDomainError(pub String);

impl FromStr for EnergyDomain {
    type Err = ParseDomainError;

    /// Accepts `package`, `package-1`, `dram-0`, ...; a bare kind means socket 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseDomainError(s.to_owned());
        let (kind, socket) = match s.split_once('-') {
            Some((k, n)) => {
                let socket = n.parse::<u32>().map_err(|_| err())?;
                (k, socket)
            }
            None => (s, 0),
        };
        let kind = kind.parse::<DomainKind>().map_err(|_| err())?;
        Ok(EnergyDomain { kind, socket })
    }
}

impl Serialize for EnergyDomain {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EnergyDomain {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One domain's counter value together with its wrap point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counter {
    pub value_uj: u64,
    pub max_range_uj: u64,
}

/// A snapshot of every domain counter. Iteration order is the read order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeReading {
    pub timestamp_ns: u64,
    pub counters: BTreeMap<EnergyDomain, Counter>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Rapl,
    Simulated,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Rapl => "rapl",
            Backend::Simulated => "simulated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeDescriptor {
    pub backend: Backend,
    pub domains: Vec<EnergyDomain>,
    /// Granularity at which the counters refresh.
    pub update_interval_ns: u64,
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("no energy probe available: {0}")]
    NoProbeAvailable(String),
    #[error("permission denied reading {}; grant read access to the RAPL energy counters (e.g. `chmod a+r {}` as root)", path.display(), path.display())]
    PermissionDenied { path: PathBuf },
    #[error("reading {domain} failed: {reason}")]
    ReadFailed { domain: EnergyDomain, reason: String },
    #[error("malformed scenario (line {line}): {message}")]
    MalformedScenario { line: usize, message: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// An energy measurement backend. One owner reads at a time.
pub trait Probe: Send {
    fn descriptor(&self) -> &ProbeDescriptor;

    /// Reads all domains back-to-back in [`EnergyDomain`] order. A failure on
    /// any domain discards the whole reading.
    fn read(&mut self) -> Result<ProbeReading, ProbeError>;
}

/// Which backend to open and how.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum ProbeSelection {
    Rapl {
        powercap_root: PathBuf,
        update_interval_ns: u64,
    },
    Simulated {
        scenario: Option<PathBuf>,
    },
}

/// Opens the selected backend, enumerating its domains.
pub fn open_probe(selection: &ProbeSelection, clock: Clock) -> Result<Box<dyn Probe>, ProbeError> {
    match selection {
        ProbeSelection::Rapl {
            powercap_root,
            update_interval_ns,
        } => Ok(Box::new(RaplProbe::open(
            powercap_root,
            *update_interval_ns,
            clock,
        )?)),
        ProbeSelection::Simulated { scenario } => {
            let path = scenario.as_ref().ok_or_else(|| {
                ProbeError::NoProbeAvailable("simulated probe selected but no scenario given".into())
            })?;
            let scenario = SimulationScenario::load(path)?;
            Ok(Box::new(SimulatedProbe::new(scenario, clock)))
        }
    }
}
