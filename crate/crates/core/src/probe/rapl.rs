//! RAPL counters through the Linux powercap sysfs interface.
//!
//! Layout consumed (one level of nesting for subdomains):
//!
//! ```text
//! <root>/intel-rapl:0/name                 "package-0"
//! <root>/intel-rapl:0/energy_uj
//! <root>/intel-rapl:0/max_energy_range_uj
//! <root>/intel-rapl:0/intel-rapl:0:0/name  "core"
//! ```
//!
//! Kernel docs: <https://www.kernel.org/doc/Documentation/power/powercap/powercap.txt>

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use log::{debug, warn};

use super::{Backend, Counter, DomainKind, EnergyDomain, Probe, ProbeDescriptor, ProbeError, ProbeReading};
use crate::clock::Clock;

pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";

/// Commonly documented ~1 ms refresh of the RAPL energy counters.
pub const DEFAULT_RAPL_UPDATE_INTERVAL_NS: u64 = 1_000_000;

#[derive(Debug, Clone)]
struct Zone {
    domain: EnergyDomain,
    energy_path: PathBuf,
    max_range_uj: u64,
}

#[derive(Debug)]
pub struct RaplProbe {
    zones: Vec<Zone>,
    descriptor: ProbeDescriptor,
    clock: Clock,
    last_ts: Option<u64>,
}

impl RaplProbe {
    /// Enumerates the zones under `root` and checks that every counter is readable.
    pub fn open(root: &Path, update_interval_ns: u64, clock: Clock) -> Result<Self, ProbeError> {
        if update_interval_ns == 0 {
            return Err(ProbeError::NoProbeAvailable("update interval must be > 0".into()));
        }
        let zones = discover_zones(root)?;
        for zone in &zones {
            read_u64(&zone.energy_path).map_err(|e| classify(zone, e))?;
        }
        let descriptor = ProbeDescriptor {
            backend: Backend::Rapl,
            domains: zones.iter().map(|z| z.domain).collect(),
            update_interval_ns,
        };
        Ok(Self {
            zones,
            descriptor,
            clock,
            last_ts: None,
        })
    }
}

impl Probe for RaplProbe {
    fn descriptor(&self) -> &ProbeDescriptor {
        &self.descriptor
    }

    fn read(&mut self) -> Result<ProbeReading, ProbeError> {
        let mut timestamp_ns = self.clock.now_ns();
        if let Some(last) = self.last_ts {
            timestamp_ns = timestamp_ns.max(last + 1);
        }
        let mut counters = BTreeMap::new();
        for zone in &self.zones {
            let raw = read_u64(&zone.energy_path).map_err(|e| classify(zone, e))?;
            counters.insert(
                zone.domain,
                Counter {
                    value_uj: raw % zone.max_range_uj,
                    max_range_uj: zone.max_range_uj,
                },
            );
        }
        self.last_ts = Some(timestamp_ns);
        Ok(ProbeReading {
            timestamp_ns,
            counters,
        })
    }
}

#[derive(Debug)]
enum ReadError {
    Io(PathBuf, io::Error),
    Parse(PathBuf, String),
}

fn classify(zone: &Zone, err: ReadError) -> ProbeError {
    match err {
        ReadError::Io(path, e) if e.kind() == io::ErrorKind::PermissionDenied => {
            ProbeError::PermissionDenied { path }
        }
        ReadError::Io(path, e) => ProbeError::ReadFailed {
            domain: zone.domain,
            reason: format!("{}: {e}", path.display()),
        },
        ReadError::Parse(path, what) => ProbeError::ReadFailed {
            domain: zone.domain,
            reason: format!("{}: {what}", path.display()),
        },
    }
}

fn read_trimmed(path: &Path) -> Result<String, ReadError> {
    std::fs::read_to_string(path)
        .map(|s| s.trim().to_owned())
        .map_err(|e| ReadError::Io(path.to_owned(), e))
}

fn read_u64(path: &Path) -> Result<u64, ReadError> {
    let s = read_trimmed(path)?;
    s.parse::<u64>()
        .map_err(|_| ReadError::Parse(path.to_owned(), format!("not an unsigned integer: {s:?}")))
}

/// `intel-rapl:<a>` -> Some([a]); `intel-rapl:<a>:<b>` -> Some([a, b]).
fn zone_indices(dir_name: &str) -> Option<Vec<u32>> {
    let rest = dir_name.strip_prefix("intel-rapl:")?;
    rest.split(':').map(|p| p.parse().ok()).collect()
}

fn sorted_entries(dir: &Path) -> io::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if let Ok(name) = entry.file_name().into_string() {
            out.push((name, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

fn zone_domain(name: &str, parent_socket: Option<u32>) -> Option<EnergyDomain> {
    if let Some(n) = name.strip_prefix("package-") {
        return n.parse().ok().map(EnergyDomain::package);
    }
    let kind = match name {
        "core" => DomainKind::Core,
        "uncore" => DomainKind::Uncore,
        "dram" => DomainKind::Dram,
        "psys" => DomainKind::Psys,
        _ => return None,
    };
    Some(EnergyDomain::new(kind, parent_socket.unwrap_or(0)))
}

fn discover_zones(root: &Path) -> Result<Vec<Zone>, ProbeError> {
    let top = match sorted_entries(root) {
        Ok(entries) => entries,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ProbeError::NoProbeAvailable(format!(
                "powercap tree {} not found",
                root.display()
            )))
        }
        Err(e) if e.kind() == io::ErrorKind::PermissionDenied => {
            return Err(ProbeError::PermissionDenied { path: root.to_owned() })
        }
        Err(source) => {
            return Err(ProbeError::Io {
                path: root.to_owned(),
                source,
            })
        }
    };

    let mut found: BTreeMap<EnergyDomain, Zone> = BTreeMap::new();
    let mut add = |zone_dir: &Path, parent_socket: Option<u32>| -> Result<Option<u32>, ProbeError> {
        let Ok(name) = read_trimmed(&zone_dir.join("name")) else {
            debug!("skipping {}: no readable name", zone_dir.display());
            return Ok(None);
        };
        let Some(domain) = zone_domain(&name, parent_socket) else {
            debug!("skipping {}: unrecognised zone name {name:?}", zone_dir.display());
            return Ok(None);
        };
        let max_path = zone_dir.join("max_energy_range_uj");
        let mut zone = Zone {
            domain,
            energy_path: zone_dir.join("energy_uj"),
            max_range_uj: 0,
        };
        zone.max_range_uj = read_u64(&max_path).map_err(|e| classify(&zone, e))?;
        if zone.max_range_uj == 0 {
            return Err(ProbeError::ReadFailed {
                domain,
                reason: format!("{} is zero", max_path.display()),
            });
        }
        match found.entry(domain) {
            std::collections::btree_map::Entry::Occupied(_) => {
                warn!("duplicate RAPL domain {domain} at {}; keeping the first", zone_dir.display());
            }
            std::collections::btree_map::Entry::Vacant(slot) => {
                slot.insert(zone);
            }
        }
        Ok((domain.kind == DomainKind::Package).then_some(domain.socket))
    };

    for (name, path) in &top {
        // nested zones are also linked at the top level; pick them up via their parent
        if zone_indices(name).is_none_or(|ix| ix.len() != 1) {
            continue;
        }
        let socket = add(path, None)?;
        let children = sorted_entries(path).map_err(|source| ProbeError::Io {
            path: path.clone(),
            source,
        })?;
        for (child, child_path) in &children {
            if zone_indices(child).is_some_and(|ix| ix.len() == 2) {
                add(child_path, socket)?;
            }
        }
    }

    if found.is_empty() {
        return Err(ProbeError::NoProbeAvailable(format!(
            "no RAPL zones under {}",
            root.display()
        )));
    }
    Ok(found.into_values().collect())
}
