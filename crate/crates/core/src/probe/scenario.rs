//! Piecewise-constant power scenarios for the simulated probe.
//!
//! File format:
//!
//! ```text
//! # comment
//! update_interval_ns=1000000
//! max_range_uj=262143328850
//! duration_ns=1000000000 package=5 core=2.5
//! duration_ns=500000000 package=10
//! ```
//!
//! Header keys may share a line or sit on separate lines but must precede the
//! first segment. Domains absent from a segment draw 0 W there. The final
//! segment's power persists past the end of the scenario.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use super::{EnergyDomain, ProbeError};

const NANOS_PER_SEC: u128 = 1_000_000_000;
/// microwatt x nanosecond = femtojoule; femtojoules per microjoule.
const FJ_PER_UJ: u128 = 1_000_000_000;

/// Power in integer microwatts so integrals are exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Power(u64);

impl Power {
    pub const ZERO: Power = Power(0);

    pub const fn from_microwatts(uw: u64) -> Self {
        Power(uw)
    }

    /// Rounds to the nearest microwatt. Returns `None` for negative or non-finite input.
    pub fn from_watts(w: f64) -> Option<Self> {
        if !w.is_finite() || w < 0.0 {
            return None;
        }
        Some(Power((w * 1e6).round() as u64))
    }

    pub fn microwatts(self) -> u64 {
        self.0
    }

    pub fn watts(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Parses a plain decimal wattage (`5`, `2.5`, `0.000125`) without rounding.
    fn parse_decimal(s: &str) -> Result<Self, String> {
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
        if s.starts_with('-') {
            return Err(format!("negative power `{s}`"));
        }
        if int.is_empty() && frac.is_empty() || !digits(int) || !digits(frac) {
            return Err(format!("invalid power `{s}` (expected a non-negative decimal in watts)"));
        }
        if frac.len() > 6 {
            return Err(format!("power `{s}` has more than 6 decimal places"));
        }
        let int_uw = if int.is_empty() {
            0
        } else {
            int.parse::<u64>()
                .ok()
                .and_then(|w| w.checked_mul(1_000_000))
                .ok_or_else(|| format!("power `{s}` out of range"))?
        };
        let frac_uw = if frac.is_empty() {
            0
        } else {
            frac.parse::<u64>().map_err(|e| e.to_string())? * 10u64.pow(6 - frac.len() as u32)
        };
        Ok(Power(int_uw + frac_uw))
    }
}

impl fmt::Display for Power {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let int = self.0 / 1_000_000;
        let frac = self.0 % 1_000_000;
        if frac == 0 {
            write!(f, "{int}")
        } else {
            let s = format!("{frac:06}");
            write!(f, "{int}.{}", s.trim_end_matches('0'))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub duration_ns: u64,
    pub power: BTreeMap<EnergyDomain, Power>,
}

impl Segment {
    pub fn new(duration_ns: u64, power: impl IntoIterator<Item = (EnergyDomain, Power)>) -> Self {
        Self {
            duration_ns,
            power: power.into_iter().collect(),
        }
    }

    fn power_of(&self, domain: &EnergyDomain) -> u128 {
        self.power.get(domain).map_or(0, |p| p.0 as u128)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimulationScenario {
    segments: Vec<Segment>,
    max_range_uj: u64,
    update_interval_ns: u64,
    domains: Vec<EnergyDomain>,
}

impl SimulationScenario {
    pub fn new(
        segments: Vec<Segment>,
        max_range_uj: u64,
        update_interval_ns: u64,
    ) -> Result<Self, String> {
        if segments.is_empty() {
            return Err("scenario has no segments".into());
        }
        if max_range_uj == 0 {
            return Err("max_range_uj must be > 0".into());
        }
        if update_interval_ns == 0 {
            return Err("update_interval_ns must be > 0".into());
        }
        if let Some(i) = segments.iter().position(|s| s.duration_ns == 0) {
            return Err(format!("segment {} has zero duration", i + 1));
        }
        let domains: BTreeSet<EnergyDomain> = segments
            .iter()
            .flat_map(|s| s.power.keys().copied())
            .collect();
        if domains.is_empty() {
            return Err("scenario defines no power domains".into());
        }
        Ok(Self {
            segments,
            max_range_uj,
            update_interval_ns,
            domains: domains.into_iter().collect(),
        })
    }

    /// A single never-ending segment of constant power.
    pub fn constant(
        power: impl IntoIterator<Item = (EnergyDomain, Power)>,
        max_range_uj: u64,
        update_interval_ns: u64,
    ) -> Result<Self, String> {
        Self::new(
            vec![Segment::new(NANOS_PER_SEC as u64, power)],
            max_range_uj,
            update_interval_ns,
        )
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProbeError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ProbeError> {
        let malformed = |line: usize, message: String| ProbeError::MalformedScenario { line, message };
        let mut update_interval = None;
        let mut max_range = None;
        let mut segments = Vec::new();
        let mut last_line = 0;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            last_line = lineno;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut duration = None;
            let mut power = BTreeMap::new();
            let mut header_keys = 0;
            for token in line.split_whitespace() {
                let (key, value) = token
                    .split_once('=')
                    .ok_or_else(|| malformed(lineno, format!("expected key=value, found `{token}`")))?;
                let int = |v: &str| {
                    v.parse::<u64>()
                        .map_err(|_| malformed(lineno, format!("`{key}` needs a non-negative integer, found `{v}`")))
                };
                match key {
                    "update_interval_ns" | "max_range_uj" => {
                        if !segments.is_empty() || duration.is_some() || !power.is_empty() {
                            return Err(malformed(lineno, format!("header key `{key}` after segment data")));
                        }
                        let slot = if key == "update_interval_ns" {
                            &mut update_interval
                        } else {
                            &mut max_range
                        };
                        if slot.replace(int(value)?).is_some() {
                            return Err(malformed(lineno, format!("duplicate `{key}`")));
                        }
                        header_keys += 1;
                    }
                    "duration_ns" => {
                        if header_keys > 0 {
                            return Err(malformed(lineno, "segment data on a header line".into()));
                        }
                        if duration.replace(int(value)?).is_some() {
                            return Err(malformed(lineno, "duplicate `duration_ns`".into()));
                        }
                    }
                    other => {
                        if header_keys > 0 {
                            return Err(malformed(lineno, "segment data on a header line".into()));
                        }
                        let domain: EnergyDomain = other
                            .parse()
                            .map_err(|_| malformed(lineno, format!("unknown key `{other}`")))?;
                        let watts = Power::parse_decimal(value).map_err(|m| malformed(lineno, m))?;
                        if power.insert(domain, watts).is_some() {
                            return Err(malformed(lineno, format!("duplicate domain `{other}`")));
                        }
                    }
                }
            }
            if header_keys > 0 {
                continue;
            }
            let duration_ns =
                duration.ok_or_else(|| malformed(lineno, "segment is missing `duration_ns`".into()))?;
            if duration_ns == 0 {
                return Err(malformed(lineno, "segment duration must be > 0".into()));
            }
            segments.push(Segment { duration_ns, power });
        }

        let update_interval_ns = update_interval
            .ok_or_else(|| malformed(last_line, "missing header `update_interval_ns`".into()))?;
        let max_range_uj =
            max_range.ok_or_else(|| malformed(last_line, "missing header `max_range_uj`".into()))?;
        Self::new(segments, max_range_uj, update_interval_ns).map_err(|m| malformed(last_line, m))
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn domains(&self) -> &[EnergyDomain] {
        &self.domains
    }

    pub fn max_range_uj(&self) -> u64 {
        self.max_range_uj
    }

    pub fn update_interval_ns(&self) -> u64 {
        self.update_interval_ns
    }

    pub fn total_duration_ns(&self) -> u64 {
        self.segments.iter().map(|s| s.duration_ns).sum()
    }

    /// Peak power of any domain in any segment, in watts.
    pub fn peak_power_w(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.power.values())
            .map(|p| p.watts())
            .fold(0.0, f64::max)
    }

    /// Exact energy integral over `[0, t_ns]` in femtojoules, unquantized.
    pub fn energy_fj(&self, domain: &EnergyDomain, t_ns: u64) -> u128 {
        let mut remaining = t_ns as u128;
        let mut total = 0u128;
        for (i, seg) in self.segments.iter().enumerate() {
            let last = i + 1 == self.segments.len();
            let span = if last {
                remaining
            } else {
                remaining.min(seg.duration_ns as u128)
            };
            total += seg.power_of(domain) * span;
            remaining -= span;
            if remaining == 0 {
                break;
            }
        }
        total
    }

    /// Counter value at `t_ns`: the integral up to the last counter refresh,
    /// floored to whole microjoules and reduced modulo the counter range.
    pub fn counter_uj(&self, domain: &EnergyDomain, t_ns: u64) -> u64 {
        let refreshed = t_ns - t_ns % self.update_interval_ns;
        let uj = self.energy_fj(domain, refreshed) / FJ_PER_UJ;
        (uj % self.max_range_uj as u128) as u64
    }
}

impl fmt::Display for SimulationScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "update_interval_ns={}", self.update_interval_ns)?;
        writeln!(f, "max_range_uj={}", self.max_range_uj)?;
        for seg in &self.segments {
            write!(f, "duration_ns={}", seg.duration_ns)?;
            for (d, p) in &seg.power {
                write!(f, " {d}={p}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
