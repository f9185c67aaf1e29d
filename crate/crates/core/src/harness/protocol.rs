//! Line-oriented marker protocol spoken by test executables on stdout.
//!
//! ```text
//! ##MANAI:TEST <suite>::<name>
//! ##MANAI:BEGIN <suite>::<name>
//! ##MANAI:END <suite>::<name> <PASS|FAIL|SKIP>
//! ```
//!
//! When the harness is started with `MANAI_CLOCK=virtual` it may also emit
//! `##MANAI:ADVANCE <ns>` to report elapsed virtual time instead of working
//! for real. Lines without the `##MANAI:` prefix are ignored, as are prefixed
//! lines with an unknown tag.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const PREFIX: &str = "##MANAI:";
/// Names the single test a run-mode harness must execute.
pub const FILTER_ENV: &str = "MANAI_FILTER";
/// Set to `virtual` when the harness should report time via `ADVANCE`.
pub const CLOCK_ENV: &str = "MANAI_CLOCK";

const SEPARATOR: &str = "::";

/// `<suite>::<name>`; neither part is empty, contains whitespace or `::`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TestId {
    suite: String,
    name: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid test id `{0}` (expected <suite>::<name> without whitespace)")]
pub struct InvalidTestId(pub String);

impl TestId {
    pub fn new(suite: impl Into<String>, name: impl Into<String>) -> Result<Self, InvalidTestId> {
        let (suite, name) = (suite.into(), name.into());
        let ok = |p: &str| !p.is_empty() && !p.contains(SEPARATOR) && !p.chars().any(char::is_whitespace);
        if ok(&suite) && ok(&name) {
            Ok(Self { suite, name })
        } else {
            Err(InvalidTestId(format!("{suite}{SEPARATOR}{name}")))
        }
    }

    pub fn suite(&self) -> &str {
        &self.suite
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{SEPARATOR}{}", self.suite, self.name)
    }
}

impl FromStr for TestId {
    type Err = InvalidTestId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (suite, name) = s.split_once(SEPARATOR).ok_or_else(|| InvalidTestId(s.to_owned()))?;
        TestId::new(suite, name).map_err(|_| InvalidTestId(s.to_owned()))
    }
}

impl Serialize for TestId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TestId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestStatus {
    Pass,
    Fail,
    Skip,
}

impl TestStatus {
    pub fn as_wire(self) -> &'static str {
        match self {
            TestStatus::Pass => "PASS",
            TestStatus::Fail => "FAIL",
            TestStatus::Skip => "SKIP",
        }
    }

    fn from_wire(s: &str) -> Option<Self> {
        match s {
            "PASS" => Some(TestStatus::Pass),
            "FAIL" => Some(TestStatus::Fail),
            "SKIP" => Some(TestStatus::Skip),
            _ => None,
        }
    }
}

impl fmt::Display for TestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_wire())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Marker {
    Test(TestId),
    Begin(TestId),
    End(TestId, TestStatus),
    Advance(u64),
}

impl fmt::Display for Marker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Marker::Test(id) => write!(f, "{PREFIX}TEST {id}"),
            Marker::Begin(id) => write!(f, "{PREFIX}BEGIN {id}"),
            Marker::End(id, st) => write!(f, "{PREFIX}END {id} {st}"),
            Marker::Advance(ns) => write!(f, "{PREFIX}ADVANCE {ns}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed protocol line `{0}`")]
pub struct MalformedLine(pub String);

/// Parses one stdout line (without its `\n`). `Ok(None)` means "not for us".
pub fn parse_line(line: &str) -> Result<Option<Marker>, MalformedLine> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let Some(body) = line.strip_prefix(PREFIX) else {
        return Ok(None);
    };
    let bad = || MalformedLine(line.to_owned());
    let mut parts = body.split(' ');
    let tag = parts.next().unwrap_or("");
    let args: Vec<&str> = parts.collect();
    let id = |s: &str| s.parse::<TestId>().map_err(|_| bad());
    let marker = match (tag, args.as_slice()) {
        ("TEST", [test]) => Marker::Test(id(test)?),
        ("BEGIN", [test]) => Marker::Begin(id(test)?),
        ("END", [test, status]) => Marker::End(id(test)?, TestStatus::from_wire(status).ok_or_else(bad)?),
        ("ADVANCE", [ns]) => Marker::Advance(ns.parse().map_err(|_| bad())?),
        ("TEST" | "BEGIN" | "END" | "ADVANCE", _) => return Err(bad()),
        (other, _) => {
            log::debug!("ignoring unknown marker tag {other:?}");
            return Ok(None);
        }
    };
    Ok(Some(marker))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestEventKind {
    Declared,
    Begin,
    End(TestStatus),
}

/// A marker as observed by the parent, stamped on arrival.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestEvent {
    pub kind: TestEventKind,
    pub test: TestId,
    pub timestamp_ns: u64,
}

impl TestEvent {
    pub fn status(&self) -> Option<TestStatus> {
        match self.kind {
            TestEventKind::End(s) => Some(s),
            _ => None,
        }
    }
}
