//! Reference harness speaking the marker protocol, used by the test suites.
//!
//! ```text
//! manai-fixture [--list] [--noise-file PATH] <suite>::<name>[=<action>,...] ...
//! ```
//!
//! Actions: `sleep:<dur>`, `busy:<dur>` (durations like `500ms`, `0.5ms`, `2s`,
//! `750us`, `10ns`), `status:<pass|fail|skip>`, `crash` (exit 3 after BEGIN),
//! `hang` (block forever after BEGIN), `nobegin` (exit without markers),
//! `mismatch` (BEGIN/END under a different id).
//!
//! Under `MANAI_CLOCK=virtual`, sleeps and busy loops are reported with
//! `##MANAI:ADVANCE <ns>` instead of being performed.

use std::io::{self, Write};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use manai::harness::protocol::{Marker, CLOCK_ENV, FILTER_ENV};
use manai::harness::{TestId, TestStatus};

#[derive(Debug, Clone)]
enum Action {
    Sleep(Duration),
    Busy(Duration),
    Status(TestStatus),
    Crash,
    Hang,
    NoBegin,
    Mismatch,
}

#[derive(Debug, Clone)]
struct FixtureTest {
    id: TestId,
    actions: Vec<Action>,
}

fn parse_duration(s: &str) -> Result<Duration, String> {
    let split = s
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .ok_or_else(|| format!("duration `{s}` needs a unit"))?;
    let (num, unit) = s.split_at(split);
    let value: f64 = num.parse().map_err(|_| format!("bad duration `{s}`"))?;
    let scale = match unit {
        "ns" => 1.0,
        "us" => 1e3,
        "ms" => 1e6,
        "s" => 1e9,
        _ => return Err(format!("unknown duration unit `{unit}`")),
    };
    Ok(Duration::from_nanos((value * scale).round() as u64))
}

fn parse_test(def: &str) -> Result<FixtureTest, String> {
    let (id, actions) = def.split_once('=').unwrap_or((def, ""));
    let id: TestId = id.parse().map_err(|e| format!("{e}"))?;
    let actions = actions
        .split(',')
        .filter(|a| !a.is_empty())
        .map(|a| {
            let (verb, arg) = a.split_once(':').unwrap_or((a, ""));
            Ok(match verb {
                "sleep" => Action::Sleep(parse_duration(arg)?),
                "busy" => Action::Busy(parse_duration(arg)?),
                "status" => Action::Status(match arg {
                    "pass" => TestStatus::Pass,
                    "fail" => TestStatus::Fail,
                    "skip" => TestStatus::Skip,
                    other => return Err(format!("unknown status `{other}`")),
                }),
                "crash" => Action::Crash,
                "hang" => Action::Hang,
                "nobegin" => Action::NoBegin,
                "mismatch" => Action::Mismatch,
                other => return Err(format!("unknown action `{other}`")),
            })
        })
        .collect::<Result<_, String>>()?;
    Ok(FixtureTest { id, actions })
}

struct Out {
    noise: Vec<String>,
    next_noise: usize,
}

impl Out {
    fn line(&self, text: &str) {
        let mut out = io::stdout().lock();
        let _ = writeln!(out, "{text}");
        let _ = out.flush();
    }

    fn marker(&self, m: Marker) {
        self.line(&m.to_string());
    }

    /// Emits the next `n` noise lines (wrapping around).
    fn noise(&mut self, n: usize) {
        if self.noise.is_empty() {
            return;
        }
        for _ in 0..n {
            let line = self.noise[self.next_noise % self.noise.len()].clone();
            self.line(&line);
            self.next_noise += 1;
        }
    }

    fn chunk(&self) -> usize {
        self.noise.len().div_ceil(3)
    }
}

fn spend(out: &Out, d: Duration, busy: bool, virtual_clock: bool) {
    if virtual_clock {
        out.marker(Marker::Advance(u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)));
    } else if busy {
        let start = Instant::now();
        let mut x = 0u64;
        while start.elapsed() < d {
            x = std::hint::black_box(x.wrapping_mul(6364136223846793005).wrapping_add(1));
        }
    } else {
        std::thread::sleep(d);
    }
}

fn run_test(out: &mut Out, test: &FixtureTest, virtual_clock: bool) -> Option<ExitCode> {
    let mut status = TestStatus::Pass;
    let mut id = test.id.clone();
    if test.actions.iter().any(|a| matches!(a, Action::NoBegin)) {
        return Some(ExitCode::SUCCESS);
    }
    if test.actions.iter().any(|a| matches!(a, Action::Mismatch)) {
        id = TestId::new(id.suite(), format!("{}_other", id.name())).expect("valid id");
    }
    let chunk = out.chunk();
    out.noise(chunk);
    out.marker(Marker::Begin(id.clone()));
    out.noise(chunk);
    for action in &test.actions {
        match action {
            Action::Sleep(d) => spend(out, *d, false, virtual_clock),
            Action::Busy(d) => spend(out, *d, true, virtual_clock),
            Action::Status(s) => status = *s,
            Action::Crash => return Some(ExitCode::from(3)),
            Action::Hang => loop {
                std::thread::sleep(Duration::from_secs(3600));
            },
            Action::NoBegin | Action::Mismatch => {}
        }
    }
    out.marker(Marker::End(id, status));
    out.noise(chunk);
    None
}

fn main() -> ExitCode {
    let mut list = false;
    let mut noise_file = None;
    let mut tests = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        match arg.as_str() {
            "--list" => list = true,
            "--noise-file" => noise_file = args.next(),
            def => match parse_test(def) {
                Ok(t) => tests.push(t),
                Err(e) => {
                    eprintln!("manai-fixture: {e}");
                    return ExitCode::from(2);
                }
            },
        }
    }
    let noise = match noise_file {
        Some(path) => match std::fs::read(&path) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).lines().map(str::to_owned).collect(),
            Err(e) => {
                eprintln!("manai-fixture: {path}: {e}");
                return ExitCode::from(2);
            }
        },
        None => Vec::new(),
    };
    let mut out = Out { noise, next_noise: 0 };

    if list {
        let per_test = out.noise.len() / tests.len().max(1);
        for t in &tests {
            out.noise(per_test);
            out.marker(Marker::Test(t.id.clone()));
        }
        let rest = out.noise.len() - per_test * tests.len();
        out.noise(rest);
        return ExitCode::SUCCESS;
    }

    let virtual_clock = std::env::var(CLOCK_ENV).is_ok_and(|v| v == "virtual");
    let selected: Vec<&FixtureTest> = match std::env::var(FILTER_ENV) {
        Ok(filter) => {
            let found: Vec<_> = tests.iter().filter(|t| t.id.to_string() == filter).collect();
            if found.is_empty() {
                eprintln!("manai-fixture: unknown test `{filter}`");
                return ExitCode::from(2);
            }
            found
        }
        Err(_) => tests.iter().collect(),
    };
    for t in selected {
        if let Some(code) = run_test(&mut out, t, virtual_clock) {
            return code;
        }
    }
    ExitCode::SUCCESS
}
