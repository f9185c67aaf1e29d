//! Test discovery and per-test execution of protocol-speaking executables.
//!
//! Each test iteration runs in its own child process. A dedicated reader
//! thread stamps marker lines with the experiment clock as they arrive, so
//! test boundaries are measured on the same timeline as the probe.

pub mod protocol;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, ChildStdout, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
pub use protocol::{Marker, TestEvent, TestEventKind, TestId, TestStatus};
use protocol::{parse_line, CLOCK_ENV, FILTER_ENV};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarnessCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub working_dir: PathBuf,
    pub env: BTreeMap<String, String>,
    /// Appended to `args` in discovery mode.
    pub list_args: Vec<String>,
    /// Wall-clock bound on any single harness process.
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
}

impl HarnessCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
            working_dir: PathBuf::from("."),
            env: BTreeMap::new(),
            list_args: Vec::new(),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.program.as_os_str().is_empty() {
            return Err(HarnessError::InvalidCommand("harness program is empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(HarnessError::InvalidCommand("harness timeout must be > 0".into()));
        }
        Ok(())
    }

    fn command(&self, args: &[String], clock: Option<&Clock>) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(args)
            .current_dir(&self.working_dir)
            .env_remove(FILTER_ENV)
            .env_remove(CLOCK_ENV)
            .envs(&self.env)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if clock.is_some_and(Clock::is_virtual) {
            cmd.env(CLOCK_ENV, "virtual");
        }
        cmd
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(u64::try_from(d.as_millis()).unwrap_or(u64::MAX))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid harness command: {0}")]
    InvalidCommand(String),
    #[error("failed to launch harness {}: {source}", program.display())]
    SpawnFailed {
        program: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("harness discovery exited with {status}")]
    DiscoveryFailed { status: String },
    #[error("harness discovery timed out after {0:?}")]
    DiscoveryTimedOut(Duration),
    #[error("harness protocol error: {0}")]
    Protocol(String),
    #[error("protocol violation running {test}: {reason}")]
    ProtocolViolation { test: TestId, reason: String },
    #[error("{test} crashed before END ({})", crash_reason(*.exit_code, *.timed_out))]
    TestCrashed {
        test: TestId,
        /// Clock time of BEGIN, if it arrived.
        begin_ns: Option<u64>,
        /// Clock time at which the crash (EOF or timeout) was observed.
        end_ns: u64,
        exit_code: Option<i32>,
        timed_out: bool,
    },
}

fn crash_reason(exit_code: Option<i32>, timed_out: bool) -> String {
    match (timed_out, exit_code) {
        (true, _) => "timed out, killed".into(),
        (false, Some(c)) => format!("exit code {c}"),
        (false, None) => "killed by signal".into(),
    }
}

enum ReaderMsg {
    Event(TestEvent),
    Malformed(String),
    Closed,
}

fn spawn_reader(stdout: ChildStdout, clock: Clock) -> (Receiver<ReaderMsg>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel();
    let join = thread::Builder::new()
        .name("manai-harness-reader".into())
        .spawn(move || {
            let mut reader = BufReader::new(stdout);
            let mut buf = Vec::new();
            loop {
                buf.clear();
                match reader.read_until(b'\n', &mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {}
                }
                let timestamp_ns = clock.now_ns();
                let text = String::from_utf8_lossy(&buf);
                let line = text.strip_suffix('\n').unwrap_or(&text);
                let (kind, test) = match parse_line(line) {
                    Ok(None) => continue,
                    Ok(Some(Marker::Advance(ns))) => {
                        if clock.is_virtual() {
                            clock.advance_by(ns);
                        } else {
                            debug!("ignoring ADVANCE on a real-time clock");
                        }
                        continue;
                    }
                    Ok(Some(Marker::Test(id))) => (TestEventKind::Declared, id),
                    Ok(Some(Marker::Begin(id))) => (TestEventKind::Begin, id),
                    Ok(Some(Marker::End(id, st))) => (TestEventKind::End(st), id),
                    Err(e) => {
                        let _ = tx.send(ReaderMsg::Malformed(e.0));
                        continue;
                    }
                };
                let event = TestEvent {
                    kind,
                    test,
                    timestamp_ns,
                };
                if tx.send(ReaderMsg::Event(event)).is_err() {
                    break;
                }
            }
            let _ = tx.send(ReaderMsg::Closed);
        })
        .expect("spawn harness reader thread");
    (rx, join)
}

struct Session {
    child: Child,
    rx: Receiver<ReaderMsg>,
    reader: Option<JoinHandle<()>>,
    deadline: Instant,
}

enum Next {
    Msg(ReaderMsg),
    TimedOut,
}

impl Session {
    fn start(cmd: &HarnessCommand, args: &[String], clock: Clock, filter: Option<&TestId>) -> Result<Self, HarnessError> {
        cmd.validate()?;
        let mut command = cmd.command(args, Some(&clock));
        if let Some(test) = filter {
            command.env(FILTER_ENV, test.to_string());
        }
        let mut child = command.spawn().map_err(|source| HarnessError::SpawnFailed {
            program: cmd.program.clone(),
            source,
        })?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let (rx, reader) = spawn_reader(stdout, clock);
        Ok(Self {
            child,
            rx,
            reader: Some(reader),
            deadline: Instant::now() + cmd.timeout,
        })
    }

    fn next(&self) -> Next {
        let remaining = self.deadline.saturating_duration_since(Instant::now());
        match self.rx.recv_timeout(remaining) {
            Ok(msg) => Next::Msg(msg),
            Err(RecvTimeoutError::Timeout) => Next::TimedOut,
            Err(RecvTimeoutError::Disconnected) => Next::Msg(ReaderMsg::Closed),
        }
    }

    /// Waits for exit within the remaining time budget; kills on overrun.
    fn wait(&mut self) -> (Option<ExitStatus>, bool) {
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => return (Some(status), false),
                Ok(None) if Instant::now() >= self.deadline => {
                    self.kill();
                    return (self.child.wait().ok(), true);
                }
                Ok(None) => thread::sleep(Duration::from_millis(1)),
                Err(_) => return (None, false),
            }
        }
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            self.kill();
        }
        let _ = self.child.wait();
        if let Some(reader) = self.reader.take() {
            let _ = reader.join();
        }
    }
}

/// Lists the tests a harness declares, in declaration order without duplicates.
pub fn discover(cmd: &HarnessCommand) -> Result<Vec<TestId>, HarnessError> {
    let args: Vec<String> = cmd.args.iter().chain(&cmd.list_args).cloned().collect();
    let mut session = Session::start(cmd, &args, Clock::monotonic(), None)?;
    let mut tests = Vec::new();
    let mut seen = HashSet::new();
    let mut folded: HashMap<String, TestId> = HashMap::new();
    loop {
        match session.next() {
            Next::TimedOut => {
                session.kill();
                return Err(HarnessError::DiscoveryTimedOut(cmd.timeout));
            }
            Next::Msg(ReaderMsg::Closed) => break,
            Next::Msg(ReaderMsg::Malformed(line)) => {
                if line.starts_with("##MANAI:TEST") {
                    return Err(HarnessError::Protocol(format!("malformed declaration `{line}`")));
                }
            }
            Next::Msg(ReaderMsg::Event(ev)) => {
                if ev.kind != TestEventKind::Declared || !seen.insert(ev.test.clone()) {
                    continue;
                }
                let key = ev.test.to_string().to_lowercase();
                if let Some(prev) = folded.get(&key) {
                    warn!("test {} differs from {} only by case", ev.test, prev);
                } else {
                    folded.insert(key, ev.test.clone());
                }
                tests.push(ev.test);
            }
        }
    }
    match session.wait() {
        (_, true) => Err(HarnessError::DiscoveryTimedOut(cmd.timeout)),
        (Some(status), false) if status.success() => Ok(tests),
        (Some(status), false) => Err(HarnessError::DiscoveryFailed {
            status: status.to_string(),
        }),
        (None, false) => Err(HarnessError::DiscoveryFailed {
            status: "unknown status".into(),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    pub begin_ns: u64,
    pub end_ns: u64,
    pub status: TestStatus,
}

impl RunOutcome {
    pub fn duration_ns(&self) -> u64 {
        self.end_ns - self.begin_ns
    }
}

/// Runs a single test in a fresh harness process with `MANAI_FILTER` set.
pub fn run_one(cmd: &HarnessCommand, test: &TestId, clock: &Clock) -> Result<RunOutcome, HarnessError> {
    let mut session = Session::start(cmd, &cmd.args, clock.clone(), Some(test))?;
    let violation = |reason: String| HarnessError::ProtocolViolation {
        test: test.clone(),
        reason,
    };
    let mut begin: Option<u64> = None;
    let mut outcome: Option<RunOutcome> = None;

    loop {
        let msg = match session.next() {
            Next::Msg(msg) => msg,
            Next::TimedOut => {
                let end_ns = clock.now_ns();
                session.kill();
                if let Some(done) = outcome {
                    warn!("{test}: harness did not exit after END; killed");
                    return Ok(done);
                }
                let (status, _) = session.wait();
                return Err(HarnessError::TestCrashed {
                    test: test.clone(),
                    begin_ns: begin,
                    end_ns,
                    exit_code: status.and_then(|s| s.code()),
                    timed_out: true,
                });
            }
        };
        match msg {
            ReaderMsg::Closed => break,
            ReaderMsg::Malformed(line) => {
                session.kill();
                return Err(violation(format!("malformed line `{line}`")));
            }
            ReaderMsg::Event(ev) => match ev.kind {
                TestEventKind::Declared => {}
                _ if ev.test != *test => {
                    session.kill();
                    return Err(violation(format!("marker for unexpected test {}", ev.test)));
                }
                TestEventKind::Begin => {
                    if begin.is_some() {
                        session.kill();
                        return Err(violation("more than one BEGIN".into()));
                    }
                    begin = Some(ev.timestamp_ns);
                }
                TestEventKind::End(status) => {
                    let Some(begin_ns) = begin else {
                        session.kill();
                        return Err(violation("END without BEGIN".into()));
                    };
                    if outcome.is_some() {
                        session.kill();
                        return Err(violation("more than one END".into()));
                    }
                    if ev.timestamp_ns <= begin_ns {
                        session.kill();
                        return Err(violation(
                            "END not after BEGIN (zero elapsed time; a virtual-clock harness must emit ADVANCE)".into(),
                        ));
                    }
                    outcome = Some(RunOutcome {
                        begin_ns,
                        end_ns: ev.timestamp_ns,
                        status,
                    });
                }
            },
        }
    }

    let closed_ns = clock.now_ns();
    let (status, timed_out) = session.wait();
    let exited_cleanly = status.is_some_and(|s| s.success()) && !timed_out;
    match outcome {
        Some(done) => {
            if let Some(s) = status.filter(|s| !s.success()) {
                warn!("{test}: harness exited with {s} after END");
            }
            Ok(done)
        }
        None if begin.is_none() && exited_cleanly => Err(violation("harness exited without BEGIN".into())),
        None => Err(HarnessError::TestCrashed {
            test: test.clone(),
            begin_ns: begin,
            end_ns: closed_ns,
            exit_code: status.and_then(|s| s.code()),
            timed_out,
        }),
    }
}
