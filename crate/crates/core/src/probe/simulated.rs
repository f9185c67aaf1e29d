use std::collections::BTreeMap;

use super::{Backend, Counter, Probe, ProbeDescriptor, ProbeError, ProbeReading, SimulationScenario};
use crate::clock::Clock;

/// Deterministic probe whose counters are a pure function of clock time.
#[derive(Debug)]
pub struct SimulatedProbe {
    scenario: SimulationScenario,
    descriptor: ProbeDescriptor,
    clock: Clock,
    last_ts: Option<u64>,
}

impl SimulatedProbe {
    pub fn new(scenario: SimulationScenario, clock: Clock) -> Self {
        let descriptor = ProbeDescriptor {
            backend: Backend::Simulated,
            domains: scenario.domains().to_vec(),
            update_interval_ns: scenario.update_interval_ns(),
        };
        Self {
            scenario,
            descriptor,
            clock,
            last_ts: None,
        }
    }

    pub fn scenario(&self) -> &SimulationScenario {
        &self.scenario
    }

    /// The reading the probe reports at clock time `t_ns`.
    pub fn reading_at(&self, t_ns: u64) -> ProbeReading {
        let counters: BTreeMap<_, _> = self
            .scenario
            .domains()
            .iter()
            .map(|d| {
                (
                    *d,
                    Counter {
                        value_uj: self.scenario.counter_uj(d, t_ns),
                        max_range_uj: self.scenario.max_range_uj(),
                    },
                )
            })
            .collect();
        ProbeReading {
            timestamp_ns: t_ns,
            counters,
        }
    }
}

impl Probe for SimulatedProbe {
    fn descriptor(&self) -> &ProbeDescriptor {
        &self.descriptor
    }

    fn read(&mut self) -> Result<ProbeReading, ProbeError> {
        let mut t = self.clock.now_ns();
        // session timestamps are strictly increasing even on a stalled virtual clock
        if let Some(last) = self.last_ts {
            if t <= last {
                t = last + 1;
            }
        }
        self.last_ts = Some(t);
        Ok(self.reading_at(t))
    }
}
