//! Independent checks shared by the property and acceptance suites.

use std::collections::BTreeMap;

use num::rational::BigRational;
use num::Zero;
use rand::Rng;

use manai::clock::Clock;
use manai::experiment::attribute_exact;
use manai::probe::{EnergyDomain, Power, Segment, SimulatedProbe, SimulationScenario};
use manai::sampler::{wrap_delta, EnergySample, SamplerConfig, SamplerHandle};

use super::{DRAM, MS, PKG, SEC};

const FJ_PER_UJ: u128 = 1_000_000_000;

/// Counts single steps from `before` to `after` on a counter of size `max`.
pub fn step_oracle(before: u64, after: u64, max: u64) -> u64 {
    let mut c = before;
    let mut steps = 0;
    while c != after {
        c = (c + 1) % max;
        steps += 1;
    }
    steps
}

/// Every `(before, after)` pair below `max` agrees with the stepping oracle.
pub fn wrap_exhaustive(max: u64) -> Result<(), String> {
    for before in 0..max {
        for after in 0..max {
            let got = wrap_delta(before, after, max);
            let want = step_oracle(before, after, max);
            if got != want {
                return Err(format!("wrap_delta({before}, {after}, {max}) = {got}, oracle {want}"));
            }
        }
    }
    Ok(())
}

/// A randomized piecewise-constant scenario with a small counter range, plus a
/// sampling rate that keeps every period below one wrap.
pub struct RandomRun {
    pub scenario: SimulationScenario,
    pub rate_hz: f64,
    pub window_ns: u64,
}

pub fn random_run<R: Rng>(rng: &mut R) -> RandomRun {
    let domains = [PKG, DRAM];
    let segments: Vec<Segment> = (0..rng.gen_range(1..6))
        .map(|_| {
            let mut power = Vec::new();
            for d in domains {
                if rng.gen_bool(0.8) {
                    power.push((d, Power::from_microwatts(rng.gen_range(0..60_000_000))));
                }
            }
            Segment::new(rng.gen_range(1..300) * MS + rng.gen_range(0..MS), power)
        })
        .collect();
    let mut segments = segments;
    // Every domain appears somewhere.
    segments[0].power.entry(PKG).or_insert(Power::from_microwatts(1));
    segments[0].power.entry(DRAM).or_insert(Power::from_microwatts(1));
    let rate_hz = [20.0, 50.0, 100.0, 250.0, 1000.0, 333.3][rng.gen_range(0..6)];
    let update_interval_ns = rng.gen_range(1..=5) * MS / [1, 2, 4][rng.gen_range(0..3)];
    let peak_w = segments
        .iter()
        .flat_map(|s| s.power.values())
        .map(|p| p.watts())
        .fold(0.0, f64::max);
    // Smallest range that still admits one period plus one refresh at the
    // plausibility bound, so most runs wrap.
    let span_s = 1.0 / rate_hz + update_interval_ns as f64 / SEC as f64;
    let per_period_uj = (peak_w * 1.5 * span_s * 1e6).ceil() as u64 + 1;
    let max_range_uj = per_period_uj + rng.gen_range(1..(per_period_uj * 4 + 2));
    let scenario = SimulationScenario::new(segments, max_range_uj, update_interval_ns).expect("valid scenario");
    RandomRun {
        scenario,
        rate_hz,
        window_ns: rng.gen_range(SEC / 20..2 * SEC),
    }
}

/// Samples `run` on a virtual clock until the window is covered.
pub fn sample_run(run: &RandomRun) -> Vec<EnergySample> {
    let clock = Clock::new_virtual();
    let probe = Box::new(SimulatedProbe::new(run.scenario.clone(), clock.clone()));
    let mut config = SamplerConfig::new(run.rate_hz);
    config.max_plausible_power_w = run.scenario.peak_power_w().max(1e-6) * 1.5;
    let mut handle = SamplerHandle::spawn(probe, config, &clock).unwrap_or_else(|(_, e)| panic!("{e}"));
    let end = handle.deadline_covering(run.window_ns);
    clock.pass_until(end);
    assert!(handle.collect_until(run.window_ns));
    let (_probe, samples) = handle.finish();
    samples.expect("sampling succeeds")
}

/// Sample raw deltas sum to the counter delta across the whole stream, and
/// to the unwrapped integral of the scenario between the refreshed endpoints.
pub fn conservation(run: &RandomRun, samples: &[EnergySample]) -> Result<(), String> {
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err("no samples".into()),
    };
    for w in samples.windows(2) {
        if w[0].end_ns != w[1].start_ns {
            return Err(format!("gap between {} and {}", w[0].end_ns, w[1].start_ns));
        }
    }
    let sc = &run.scenario;
    let max = sc.max_range_uj();
    let q = sc.update_interval_ns();
    for d in sc.domains() {
        let sum: u128 = samples.iter().map(|s| s.domains[d].raw_uj as u128).sum();
        let counter = |t: u64| {
            let uj = sc.energy_fj(d, t - t % q) / FJ_PER_UJ;
            (uj, (uj % max as u128) as u64)
        };
        let (abs_first, c_first) = counter(first.start_ns);
        let (abs_last, c_last) = counter(last.end_ns);
        if sum != abs_last - abs_first {
            return Err(format!("{d}: samples sum to {sum} uJ, integral says {}", abs_last - abs_first));
        }
        let delta = wrap_delta(c_first, c_last, max) as u128;
        if sum % max as u128 != delta || (sum < max as u128 && sum != delta) {
            return Err(format!("{d}: samples sum to {sum} uJ, wrap_delta {delta} (range {max})"));
        }
    }
    Ok(())
}

/// Attributing over any partition of a window sums exactly to the whole.
pub fn telescopes<R: Rng>(rng: &mut R, samples: &[EnergySample]) -> Result<(), String> {
    let lo = samples.first().map_or(0, |s| s.start_ns);
    let hi = samples.last().map_or(1, |s| s.end_ns);
    let begin = rng.gen_range(lo.saturating_sub(MS)..hi);
    let end = rng.gen_range(begin + 1..=hi + MS);
    let mut cuts: Vec<u64> = (0..rng.gen_range(0..20)).map(|_| rng.gen_range(begin..=end)).collect();
    // Cut on sample boundaries too.
    cuts.extend(samples.iter().filter(|_| rng.gen_bool(0.1)).map(|s| s.end_ns.clamp(begin, end)));
    cuts.extend([begin, end]);
    cuts.sort_unstable();
    cuts.dedup();
    let whole = attribute_exact(samples, begin, end);
    let mut parts: BTreeMap<EnergyDomain, BigRational> = BTreeMap::new();
    for w in cuts.windows(2) {
        for (d, j) in attribute_exact(samples, w[0], w[1]) {
            *parts.entry(d).or_insert_with(BigRational::zero) += j;
        }
    }
    for (d, j) in &whole {
        let p = parts.get(d).cloned().unwrap_or_else(BigRational::zero);
        if &p != j {
            return Err(format!("{d}: parts {p} != whole {j} over [{begin}, {end}]"));
        }
    }
    Ok(())
}
