use std::collections::BTreeMap;

use num::rational::BigRational;
use num::{BigInt, ToPrimitive, Zero};

use crate::probe::EnergyDomain;
use crate::sampler::EnergySample;

/// Exact per-domain joules inside `[begin_ns, end_ns]`.
///
/// Each sample contributes its energy scaled by the fraction of its span that
/// overlaps the window. Arithmetic is rational, so attributing over any
/// partition of a window sums to the attribution over the whole window.
pub fn attribute_exact(
    samples: &[EnergySample],
    begin_ns: u64,
    end_ns: u64,
) -> BTreeMap<EnergyDomain, BigRational> {
    let mut out: BTreeMap<EnergyDomain, BigRational> = BTreeMap::new();
    if begin_ns >= end_ns {
        return out;
    }
    for sample in samples {
        let lo = sample.start_ns.max(begin_ns);
        let hi = sample.end_ns.min(end_ns);
        for (domain, energy) in &sample.domains {
            let acc = out.entry(*domain).or_insert_with(BigRational::zero);
            if hi <= lo || energy.joules == 0.0 {
                continue;
            }
            let joules = BigRational::from_float(energy.joules).expect("sample energy is finite");
            let span = sample.end_ns - sample.start_ns;
            if hi - lo == span {
                *acc += joules;
            } else {
                *acc += joules * BigRational::new(BigInt::from(hi - lo), BigInt::from(span));
            }
        }
    }
    out
}

/// Per-domain joules inside `[begin_ns, end_ns]`, pro-rata over boundary samples.
pub fn attribute(samples: &[EnergySample], begin_ns: u64, end_ns: u64) -> BTreeMap<EnergyDomain, f64> {
    attribute_exact(samples, begin_ns, end_ns)
        .into_iter()
        .map(|(d, j)| (d, j.to_f64().unwrap_or(0.0)))
        .collect()
}
