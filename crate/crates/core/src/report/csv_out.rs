//! CSV exports. Every row is `test,domain,statistic,value,unit`; test-level
//! statistics use the domain `all`. Values are printed with the shortest
//! representation that parses back to the stored float.

use std::collections::BTreeSet;

use crate::probe::EnergyDomain;
use crate::store::{HistorySeries, RevisionRecord};

use super::{statistic_map, EvolutionGlyph, CSV_HEADER};

const ALL_DOMAINS: &str = "all";

struct Rows(csv::Writer<Vec<u8>>);

impl Rows {
    fn new() -> Self {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
        Rows(w)
    }

    fn push(&mut self, test: &str, domain: &str, statistic: &str, value: &str, unit: &str) {
        self.0
            .write_record([test, domain, statistic, value, unit])
            .expect("in-memory write");
    }

    fn finish(self) -> String {
        let bytes = self.0.into_inner().expect("in-memory flush");
        String::from_utf8(bytes).expect("utf-8 input")
    }
}

fn domain_name(d: Option<EnergyDomain>) -> String {
    d.map_or_else(|| ALL_DOMAINS.to_owned(), |d| d.to_string())
}

pub(super) fn summary(record: &RevisionRecord, domains: &[EnergyDomain]) -> String {
    let mut rows = Rows::new();
    for (test, s) in &record.summaries {
        let test = test.to_string();
        for ((d, name), (v, unit)) in statistic_map(s, domains) {
            rows.push(&test, &domain_name(d), &name, &v.to_string(), unit);
        }
    }
    rows.finish()
}

/// `<stat>_base`, `<stat>_head`, `<stat>_delta` (head - base) and
/// `<stat>_delta_pct` (relative to base, omitted when base is 0).
pub(super) fn compare(base: &RevisionRecord, head: &RevisionRecord, domains: &[EnergyDomain]) -> String {
    let mut rows = Rows::new();
    let tests: BTreeSet<_> = base.summaries.keys().chain(head.summaries.keys()).collect();
    for test in tests {
        let b = base.summaries.get(test).map(|s| statistic_map(s, domains)).unwrap_or_default();
        let h = head.summaries.get(test).map(|s| statistic_map(s, domains)).unwrap_or_default();
        let keys: BTreeSet<_> = b.keys().chain(h.keys()).collect();
        let test = test.to_string();
        for key in keys {
            let (d, name) = key;
            let domain = domain_name(*d);
            let (bv, hv) = (b.get(key), h.get(key));
            if let Some((v, unit)) = bv {
                rows.push(&test, &domain, &format!("{name}_base"), &v.to_string(), unit);
            }
            if let Some((v, unit)) = hv {
                rows.push(&test, &domain, &format!("{name}_head"), &v.to_string(), unit);
            }
            if let (Some((bv, unit)), Some((hv, _))) = (bv, hv) {
                rows.push(&test, &domain, &format!("{name}_delta"), &(hv - bv).to_string(), unit);
                if *bv != 0.0 {
                    let pct = (hv - bv) / bv * 100.0;
                    rows.push(&test, &domain, &format!("{name}_delta_pct"), &pct.to_string(), "%");
                }
            }
        }
    }
    rows.finish()
}

/// `rev:<label>:<stat>` rows per stored point, then `trend` and
/// `trend_change_pct` for the highlighted domain.
pub(super) fn history(series: &[HistorySeries], glyphs: &[EvolutionGlyph], domains: &[EnergyDomain]) -> String {
    let mut rows = Rows::new();
    for (s, g) in series.iter().zip(glyphs) {
        let test = s.test.to_string();
        for p in &s.points {
            for ((d, name), (v, unit)) in statistic_map(&p.summary, domains) {
                let stat = format!("rev:{}:{name}", p.revision_label);
                rows.push(&test, &domain_name(d), &stat, &v.to_string(), unit);
            }
        }
        let domain = g.domain.to_string();
        rows.push(&test, &domain, "trend", g.trend.as_str(), "");
        if let Some(pct) = g.change_pct {
            rows.push(&test, &domain, "trend_change_pct", &pct.to_string(), "%");
        }
    }
    rows.finish()
}
