//! Rendering of stored results: per-revision summaries, revision comparisons
//! and per-test evolution across revisions, as terminal text, self-contained
//! HTML with inline SVG, CSV, or the machine-readable record document.
//!
//! Rendering is a pure function of store content and the request. Term and
//! HTML show values rounded to 3 significant digits; CSV and Machine carry full
//! precision. The only non-deterministic output is the single
//! `<!-- generated ... -->` comment line in HTML.

mod csv_out;
mod html;
mod term;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::experiment::TestSummary;
use crate::harness::TestId;
use crate::probe::EnergyDomain;
use crate::store::{HistorySeries, RevisionRecord, Store, StoreError};

/// Marker attached to tests that ran for less than one probe update interval.
pub const LOW_CONFIDENCE_MARKER: &str = "< update interval";
/// Header of every CSV export.
pub const CSV_HEADER: &str = "test,domain,statistic,value,unit";
pub const DEFAULT_TREND_THRESHOLD: f64 = 0.01;
pub const DEFAULT_WIDTH: usize = 100;
const SPARK_GLYPHS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Format {
    #[default]
    Term,
    Html,
    Csv,
    Machine,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "term" => Ok(Format::Term),
            "html" => Ok(Format::Html),
            "csv" => Ok(Format::Csv),
            "machine" => Ok(Format::Machine),
            _ => Err(format!("unknown format `{s}` (expected term, html, csv or machine)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Term => "term",
            Format::Html => "html",
            Format::Csv => "csv",
            Format::Machine => "machine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Scope {
    /// The latest record of a revision; `None` selects the newest record overall.
    Revision(Option<String>),
    /// Latest records of two distinct revisions.
    Compare { base: String, head: String },
    /// Evolution of the given tests (all stored tests when empty) across records.
    History { tests: Vec<TestId>, limit: Option<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRequest {
    pub scope: Scope,
    /// Domains to show; empty shows every recorded domain. Ignored by Machine.
    pub domains: Vec<EnergyDomain>,
    pub format: Format,
    pub output_path: Option<PathBuf>,
    /// Domain plotted in bar charts and sparklines.
    pub highlight: EnergyDomain,
    /// Relative change beyond which a step counts as an increase or decrease.
    pub trend_threshold: f64,
    /// ANSI colors in Term output.
    pub color: bool,
    /// Terminal width in columns.
    pub width: usize,
}

impl ReportRequest {
    pub fn new(scope: Scope, format: Format) -> Self {
        Self {
            scope,
            domains: Vec::new(),
            format,
            output_path: None,
            highlight: EnergyDomain::package(0),
            trend_threshold: DEFAULT_TREND_THRESHOLD,
            color: false,
            width: DEFAULT_WIDTH,
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("nothing to report: {0}")]
    EmptyScope(String),
    #[error("no stored history for {0}")]
    NoHistory(TestId),
    #[error("invalid report request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("writing {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Increase,
    Decrease,
    Flat,
}

impl Trend {
    pub fn arrow(self) -> char {
        match self {
            Trend::Increase => '↑',
            Trend::Decrease => '↓',
            Trend::Flat => '→',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Increase => "increase",
            Trend::Decrease => "decrease",
            Trend::Flat => "flat",
        }
    }
}

/// Classifies the step `prev -> last`; also returns the percentage change
/// when `prev` is non-zero.
pub fn trend(prev: f64, last: f64, threshold: f64) -> (Trend, Option<f64>) {
    if prev == 0.0 {
        let t = if last > 0.0 { Trend::Increase } else { Trend::Flat };
        return (t, None);
    }
    let rel = (last - prev) / prev.abs();
    let t = if rel > threshold {
        Trend::Increase
    } else if rel < -threshold {
        Trend::Decrease
    } else {
        Trend::Flat
    };
    (t, Some(rel * 100.0))
}

/// One test's evolution across revisions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionGlyph {
    pub test: TestId,
    pub domain: EnergyDomain,
    pub labels: Vec<String>,
    /// Mean energy per revision in joules, oldest first.
    pub series: Vec<f64>,
    pub trend: Trend,
    /// Change of the last step in percent; `None` for a single point.
    pub change_pct: Option<f64>,
    /// 0 (lowest) ..= 4 (highest), by rank of the latest value within the view.
    pub color_bucket: u8,
}

impl EvolutionGlyph {
    /// Builds the glyph for `series` in `domain`; revisions without that
    /// domain are skipped. The color bucket is set by [`assign_color_buckets`].
    pub fn from_history(series: &HistorySeries, domain: EnergyDomain, threshold: f64) -> Result<Self, ReportError> {
        let (labels, values): (Vec<String>, Vec<f64>) = series
            .points
            .iter()
            .filter_map(|p| p.summary.domains.get(&domain).map(|d| (p.revision_label.clone(), d.energy_j.mean)))
            .unzip();
        if values.is_empty() {
            return Err(ReportError::NoHistory(series.test.clone()));
        }
        let (trend, change_pct) = match values.as_slice() {
            [.., prev, last] => trend(*prev, *last, threshold),
            _ => (Trend::Flat, None),
        };
        Ok(Self {
            test: series.test.clone(),
            domain,
            labels,
            series: values,
            trend,
            change_pct,
            color_bucket: 0,
        })
    }

    pub fn levels(&self) -> Vec<u8> {
        sparkline_levels(&self.series)
    }

    pub fn sparkline(&self) -> String {
        sparkline(&self.levels())
    }
}

/// Rank-based quintile buckets for every glyph, keyed on its latest value.
pub fn assign_color_buckets(glyphs: &mut [EvolutionGlyph]) {
    let latest: Vec<f64> = glyphs.iter().map(|g| *g.series.last().expect("non-empty")).collect();
    for (g, b) in glyphs.iter_mut().zip(color_buckets(&latest)) {
        g.color_bucket = b;
    }
}

/// Quintile of each value's rank (count of strictly smaller values) within
/// `values`. Depends only on ordering, so uniform scaling leaves it unchanged.
pub fn color_buckets(values: &[f64]) -> Vec<u8> {
    let n = values.len();
    values
        .iter()
        .map(|v| {
            let rank = values.iter().filter(|w| *w < v).count();
            (rank * 5 / n) as u8
        })
        .collect()
}

/// Levels 0..=7 with `round((v - min) / (max - min) * 7)`; all 0 when flat.
pub fn sparkline_levels(series: &[f64]) -> Vec<u8> {
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    series
        .iter()
        .map(|v| {
            if max > min {
                ((v - min) / (max - min) * 7.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn sparkline(levels: &[u8]) -> String {
    levels.iter().map(|l| SPARK_GLYPHS[usize::from(*l).min(7)]).collect()
}

/// Length in eighths of a cell of a bar for `value` when `max` fills `cells`.
pub fn bar_eighths(value: f64, max: f64, cells: usize) -> usize {
    if max <= 0.0 || value <= 0.0 {
        return 0;
    }
    ((value / max).min(1.0) * (cells * 8) as f64).round() as usize
}

/// A bar of full blocks plus one partial block for the remaining eighths.
pub fn block_bar(eighths: usize) -> String {
    const PARTIAL: [char; 7] = ['▏', '▎', '▍', '▌', '▋', '▊', '▉'];
    let mut s = "█".repeat(eighths / 8);
    if !eighths.is_multiple_of(8) {
        s.push(PARTIAL[eighths % 8 - 1]);
    }
    s
}

/// Rounds to 3 significant digits.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.2e}").parse().expect("formatted float parses")
}

/// Formats with 3 significant digits, e.g. `5.00`, `0.0123`, `12300`.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.2e}");
    let exp: i32 = sci.split_once('e').expect("exponent").1.parse().expect("integer exponent");
    let rounded: f64 = sci.parse().expect("formatted float parses");
    let decimals = (2 - exp).max(0) as usize;
    format!("{rounded:.decimals$}")
}

/// A nanosecond duration with 3 significant digits in a fitting unit.
pub fn fmt_duration_ns(ns: f64) -> String {
    let (scale, unit) = if ns >= 1e9 {
        (1e9, "s")
    } else if ns >= 1e6 {
        (1e6, "ms")
    } else if ns >= 1e3 {
        (1e3, "µs")
    } else {
        (1.0, "ns")
    };
    format!("{} {unit}", fmt_sig(ns / scale))
}

pub fn fmt_pct(pct: Option<f64>) -> String {
    match pct {
        Some(p) if p > 0.0 => format!("+{}%", fmt_sig(p)),
        Some(p) => format!("{}%", fmt_sig(p)),
        None => "-".into(),
    }
}

/// Data resolved from the store for one request.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // built once per render
pub enum View {
    Summary(RevisionRecord),
    Compare { base: RevisionRecord, head: RevisionRecord },
    History(Vec<HistorySeries>),
}

/// Loads what `request.scope` refers to.
pub fn resolve(store: &Store, request: &ReportRequest) -> Result<View, ReportError> {
    match &request.scope {
        Scope::Revision(Some(label)) => Ok(View::Summary(store.latest(label)?)),
        Scope::Revision(None) => store
            .newest()?
            .map(View::Summary)
            .ok_or_else(|| ReportError::EmptyScope(format!("no records in {}", store.root().display()))),
        Scope::Compare { base, head } => {
            if base == head {
                return Err(ReportError::InvalidRequest(
                    "compare needs two distinct revisions".into(),
                ));
            }
            Ok(View::Compare {
                base: store.latest(base)?,
                head: store.latest(head)?,
            })
        }
        Scope::History { tests, limit } => {
            let tests = if tests.is_empty() {
                let all: BTreeSet<TestId> = store
                    .all_records()?
                    .into_iter()
                    .flat_map(|r| r.summaries.into_keys())
                    .collect();
                if all.is_empty() {
                    return Err(ReportError::EmptyScope(format!(
                        "no records in {}",
                        store.root().display()
                    )));
                }
                all.into_iter().collect()
            } else {
                tests.clone()
            };
            let mut series = Vec::with_capacity(tests.len());
            for test in &tests {
                let s = store.history(test, *limit)?;
                if s.points.is_empty() {
                    return Err(ReportError::NoHistory(test.clone()));
                }
                series.push(s);
            }
            Ok(View::History(series))
        }
    }
}

/// Renders `request` against `store`.
pub fn render(store: &Store, request: &ReportRequest) -> Result<String, ReportError> {
    render_view(&resolve(store, request)?, request)
}

/// Renders a record that is already in memory (e.g. right after a run).
pub fn render_record(record: &RevisionRecord, request: &ReportRequest) -> Result<String, ReportError> {
    render_view(&View::Summary(record.clone()), request)
}

pub fn render_view(view: &View, request: &ReportRequest) -> Result<String, ReportError> {
    if request.format == Format::Machine {
        return Ok(machine(view));
    }
    match view {
        View::Summary(record) => {
            if record.summaries.is_empty() {
                return Err(ReportError::EmptyScope(format!(
                    "revision `{}` holds no tests",
                    record.revision_label
                )));
            }
            let domains = view_domains(record.summaries.values(), &request.domains)?;
            let bars = bar_values(record, highlight(request.highlight, &domains));
            Ok(match request.format {
                Format::Term => term::summary(record, &domains, &bars, request),
                Format::Html => html::summary(record, &domains, &bars),
                Format::Csv => csv_out::summary(record, &domains),
                Format::Machine => unreachable!(),
            })
        }
        View::Compare { base, head } => {
            let summaries = base.summaries.values().chain(head.summaries.values());
            let domains = view_domains(summaries, &request.domains)?;
            Ok(match request.format {
                Format::Term => term::compare(base, head, &domains, request),
                Format::Html => html::compare(base, head, &domains, request),
                Format::Csv => csv_out::compare(base, head, &domains),
                Format::Machine => unreachable!(),
            })
        }
        View::History(series) => {
            let summaries = series.iter().flat_map(|s| s.points.iter().map(|p| &p.summary));
            let domains = view_domains(summaries, &request.domains)?;
            let domain = highlight(request.highlight, &domains);
            let mut glyphs = series
                .iter()
                .map(|s| EvolutionGlyph::from_history(s, domain, request.trend_threshold))
                .collect::<Result<Vec<_>, _>>()?;
            assign_color_buckets(&mut glyphs);
            Ok(match request.format {
                Format::Term => term::history(series, &glyphs, request),
                Format::Html => html::history(series, &glyphs),
                Format::Csv => csv_out::history(series, &glyphs, &domains),
                Format::Machine => unreachable!(),
            })
        }
    }
}

/// Writes a rendered document to `path`.
pub fn write_document(path: &Path, document: &str) -> Result<(), ReportError> {
    fs::write(path, document).map_err(|source| ReportError::Write {
        path: path.to_owned(),
        source,
    })
}

fn machine(view: &View) -> String {
    match view {
        View::Summary(record) => record.to_document(),
        View::Compare { base, head } => {
            let mut s = serde_json::to_string_pretty(&[base, head]).expect("records serialize");
            s.push('\n');
            s
        }
        View::History(series) => {
            let mut s = serde_json::to_string_pretty(series).expect("history serializes");
            s.push('\n');
            s
        }
    }
}

/// Domains present in `summaries`, restricted to `filter` when non-empty.
fn view_domains<'a>(
    summaries: impl Iterator<Item = &'a TestSummary>,
    filter: &[EnergyDomain],
) -> Result<Vec<EnergyDomain>, ReportError> {
    let present: BTreeSet<EnergyDomain> = summaries.flat_map(|s| s.domains.keys().copied()).collect();
    if filter.is_empty() {
        return Ok(present.into_iter().collect());
    }
    let chosen: Vec<EnergyDomain> = filter.iter().copied().filter(|d| present.contains(d)).collect();
    if chosen.is_empty() {
        let wanted: Vec<String> = filter.iter().map(ToString::to_string).collect();
        return Err(ReportError::EmptyScope(format!("no data for domain(s) {}", wanted.join(", "))));
    }
    Ok(chosen)
}

/// The requested highlight domain, or the first shown domain if it has no data.
fn highlight(requested: EnergyDomain, domains: &[EnergyDomain]) -> EnergyDomain {
    if domains.contains(&requested) || domains.is_empty() {
        requested
    } else {
        domains[0]
    }
}

/// Bar chart input: mean energy of `domain` per test, with the test's color bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct Bars {
    pub domain: EnergyDomain,
    pub rows: Vec<(TestId, f64, u8)>,
}

impl Bars {
    pub fn max(&self) -> f64 {
        self.rows.iter().map(|r| r.1).fold(0.0, f64::max)
    }
}

pub fn bar_values(record: &RevisionRecord, domain: EnergyDomain) -> Bars {
    let values: Vec<(TestId, f64)> = record
        .summaries
        .iter()
        .filter_map(|(t, s)| s.domains.get(&domain).map(|d| (t.clone(), d.energy_j.mean)))
        .collect();
    let buckets = color_buckets(&values.iter().map(|v| v.1).collect::<Vec<_>>());
    Bars {
        domain,
        rows: values.into_iter().zip(buckets).map(|((t, v), b)| (t, v, b)).collect(),
    }
}

/// Per-domain statistics by name, as exported to CSV.
fn domain_statistics(summary: &TestSummary, domain: &EnergyDomain) -> Vec<(String, f64, &'static str)> {
    let Some(d) = summary.domains.get(domain) else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(10);
    for (prefix, stats, unit) in [("energy", d.energy_j, "J"), ("power", d.power_w, "W")] {
        for (name, v) in [
            ("mean", stats.mean),
            ("median", stats.median),
            ("min", stats.min),
            ("max", stats.max),
            ("stddev", stats.stddev),
        ] {
            out.push((format!("{prefix}_{name}"), v, unit));
        }
    }
    out
}

fn test_statistics(summary: &TestSummary) -> Vec<(&'static str, f64, &'static str)> {
    vec![
        ("iterations", f64::from(summary.iterations), "count"),
        ("measured", f64::from(summary.measured), "count"),
        ("pass_count", f64::from(summary.pass_count), "count"),
        ("fail_count", f64::from(summary.fail_count), "count"),
        ("skip_count", f64::from(summary.skip_count), "count"),
        ("duration_mean", summary.mean_duration_ns, "ns"),
        ("low_confidence", f64::from(u8::from(summary.any_low_confidence)), "flag"),
    ]
}

/// Rows keyed by (domain, statistic) for one summary; test-level rows use domain `None`.
fn statistic_map(summary: &TestSummary, domains: &[EnergyDomain]) -> BTreeMap<(Option<EnergyDomain>, String), (f64, &'static str)> {
    let mut map = BTreeMap::new();
    for d in domains {
        for (name, v, unit) in domain_statistics(summary, d) {
            map.insert((Some(*d), name), (v, unit));
        }
    }
    for (name, v, unit) in test_statistics(summary) {
        map.insert((None, name.to_owned()), (v, unit));
    }
    map
}
