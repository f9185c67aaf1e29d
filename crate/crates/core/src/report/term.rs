use std::fmt::Write;

use crate::probe::EnergyDomain;
use crate::store::{HistorySeries, RevisionRecord};

use super::{
    bar_eighths, block_bar, fmt_duration_ns, fmt_pct, fmt_sig, trend, Bars, EvolutionGlyph, ReportRequest,
    LOW_CONFIDENCE_MARKER,
};

const BUCKET_COLORS: [&str; 5] = ["32", "36", "33", "35", "31"];
const MIN_BAR_CELLS: usize = 10;

fn paint(text: &str, code: &str, color: bool) -> String {
    if color && !text.is_empty() {
        format!("\x1b[{code}m{text}\x1b[0m")
    } else {
        text.to_owned()
    }
}

/// Display width, ignoring ANSI color sequences.
fn visible_len(s: &str) -> usize {
    let mut n = 0;
    let mut in_escape = false;
    for c in s.chars() {
        match (in_escape, c) {
            (false, '\x1b') => in_escape = true,
            (true, 'm') => in_escape = false,
            (true, _) => {}
            (false, _) => n += 1,
        }
    }
    n
}

/// Left-aligns the first `left` columns, right-aligns the rest, two spaces apart.
fn table(rows: &[Vec<String>], left: usize) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| visible_len(s)).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c > 0 {
                line.push_str("  ");
            }
            let pad = widths[c] - visible_len(cell);
            if c < left {
                line.push_str(cell);
                line.push_str(&" ".repeat(pad));
            } else {
                line.push_str(&" ".repeat(pad));
                line.push_str(cell);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn header(record: &RevisionRecord) -> String {
    let mut s = format!(
        "revision {}  recorded {}  probe {} (update {})  config {}\n",
        record.revision_label,
        record.created_at.format("%Y-%m-%dT%H:%M:%S%.9fZ"),
        record.probe.backend,
        fmt_duration_ns(record.probe.update_interval_ns as f64),
        &record.config_digest[..record.config_digest.len().min(12)],
    );
    match &record.baseline {
        Some(b) => {
            let parts: Vec<String> = b.power_w.iter().map(|(d, w)| format!("{d} {} W", fmt_sig(*w))).collect();
            let _ = writeln!(s, "baseline subtracted: {}", parts.join(", "));
        }
        None => s.push_str("baseline: off\n"),
    }
    s
}

pub(super) fn summary(record: &RevisionRecord, domains: &[EnergyDomain], bars: &Bars, req: &ReportRequest) -> String {
    let mut out = header(record);
    out.push('\n');
    let mut rows = vec![[
        "test", "domain", "iters", "energy mean", "median", "stddev", "power mean", "median", "stddev", "duration",
        "pass/fail/skip", "",
    ]
    .map(String::from)
    .to_vec()];
    for (test, s) in &record.summaries {
        let shown: Vec<&EnergyDomain> = domains.iter().filter(|d| s.domains.contains_key(d)).collect();
        let note = if s.measured == 0 {
            "no measurement".to_owned()
        } else if s.any_low_confidence {
            LOW_CONFIDENCE_MARKER.to_owned()
        } else {
            String::new()
        };
        let lead = vec![
            test.to_string(),
            String::new(),
            s.iterations.to_string(),
        ];
        let tail = vec![
            fmt_duration_ns(s.mean_duration_ns),
            format!("{}/{}/{}", s.pass_count, s.fail_count, s.skip_count),
            paint(&note, "33", req.color),
        ];
        if shown.is_empty() {
            let mut row = lead;
            row[1] = "-".into();
            row.extend(std::iter::repeat_n("-".to_owned(), 6));
            row.extend(tail);
            rows.push(row);
            continue;
        }
        for (i, d) in shown.into_iter().enumerate() {
            let ds = &s.domains[d];
            let mut row = if i == 0 { lead.clone() } else { vec![String::new(); 3] };
            row[1] = d.to_string();
            row.extend([
                format!("{} J", fmt_sig(ds.energy_j.mean)),
                format!("{} J", fmt_sig(ds.energy_j.median)),
                format!("{} J", fmt_sig(ds.energy_j.stddev)),
                format!("{} W", fmt_sig(ds.power_w.mean)),
                format!("{} W", fmt_sig(ds.power_w.median)),
                format!("{} W", fmt_sig(ds.power_w.stddev)),
            ]);
            if i == 0 {
                row.extend(tail.clone());
            }
            rows.push(row);
        }
    }
    out.push_str(&table(&rows, 2));

    if !bars.rows.is_empty() {
        let _ = writeln!(out, "\nmean {} energy", bars.domain);
        let name_w = bars.rows.iter().map(|r| r.0.to_string().chars().count()).max().unwrap_or(0);
        let cells = bar_cells(req.width, name_w);
        let max = bars.max();
        for (test, v, bucket) in &bars.rows {
            let bar = block_bar(bar_eighths(*v, max, cells));
            let name = test.to_string();
            let pad = name_w - name.chars().count();
            let _ = writeln!(
                out,
                "{name}{}  {}{} {} J",
                " ".repeat(pad),
                paint(&bar, BUCKET_COLORS[usize::from(*bucket)], req.color),
                " ".repeat(cells - bar.chars().count()),
                fmt_sig(*v),
            );
        }
    }
    out
}

/// Bar cells left after the name column and value label.
pub(super) fn bar_cells(width: usize, name_width: usize) -> usize {
    width.saturating_sub(name_width + 14).max(MIN_BAR_CELLS)
}

pub(super) fn compare(base: &RevisionRecord, head: &RevisionRecord, domains: &[EnergyDomain], req: &ReportRequest) -> String {
    let mut out = format!(
        "compare {} ({}) -> {} ({})\n\n",
        base.revision_label,
        base.created_at.format("%Y-%m-%dT%H:%M:%SZ"),
        head.revision_label,
        head.created_at.format("%Y-%m-%dT%H:%M:%SZ"),
    );
    let mut rows = vec![["test", "domain", "base energy", "head energy", "delta", "change", ""]
        .map(String::from)
        .to_vec()];
    let tests: std::collections::BTreeSet<_> = base.summaries.keys().chain(head.summaries.keys()).collect();
    for test in tests {
        let (b, h) = (base.summaries.get(test), head.summaries.get(test));
        for d in domains {
            let bv = b.and_then(|s| s.domains.get(d)).map(|x| x.energy_j.mean);
            let hv = h.and_then(|s| s.domains.get(d)).map(|x| x.energy_j.mean);
            if bv.is_none() && hv.is_none() {
                continue;
            }
            let cell = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{} J", fmt_sig(v)));
            let (delta, change) = match (bv, hv) {
                (Some(bv), Some(hv)) => {
                    let (t, pct) = trend(bv, hv, req.trend_threshold);
                    let change = format!("{} {}", t.arrow(), fmt_pct(pct));
                    let code = match t {
                        super::Trend::Increase => "31",
                        super::Trend::Decrease => "32",
                        super::Trend::Flat => "0",
                    };
                    (format!("{} J", fmt_sig(hv - bv)), paint(&change, code, req.color))
                }
                _ => ("-".to_owned(), "-".to_owned()),
            };
            let note = match (b, h) {
                (None, _) => "only in head",
                (_, None) => "only in base",
                _ => "",
            };
            rows.push(vec![test.to_string(), d.to_string(), cell(bv), cell(hv), delta, change, note.into()]);
        }
    }
    out.push_str(&table(&rows, 2));
    out
}

pub(super) fn history(series: &[HistorySeries], glyphs: &[EvolutionGlyph], req: &ReportRequest) -> String {
    let domain = glyphs.first().map(|g| g.domain).unwrap_or(EnergyDomain::package(0));
    let mut out = format!("mean {domain} energy per revision, oldest first\n\n");
    let mut rows = vec![["test", "evolution", "latest", "last step", "revisions"].map(String::from).to_vec()];
    for g in glyphs {
        let change = format!("{} {}", g.trend.arrow(), fmt_pct(g.change_pct));
        rows.push(vec![
            g.test.to_string(),
            paint(&g.sparkline(), BUCKET_COLORS[usize::from(g.color_bucket)], req.color),
            format!("{} J", fmt_sig(*g.series.last().expect("non-empty"))),
            change,
            g.labels.join(" -> "),
        ]);
    }
    out.push_str(&table(&rows, 2));
    for s in series {
        let _ = writeln!(out, "\n{}", s.test);
        let mut rows = Vec::new();
        for p in &s.points {
            let energy = p
                .summary
                .domains
                .get(&domain)
                .map_or("-".to_owned(), |d| format!("{} J", fmt_sig(d.energy_j.mean)));
            let mut row = vec![
                format!("  {}", p.revision_label),
                p.created_at.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                energy,
                fmt_duration_ns(p.summary.mean_duration_ns),
            ];
            if p.summary.any_low_confidence {
                row.push(LOW_CONFIDENCE_MARKER.into());
            }
            rows.push(row);
        }
        out.push_str(&table(&rows, 2));
    }
    out
}
