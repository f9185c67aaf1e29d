use std::collections::BTreeSet;
use std::fmt::Write;

use chrono::Utc;

use crate::probe::EnergyDomain;
use crate::store::{HistorySeries, RevisionRecord};

use super::{fmt_duration_ns, fmt_pct, fmt_sig, trend, Bars, EvolutionGlyph, ReportRequest, LOW_CONFIDENCE_MARKER};

const BUCKET_COLORS: [&str; 5] = ["#2e7d32", "#00838f", "#f9a825", "#ef6c00", "#c62828"];
const BAR_MAX_PX: f64 = 400.0;
const BAR_ROW_PX: f64 = 24.0;
const LABEL_PX: f64 = 220.0;
const SPARK_W: f64 = 120.0;
const SPARK_H: f64 = 28.0;

const STYLE: &str = "body{font-family:system-ui,sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse;margin:1em 0}\
th,td{padding:.25em .6em;border-bottom:1px solid #ddd;text-align:right}\
th:first-child,td:first-child,td.l{text-align:left}\
.low{color:#b26a00;font-weight:600}\
.dec{color:#2e7d32}.inc{color:#c62828}\
svg text{font-size:12px;font-family:monospace}";

pub(super) fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn document(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<!-- generated {} -->\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>{}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n{body}</body>\n</html>\n",
        Utc::now().format("%Y-%m-%dT%H:%M:%SZ"),
        escape(title),
    )
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

pub(super) fn summary(record: &RevisionRecord, domains: &[EnergyDomain], bars: &Bars) -> String {
    let mut b = String::new();
    let _ = writeln!(b, "<h1>Revision {}</h1>", escape(&record.revision_label));
    let _ = writeln!(
        b,
        "<p>recorded {} &middot; probe {} (update {}) &middot; config <code>{}</code> &middot; {}</p>",
        record.created_at.format("%Y-%m-%dT%H:%M:%S%.9fZ"),
        record.probe.backend,
        escape(&fmt_duration_ns(record.probe.update_interval_ns as f64)),
        escape(&record.config_digest),
        if record.baseline.is_some() { "baseline subtracted" } else { "no baseline" },
    );
    b.push_str(
        "<table>\n<tr><th>test</th><th>domain</th><th>iterations</th><th>energy mean</th><th>median</th>\
         <th>stddev</th><th>power mean</th><th>median</th><th>stddev</th><th>duration</th>\
         <th>pass/fail/skip</th><th>confidence</th></tr>\n",
    );
    for (test, s) in &record.summaries {
        let shown: Vec<&EnergyDomain> = domains.iter().filter(|d| s.domains.contains_key(d)).collect();
        let note = if s.measured == 0 {
            "no measurement"
        } else if s.any_low_confidence {
            LOW_CONFIDENCE_MARKER
        } else {
            ""
        };
        let tail = format!(
            "<td>{}</td><td>{}/{}/{}</td><td class=\"l low\">{}</td>",
            escape(&fmt_duration_ns(s.mean_duration_ns)),
            s.pass_count,
            s.fail_count,
            s.skip_count,
            escape(note),
        );
        if shown.is_empty() {
            let _ = writeln!(
                b,
                "<tr><td>{}</td><td class=\"l\">-</td><td>{}</td>{}{tail}</tr>",
                escape(&test.to_string()),
                s.iterations,
                "<td>-</td>".repeat(6),
            );
            continue;
        }
        for d in shown {
            let ds = &s.domains[d];
            let _ = writeln!(
                b,
                "<tr><td>{}</td><td class=\"l\">{d}</td><td>{}</td><td>{} J</td><td>{} J</td><td>{} J</td>\
                 <td>{} W</td><td>{} W</td><td>{} W</td>{tail}</tr>",
                escape(&test.to_string()),
                s.iterations,
                fmt_sig(ds.energy_j.mean),
                fmt_sig(ds.energy_j.median),
                fmt_sig(ds.energy_j.stddev),
                fmt_sig(ds.power_w.mean),
                fmt_sig(ds.power_w.median),
                fmt_sig(ds.power_w.stddev),
            );
        }
    }
    b.push_str("</table>\n");

    if !bars.rows.is_empty() {
        let _ = writeln!(b, "<h2>Mean {} energy</h2>", bars.domain);
        let max = bars.max();
        let height = BAR_ROW_PX * bars.rows.len() as f64;
        let width = LABEL_PX + BAR_MAX_PX + 90.0;
        let _ = writeln!(
            b,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" role=\"img\">",
            px(width),
            px(height)
        );
        for (i, (test, v, bucket)) in bars.rows.iter().enumerate() {
            let y = BAR_ROW_PX * i as f64;
            let w = bar_width_px(*v, max);
            let _ = writeln!(
                b,
                "<text x=\"0\" y=\"{}\">{}</text><rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\
                 <text x=\"{}\" y=\"{}\">{} J</text>",
                px(y + 16.0),
                escape(&test.to_string()),
                px(LABEL_PX),
                px(y + 4.0),
                px(w),
                px(BAR_ROW_PX - 8.0),
                BUCKET_COLORS[usize::from(*bucket)],
                px(LABEL_PX + w + 6.0),
                px(y + 16.0),
                fmt_sig(*v),
            );
        }
        b.push_str("</svg>\n");
    }
    document(&format!("Energy summary: {}", record.revision_label), &b)
}

/// Pixel width of a bar for `value` when `max` spans the full bar length.
pub(super) fn bar_width_px(value: f64, max: f64) -> f64 {
    if max <= 0.0 || value <= 0.0 {
        0.0
    } else {
        value / max * BAR_MAX_PX
    }
}

pub(super) fn compare(base: &RevisionRecord, head: &RevisionRecord, domains: &[EnergyDomain], req: &ReportRequest) -> String {
    let mut b = format!(
        "<h1>Compare {} &rarr; {}</h1>\n<table>\n<tr><th>test</th><th>domain</th><th>base energy</th>\
         <th>head energy</th><th>delta</th><th>change</th></tr>\n",
        escape(&base.revision_label),
        escape(&head.revision_label),
    );
    let tests: BTreeSet<_> = base.summaries.keys().chain(head.summaries.keys()).collect();
    for test in tests {
        for d in domains {
            let bv = base.summaries.get(test).and_then(|s| s.domains.get(d)).map(|x| x.energy_j.mean);
            let hv = head.summaries.get(test).and_then(|s| s.domains.get(d)).map(|x| x.energy_j.mean);
            if bv.is_none() && hv.is_none() {
                continue;
            }
            let cell = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{} J", fmt_sig(v)));
            let (delta, change) = match (bv, hv) {
                (Some(bv), Some(hv)) => {
                    let (t, pct) = trend(bv, hv, req.trend_threshold);
                    let class = match t {
                        super::Trend::Increase => "inc",
                        super::Trend::Decrease => "dec",
                        super::Trend::Flat => "",
                    };
                    (
                        format!("{} J", fmt_sig(hv - bv)),
                        format!("<span class=\"{class}\">{} {}</span>", t.arrow(), fmt_pct(pct)),
                    )
                }
                _ => ("-".to_owned(), "-".to_owned()),
            };
            let _ = writeln!(
                b,
                "<tr><td>{}</td><td class=\"l\">{d}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                escape(&test.to_string()),
                cell(bv),
                cell(hv),
                delta,
                change,
            );
        }
    }
    b.push_str("</table>\n");
    document(
        &format!("Energy comparison: {} vs {}", base.revision_label, head.revision_label),
        &b,
    )
}

/// Polyline points for a sparkline: x evenly spaced, y scaled to the series range.
pub(super) fn polyline_points(series: &[f64]) -> String {
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let step = if series.len() > 1 { SPARK_W / (series.len() - 1) as f64 } else { 0.0 };
    series
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let frac = if max > min { (v - min) / (max - min) } else { 0.5 };
            format!("{},{}", px(step * i as f64), px(SPARK_H - 2.0 - frac * (SPARK_H - 4.0)))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub(super) fn history(series: &[HistorySeries], glyphs: &[EvolutionGlyph]) -> String {
    let domain = glyphs.first().map(|g| g.domain).unwrap_or(EnergyDomain::package(0));
    let mut b = format!(
        "<h1>Energy evolution</h1>\n<p>mean {domain} energy per revision, oldest first</p>\n<table>\n\
         <tr><th>test</th><th>evolution</th><th>latest</th><th>last step</th><th>revisions</th></tr>\n"
    );
    for g in glyphs {
        let color = BUCKET_COLORS[usize::from(g.color_bucket)];
        let _ = writeln!(
            b,
            "<tr><td>{}</td><td><svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\
             <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/></svg></td>\
             <td>{} J</td><td>{} {}</td><td class=\"l\">{}</td></tr>",
            escape(&g.test.to_string()),
            px(SPARK_W + 4.0),
            px(SPARK_H),
            polyline_points(&g.series),
            fmt_sig(*g.series.last().expect("non-empty")),
            g.trend.arrow(),
            fmt_pct(g.change_pct),
            escape(&g.labels.join(" → ")),
        );
    }
    b.push_str("</table>\n");
    for s in series {
        let _ = writeln!(
            b,
            "<h2>{}</h2>\n<table>\n<tr><th>revision</th><th>recorded</th><th>energy mean</th><th>duration</th><th></th></tr>",
            escape(&s.test.to_string())
        );
        for p in &s.points {
            let energy = p
                .summary
                .domains
                .get(&domain)
                .map_or("-".to_owned(), |d| format!("{} J", fmt_sig(d.energy_j.mean)));
            let _ = writeln!(
                b,
                "<tr><td>{}</td><td>{}</td><td>{energy}</td><td>{}</td><td class=\"l low\">{}</td></tr>",
                escape(&p.revision_label),
                p.created_at.format("%Y-%m-%dT%H:%M:%SZ"),
                escape(&fmt_duration_ns(p.summary.mean_duration_ns)),
                escape(if p.summary.any_low_confidence { LOW_CONFIDENCE_MARKER } else { "" }),
            );
        }
        b.push_str("</table>\n");
    }
    document("Energy evolution", &b)
}
