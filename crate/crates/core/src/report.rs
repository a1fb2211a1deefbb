//! Tables and plots derived from per-frame records.
//!
//! Every emitted number is recomputed from the records passed in.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::MetricRecord;

pub const JSON_SCHEMA_VERSION: u32 = 1;

/// Column order of the per-frame CSV.
pub const RECORD_COLUMNS: [&str; 17] = [
    "frame_index",
    "scene_index",
    "domain",
    "round",
    "epe",
    "d1_all",
    "epe_valid",
    "epe_invalid",
    "d1_valid",
    "d1_invalid",
    "proxy_density",
    "loss_proxy",
    "loss_teacher",
    "loss_total",
    "teacher_epe",
    "student_checksum",
    "wall_time_ms",
];

/// Column order of the per-(round, domain) summary CSV.
pub const SUMMARY_COLUMNS: [&str; 10] = [
    "round",
    "domain",
    "frames",
    "epe",
    "d1_all",
    "epe_valid",
    "epe_invalid",
    "d1_valid",
    "d1_invalid",
    "proxy_density",
];

/// Metrics that appear in the wide domain-by-round table.
pub const TABLE_METRICS: [&str; 6] = [
    "d1_all",
    "epe",
    "d1_valid",
    "d1_invalid",
    "epe_valid",
    "epe_invalid",
];

const NA: &str = "NA";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub domain: String,
    pub frames: usize,
    pub epe: Option<f64>,
    pub d1_all: Option<f64>,
    pub epe_valid: Option<f64>,
    pub epe_invalid: Option<f64>,
    pub d1_valid: Option<f64>,
    pub d1_invalid: Option<f64>,
    pub proxy_density: Option<f64>,
}

/// Mean of the defined values; `None` when there are none.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn metric(rec: &MetricRecord, name: &str) -> Option<f64> {
    match name {
        "epe" => rec.epe,
        "d1_all" => rec.d1_all,
        "epe_valid" => rec.epe_valid,
        "epe_invalid" => rec.epe_invalid,
        "d1_valid" => rec.d1_valid,
        "d1_invalid" => rec.d1_invalid,
        "proxy_density" => Some(rec.proxy_density),
        "teacher_epe" => rec.teacher_epe,
        _ => None,
    }
}

/// `(round, domain)` cells in order of first appearance.
fn cells(records: &[MetricRecord]) -> Vec<(usize, String)> {
    let mut out: Vec<(usize, String)> = Vec::new();
    for r in records {
        if !out
            .iter()
            .any(|(round, d)| *round == r.round && *d == r.domain)
        {
            out.push((r.round, r.domain.clone()));
        }
    }
    out
}

pub fn summarize(records: &[MetricRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::Input("no records to summarize".into()));
    }
    Ok(cells(records)
        .into_iter()
        .map(|(round, domain)| {
            let sel: Vec<&MetricRecord> = records
                .iter()
                .filter(|r| r.round == round && r.domain == domain)
                .collect();
            let m = |name: &str| mean_defined(sel.iter().map(|r| metric(r, name)));
            SummaryRow {
                round,
                domain: domain.clone(),
                frames: sel.len(),
                epe: m("epe"),
                d1_all: m("d1_all"),
                epe_valid: m("epe_valid"),
                epe_invalid: m("epe_invalid"),
                d1_valid: m("d1_valid"),
                d1_invalid: m("d1_invalid"),
                proxy_density: m("proxy_density"),
            }
        })
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:.6}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn records_csv(records: &[MetricRecord]) -> String {
    let mut out = RECORD_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let fields = [
            r.frame_index.to_string(),
            r.scene_index.to_string(),
            csv_field(&r.domain),
            r.round.to_string(),
            fmt_opt(r.epe),
            fmt_opt(r.d1_all),
            fmt_opt(r.epe_valid),
            fmt_opt(r.epe_invalid),
            fmt_opt(r.d1_valid),
            fmt_opt(r.d1_invalid),
            format!("{:.6}", r.proxy_density),
            format!("{:.6}", r.loss_proxy),
            format!("{:.6}", r.loss_teacher),
            format!("{:.6}", r.loss_total),
            fmt_opt(r.teacher_epe),
            r.student_checksum.clone(),
            format!("{:.3}", r.wall_time_ms),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = SUMMARY_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            r.round.to_string(),
            csv_field(&r.domain),
            r.frames.to_string(),
            fmt_opt(r.epe),
            fmt_opt(r.d1_all),
            fmt_opt(r.epe_valid),
            fmt_opt(r.epe_invalid),
            fmt_opt(r.d1_valid),
            fmt_opt(r.d1_invalid),
            fmt_opt(r.proxy_density),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// One row per metric, one column per `(round, domain)` cell, and a `Mean`
/// column averaging every frame of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WideTable {
    pub columns: Vec<String>,
    pub rows: Vec<WideRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WideRow {
    pub metric: String,
    pub cells: Vec<Option<f64>>,
    pub mean: Option<f64>,
}

pub fn wide_table(records: &[MetricRecord]) -> Result<WideTable> {
    if records.is_empty() {
        return Err(Error::Input("no records to tabulate".into()));
    }
    let cells = cells(records);
    let columns = cells.iter().map(|(r, d)| format!("r{r}:{d}")).collect();
    let rows = TABLE_METRICS
        .iter()
        .map(|&name| WideRow {
            metric: name.to_string(),
            cells: cells
                .iter()
                .map(|(round, d)| {
                    mean_defined(
                        records
                            .iter()
                            .filter(|r| r.round == *round && r.domain == *d)
                            .map(|r| metric(r, name)),
                    )
                })
                .collect(),
            mean: mean_defined(records.iter().map(|r| metric(r, name))),
        })
        .collect();
    Ok(WideTable { columns, rows })
}

pub fn wide_table_csv(table: &WideTable) -> String {
    let mut out = String::from("metric");
    for c in &table.columns {
        out.push(',');
        out.push_str(&csv_field(c));
    }
    out.push_str(",Mean\n");
    for row in &table.rows {
        out.push_str(&row.metric);
        for c in &row.cells {
            out.push(',');
            out.push_str(&fmt_opt(*c));
        }
        out.push(',');
        out.push_str(&fmt_opt(row.mean));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub schema_version: u32,
    pub frames: usize,
    pub summary: Vec<SummaryRow>,
    pub table: WideTable,
}

pub fn summary_json(records: &[MetricRecord]) -> Result<String> {
    let doc = SummaryDocument {
        schema_version: JSON_SCHEMA_VERSION,
        frames: records.len(),
        summary: summarize(records)?,
        table: wide_table(records)?,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Input(e.to_string()))
}

/// Per-round means of `metrics`, as `(metric, [(round, value)])`.
pub fn round_curves(
    records: &[MetricRecord],
    metrics: &[&str],
) -> Vec<(String, Vec<(usize, f64)>)> {
    let mut rounds: Vec<usize> = records.iter().map(|r| r.round).collect();
    rounds.sort_unstable();
    rounds.dedup();
    metrics
        .iter()
        .map(|&m| {
            let pts = rounds
                .iter()
                .filter_map(|&round| {
                    mean_defined(
                        records
                            .iter()
                            .filter(|r| r.round == round)
                            .map(|r| metric(r, m)),
                    )
                    .map(|v| (round, v))
                })
                .collect();
            (m.to_string(), pts)
        })
        .collect()
}

const PALETTE: [&str; 3] = ["#1f4e9c", "#2e8b3e", "#c0392b"];

/// Line plot of per-round means; plain SVG text, identical for identical input.
pub fn render_round_plot(
    title: &str,
    curves: &[(String, Vec<(usize, f64)>)],
    percent: bool,
) -> String {
    let (w, h) = (480.0, 300.0);
    let (left, right, top, bottom) = (56.0, 120.0, 32.0, 40.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let scale = if percent { 100.0 } else { 1.0 };
    let max_round = curves
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&(r, _)| r))
        .max()
        .unwrap_or(1)
        .max(2);
    let ymax = curves
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&(_, v)| v * scale))
        .fold(0.0f64, f64::max);
    let ymax = if ymax > 0.0 { ymax * 1.1 } else { 1.0 };
    let x_of = |r: usize| left + pw * (r as f64 - 1.0) / (max_round as f64 - 1.0);
    let y_of = |v: f64| top + ph * (1.0 - v * scale / ymax);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r##"<path d="M{left} {top} V{} H{}" fill="none" stroke="#333"/>"##,
        top + ph,
        left + pw
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let y = top + ph * (1.0 - i as f64 / 4.0);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="#333"/>"##,
            left - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    for r in 1..=max_round {
        let x = x_of(r);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{r}</text>"#,
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#,
        left + pw / 2.0,
        h - 6.0
    );
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(r, v)| format!("{:.2},{:.2}", x_of(r), y_of(v)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for &(r, v) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                x_of(r),
                y_of(v)
            );
        }
        let ly = top + 14.0 * i as f64 + 6.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Plot files for the error curves over rounds: `(file name, svg)`.
pub fn round_plots(records: &[MetricRecord]) -> Result<Vec<(String, String)>> {
    if records.is_empty() {
        return Err(Error::Input("no records to plot".into()));
    }
    let d1 = round_curves(records, &["d1_all", "d1_valid", "d1_invalid"]);
    let epe = round_curves(records, &["epe", "epe_valid", "epe_invalid"]);
    Ok(vec![
        (
            "d1_rounds.svg".into(),
            render_round_plot("D1 error (%) per round", &d1, true),
        ),
        (
            "epe_rounds.svg".into(),
            render_round_plot("EPE (px) per round", &epe, false),
        ),
    ])
}
