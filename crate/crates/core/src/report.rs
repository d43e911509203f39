//! Text, CSV and JSON tables plus SVG scatter plots.
//!
//! Everything here is a pure function of its inputs, so repeated renders are
//! byte-identical.

use std::fmt::Write as _;

use serde_json::{Map, Value};

use crate::analysis::{self, map_of, AnalysisError, Dataset, DesignPoint, Metric, Scope};
use crate::architectures::BackboneVariant;
use crate::cost_model::CostReport;
use crate::exact::{self, format_fixed, Exact};

/// A rectangular table of preformatted cells.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Table { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        let row: Vec<String> = row.into_iter().map(Into::into).collect();
        assert_eq!(row.len(), self.headers.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("cells are utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut table = Table::new(r.headers().map_err(|e| e.to_string())?.iter());
        for rec in r.records() {
            table.rows.push(rec.map_err(|e| e.to_string())?.iter().map(str::to_string).collect());
        }
        Ok(table)
    }

    /// Array of objects keyed by header; cells stay strings so exact values
    /// survive.
    pub fn to_json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let obj: Map<String, Value> =
                    self.headers.iter().cloned().zip(row.iter().map(|c| Value::String(c.clone()))).collect();
                Value::Object(obj)
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("tables always serialize")
    }

    /// Aligned columns; the first is left-aligned, the rest right-aligned.
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.chars().count()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        for row in std::iter::once(&self.headers).chain(&self.rows) {
            let mut line = String::new();
            for (i, (cell, w)) in row.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(line, "{cell:<w$}");
                } else {
                    let _ = write!(line, "  {cell:>w$}");
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Per-node rows of a cost report.
pub fn cost_table(report: &CostReport) -> Table {
    let mut t = Table::new(["name", "kind", "output", "madds", "params"]);
    for n in &report.per_node {
        t.push([n.name.clone(), n.kind.clone(), n.output.clone(), n.madds.to_string(), n.params.to_string()]);
    }
    t
}

/// Node table, stage subtotals and the two TOTAL lines.
pub fn cost_text(report: &CostReport) -> String {
    let mut out = cost_table(report).to_text();
    out.push('\n');
    let mut stages = Table::new(["stage", "madds", "params", "share"]);
    for (stage, c) in report.stages_in_order() {
        let share = if report.total_madds == 0 {
            exact::zero()
        } else {
            exact::from_u64(c.madds) * exact::int(100) / exact::from_u64(report.total_madds)
        };
        stages.push([
            stage.to_string(),
            c.madds.to_string(),
            c.params.to_string(),
            format!("{}%", format_fixed(&share, 1)),
        ]);
    }
    out.push_str(&stages.to_text());
    out.push('\n');
    let _ = writeln!(out, "TOTAL {} MAdd = {} GMAdd", report.total_madds, format_fixed(&report.gmadds(), 2));
    let _ = writeln!(out, "TOTAL {} params", report.total_params);
    out
}

/// One row per variant: exact totals and the MAdd speedup over the first
/// `Base` row (if present).
pub fn compare_table(rows: &[(BackboneVariant, CostReport)]) -> Table {
    let base = rows.iter().find(|(v, _)| *v == BackboneVariant::Base).map(|(_, r)| r.total_madds);
    let mut t = Table::new(["variant", "madds", "gmadds", "params", "madd_su"]);
    for (v, r) in rows {
        let su = match base {
            Some(b) if r.total_madds > 0 => format_fixed(&(exact::from_u64(b) / exact::from_u64(r.total_madds)), 2),
            _ => "-".to_string(),
        };
        t.push([
            v.label().to_string(),
            r.total_madds.to_string(),
            exact::to_text(&r.gmadds()),
            r.total_params.to_string(),
            su,
        ]);
    }
    t
}

fn opt2(v: Option<&Exact>) -> String {
    v.map(|v| format_fixed(v, 2)).unwrap_or_else(|| "-".into())
}

/// Measured values of `metric` with their speedups over the dataset's base.
pub fn ratio_report(ds: &Dataset, metric: Metric) -> Result<Table, AnalysisError> {
    let ratios = analysis::ratio_table(&ds.points, metric, &ds.base)?;
    let mut t = Table::new(["name", metric.label(), "speedup", "printed"]);
    for (p, (_, r)) in ds.points.iter().zip(&ratios) {
        let printed = p.printed.as_ref().and_then(|pr| pr.ratio(metric));
        t.push([p.name.clone(), exact::to_text(p.metric(metric)?), format_fixed(r, 2), opt2(printed)]);
    }
    Ok(t)
}

/// mAP per scope for every point, 2 decimals.
pub fn map_report(ds: &Dataset) -> Result<Table, AnalysisError> {
    let mut t = Table::new(std::iter::once("name").chain(Scope::ALL.iter().map(|s| s.label())));
    for p in &ds.points {
        let mut row = vec![p.name.clone()];
        for s in Scope::ALL {
            row.push(format_fixed(&map_of(p, s)?, 2));
        }
        t.push(row);
    }
    Ok(t)
}

/// Front members in ascending GMAdd order with their coordinates.
pub fn pareto_report(ds: &Dataset, scope: Scope) -> Result<Table, AnalysisError> {
    let front = analysis::pareto_front(&ds.points, scope)?;
    let mut t = Table::new(["name", "gmadds", "map"]);
    for name in front {
        let p = ds.point(&name)?;
        t.push([name.clone(), exact::to_text(&p.gmadds), format_fixed(&map_of(p, scope)?, 2)]);
    }
    Ok(t)
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 40.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;

/// Step from the 1-2-5 series giving about `target` intervals over `span`.
fn nice_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let m = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    m * mag
}

fn axis(lo: f64, hi: f64) -> (f64, f64, f64) {
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let step = nice_step(hi - lo, 5.0);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Scatter of mAP (y) against GMAdd (x) with `highlight` members drawn as
/// a connected red front.
pub fn render_scatter(points: &[DesignPoint], scope: Scope, highlight: &[String]) -> Result<String, AnalysisError> {
    let coords: Vec<(&str, f64, f64)> = points
        .iter()
        .map(|p| Ok((p.name.as_str(), exact::to_f64(&p.gmadds), exact::to_f64(&map_of(p, scope)?))))
        .collect::<Result<_, AnalysisError>>()?;
    let fold =
        |f: fn(&(&str, f64, f64)) -> f64, init: f64, pick: fn(f64, f64) -> f64| coords.iter().map(f).fold(init, pick);
    let (x0, x1, xs) = axis(0.0, fold(|c| c.1, 0.0, f64::max).max(1.0));
    let (y0, y1, ys) = if coords.is_empty() {
        axis(0.0, 100.0)
    } else {
        axis(fold(|c| c.2, f64::INFINITY, f64::min), fold(|c| c.2, f64::NEG_INFINITY, f64::max))
    };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let title = match scope {
        Scope::AllClasses => "Overall mAP vs GMAdd".to_string(),
        Scope::OneClass(c) => format!("{c} mAP vs GMAdd"),
    };
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(&title)
    );

    let _ = writeln!(s, r##"<g stroke="#dddddd" stroke-width="1">"##);
    let mut ticks_x = Vec::new();
    let mut x = x0;
    while x <= x1 + xs * 1e-6 {
        ticks_x.push(x);
        x += xs;
    }
    let mut ticks_y = Vec::new();
    let mut y = y0;
    while y <= y1 + ys * 1e-6 {
        ticks_y.push(y);
        y += ys;
    }
    for &t in &ticks_x {
        let _ = writeln!(s, r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}"/>"#, px(t), TOP, TOP + ph);
    }
    for &t in &ticks_y {
        let _ = writeln!(s, r#"<line x1="{1:.2}" y1="{0:.2}" x2="{2:.2}" y2="{0:.2}"/>"#, py(t), LEFT, LEFT + pw);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    for &t in &ticks_x {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(t),
            TOP + ph + 18.0,
            tick_label(t, xs)
        );
    }
    for &t in &ticks_y {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 8.0,
            py(t) + 4.0,
            tick_label(t, ys)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">GMAdd (10^9 multiply-add operations)</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{0:.2}" text-anchor="middle" transform="rotate(-90 20 {0:.2})">mAP (%)</text>"#,
        TOP + ph / 2.0
    );

    let mut front: Vec<&(&str, f64, f64)> = coords.iter().filter(|c| highlight.iter().any(|h| h == c.0)).collect();
    front.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    if front.len() > 1 {
        let path: Vec<String> = front.iter().map(|c| format!("{:.2},{:.2}", px(c.1), py(c.2))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="1.5" stroke-dasharray="4 3"/>"##,
            path.join(" ")
        );
    }
    for &(name, gx, my) in &coords {
        let on_front = highlight.iter().any(|h| h == name);
        let (r, fill, weight) = if on_front { (6.0, "#d62728", "bold") } else { (4.0, "#555555", "normal") };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}" class="{}"><title>{}</title></circle>"#,
            px(gx),
            py(my),
            if on_front { "pareto" } else { "point" },
            escape(name)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-weight="{weight}">{}</text>"#,
            px(gx) + 8.0,
            py(my) - 6.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
