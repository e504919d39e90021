//! Metric tables, curve files and SVG line plots.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRIC_HEADER: &str = "protocol,resolution,regime,target,threshold,value";

/// Regimes in table order; anything else sorts after these, by name.
pub const REGIME_ORDER: [&str; 5] = ["teacher", "scratch", "kd", "kt", "kd_kt"];
/// Protocols in table order; anything else sorts after these, by name.
pub const PROTOCOL_ORDER: [&str; 4] = ["dir_far", "tpir_fpir", "tar_far", "cmc"];

/// One table cell. `value` is a percentage held at two decimals.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub protocol: String,
    pub resolution: usize,
    pub regime: String,
    /// False-rate target, or the rank for CMC rows.
    pub target: f64,
    pub threshold: Option<f64>,
    pub value: f64,
}

/// Rounds a rate in `[0, 1]` to a percentage with two decimals.
pub fn percent(rate: f64) -> f64 {
    (rate * 10_000.0).round() / 100.0
}

impl MetricRow {
    pub fn new(protocol: &str, resolution: usize, regime: &str, target: f64, threshold: Option<f64>, rate: f64) -> Self {
        MetricRow {
            protocol: protocol.to_string(),
            resolution,
            regime: regime.to_string(),
            target,
            threshold,
            value: percent(rate),
        }
    }
}

fn order_of(list: &[&str], key: &str) -> (usize, String) {
    (list.iter().position(|&k| k == key).unwrap_or(list.len()), key.to_string())
}

fn row_order(a: &MetricRow, b: &MetricRow) -> Ordering {
    b.resolution
        .cmp(&a.resolution)
        .then_with(|| order_of(&REGIME_ORDER, &a.regime).cmp(&order_of(&REGIME_ORDER, &b.regime)))
        .then_with(|| order_of(&PROTOCOL_ORDER, &a.protocol).cmp(&order_of(&PROTOCOL_ORDER, &b.protocol)))
        .then_with(|| a.target.total_cmp(&b.target))
}

/// Sorts rows by resolution (descending), regime, protocol and target.
pub fn sort_rows(rows: &mut [MetricRow]) {
    rows.sort_by(row_order);
}

fn check_field(s: &str) -> Result<()> {
    if s.is_empty() || s.contains([',', '\n', '"']) {
        return Err(Error::invalid(format!("metric label `{s}` must be non-empty without commas, quotes or newlines")));
    }
    Ok(())
}

/// CSV text of the rows in table order.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut out = format!("{METRIC_HEADER}\n");
    for r in &rows {
        check_field(&r.protocol)?;
        check_field(&r.regime)?;
        let threshold = r.threshold.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{},{:.2}", r.protocol, r.resolution, r.regime, r.target, threshold, r.value)
            .expect("writing to a string");
    }
    Ok(out)
}

/// Parses text produced by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let perr = |line: usize, message: String| Error::Parse { path: "<metrics>".into(), line, message };
    match lines.next() {
        Some(h) if h == METRIC_HEADER => {}
        _ => return Err(perr(1, format!("header must be `{METRIC_HEADER}`"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let line = i + 2;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(perr(line, format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| perr(line, format!("bad {what} `{s}`")));
            Ok(MetricRow {
                protocol: f[0].to_string(),
                resolution: f[1].parse().map_err(|_| perr(line, format!("bad resolution `{}`", f[1])))?,
                regime: f[2].to_string(),
                target: num(f[3], "target")?,
                threshold: if f[4].is_empty() { None } else { Some(num(f[4], "threshold")?) },
                value: num(f[5], "value")?,
            })
        })
        .collect()
}

/// Two-column curve file.
pub fn curve_csv(x_name: &str, y_name: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{x_name},{y_name}\n");
    for (x, y) in points {
        writeln!(out, "{x},{y}").expect("writing to a string");
    }
    out
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    /// Base-10 log x axis; points with x ≤ 0 are dropped.
    pub log_x: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// SVG 1.1 line plot, y fixed to `[0, 1]`.
pub fn svg_plot(spec: &PlotSpec, series: &[Series]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 170.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let tx = |x: f64| if spec.log_x { x.log10() } else { x };
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| !spec.log_x || p.0 > 0.0)
        .map(|p| tx(p.0))
        .collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let px = |x: f64| left + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, spec.title);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{y:.2}</text>"#, left - 4.0, py(y) + 3.0);
    }
    for i in 0..=4 {
        let t = x0 + (x1 - x0) * i as f64 / 4.0;
        let label = if spec.log_x { format!("1e{t:.1}") } else { format!("{t:.2}") };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{label}</text>"#,
            left + pw * i as f64 / 4.0,
            top + ph + 14.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, left + pw / 2.0, h - 12.0, spec.x_label);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {0})">{1}</text>"#,
        top + ph / 2.0,
        spec.y_label
    );
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (k, &(x, y)) in ser.points.iter().filter(|p| !spec.log_x || p.0 > 0.0).enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, px(x), py(y));
        }
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, d.trim_end());
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, w - right + 10.0, w - right + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, w - right + 34.0, ly + 4.0, ser.label);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(metrics_csv(&[]).unwrap(), format!("{METRIC_HEADER}\n"));
    }

    #[test]
    fn percent_has_two_decimals() {
        assert_eq!(percent(0.857_44), 85.74);
        assert_eq!(format!("{:.2}", percent(1.0)), "100.00");
    }

    #[test]
    fn plot_is_well_formed_svg() {
        let svg = svg_plot(
            &PlotSpec { title: "DET", x_label: "FAR", y_label: "TAR", log_x: true },
            &[Series { label: "a".into(), points: vec![(0.0, 0.0), (0.01, 0.5), (1.0, 1.0)] }],
        );
        assert!(svg.starts_with("<?xml") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<path").count(), 1);
    }
}
