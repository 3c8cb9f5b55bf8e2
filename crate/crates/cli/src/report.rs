//! Aggregates ablation CSVs into per-axis charts and a text table.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use geossl_core::harness::{mean_std, CsvRow};

/// Mean and sample std of one metric at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub label: String,
    pub knn: Stat,
    pub linear: Option<Stat>,
    pub spearman: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub axis: String,
    pub points: Vec<Point>,
}

fn stat(values: &[f64]) -> Option<Stat> {
    mean_std(values).map(|(mean, std)| Stat {
        mean,
        std,
        n: values.len(),
    })
}

fn parse_cell(row: &CsvRow, name: &str, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) => Ok(Some(v)),
        Err(_) => bail!("run {}: {name} cell `{cell}` is not a number", row.run_id),
    }
}

/// Groups the per-seed metric rows by axis and grid point, both in order
/// of first appearance. Summary rows are ignored since they are derived
/// from the seed rows.
pub fn aggregate(rows: &[CsvRow]) -> Result<Vec<Series>> {
    type Points<'a> = Vec<(String, Vec<&'a CsvRow>)>;
    let mut groups: Vec<(String, Points)> = Vec::new();
    for row in rows.iter().filter(|r| r.has_metrics() && !r.is_summary()) {
        let axis = match groups.iter_mut().find(|(a, _)| *a == row.axis) {
            Some(g) => g,
            None => {
                groups.push((row.axis.clone(), Vec::new()));
                groups.last_mut().expect("just pushed")
            }
        };
        match axis.1.iter_mut().find(|(p, _)| *p == row.grid_point) {
            Some((_, v)) => v.push(row),
            None => axis.1.push((row.grid_point.clone(), vec![row])),
        }
    }
    if groups.is_empty() {
        bail!("no rows with final metrics in the input");
    }
    groups
        .into_iter()
        .map(|(axis, points)| {
            let points = points
                .into_iter()
                .map(|(label, rows)| {
                    let mut knn = Vec::new();
                    let mut lin = Vec::new();
                    let mut sp = Vec::new();
                    for r in &rows {
                        knn.extend(parse_cell(r, "knn_acc_macro", &r.knn_acc_macro)?);
                        lin.extend(parse_cell(r, "linear_acc_macro", &r.linear_acc_macro)?);
                        sp.extend(parse_cell(r, "spearman_geo", &r.spearman_geo)?);
                    }
                    Ok(Point {
                        label,
                        knn: stat(&knn).expect("metric rows carry knn"),
                        linear: stat(&lin),
                        spearman: stat(&sp),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Series { axis, points })
        })
        .collect()
}

fn fmt_stat(s: Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "-".into(),
    }
}

pub fn summary_table(series: &[Series]) -> String {
    let header = [
        "axis",
        "grid_point",
        "runs",
        "knn_acc_macro",
        "linear_acc_macro",
        "spearman_geo",
    ];
    let mut rows: Vec<[String; 6]> = vec![header.map(String::from)];
    for s in series {
        for p in &s.points {
            rows.push([
                s.axis.clone(),
                p.label.clone(),
                p.knn.n.to_string(),
                fmt_stat(Some(p.knn)),
                fmt_stat(p.linear),
                fmt_stat(p.spearman),
            ]);
        }
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}", w = *w))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

/// Line chart of k-NN accuracy (mean with ± std error bars) over the grid
/// points, which are spaced evenly as categories.
pub fn svg_chart(series: &Series) -> String {
    let pts = &series.points;
    let lo = pts
        .iter()
        .map(|p| p.knn.mean - p.knn.std)
        .fold(f64::INFINITY, f64::min);
    let hi = pts
        .iter()
        .map(|p| p.knn.mean + p.knn.std)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (y0, y1) = (lo - pad, hi + pad);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |i: usize| LEFT + plot_w * (i as f64 + 0.5) / pts.len() as f64;
    let y = |v: f64| TOP + plot_h * (y1 - v) / (y1 - y0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(&series.axis)
    );
    // Axes and horizontal grid lines.
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = TOP + plot_h,
        r = LEFT + plot_w
    );
    for t in 0..=4 {
        let v = y0 + (y1 - y0) * t as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{yy:.2}" x2="{r}" y2="{yy:.2}" stroke="#ddd"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{v:.3}</text>"##,
            r = LEFT + plot_w,
            tx = LEFT - 6.0,
            ty = yy + 4.0
        );
    }
    for (i, p) in pts.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x(i),
            TOP + plot_h + 18.0,
            escape(&p.label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">grid point</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">k-NN macro accuracy</text>"#,
        TOP + plot_h / 2.0
    );
    // The series: error bars, line, markers.
    let _ = writeln!(s, r##"<g stroke="#1f77b4" fill="#1f77b4">"##);
    for (i, p) in pts.iter().enumerate() {
        let (xi, a, b) = (x(i), y(p.knn.mean + p.knn.std), y(p.knn.mean - p.knn.std));
        let _ = writeln!(
            s,
            r#"<path d="M{xi:.2} {a:.2} V{b:.2} M{l:.2} {a:.2} H{r:.2} M{l:.2} {b:.2} H{r:.2}" fill="none"/>"#,
            l = xi - 5.0,
            r = xi + 5.0
        );
    }
    let line: Vec<String> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{:.2},{:.2}", x(i), y(p.knn.mean)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke-width="2"/>"#,
        line.join(" ")
    );
    for (i, p) in pts.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4"><title>{}: {:.4} ± {:.4} (n={})</title></circle>"#,
            x(i),
            y(p.knn.mean),
            escape(&p.label),
            p.knn.mean,
            p.knn.std,
            p.knn.n
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(axis: &str, point: &str, seed: &str, knn: &str) -> CsvRow {
        CsvRow {
            run_id: format!("{axis}-{point}-{seed}"),
            axis: axis.into(),
            grid_point: point.into(),
            seed: seed.into(),
            ssl_kind: "infonce".into(),
            geo_kind: "rank".into(),
            alpha: "0.48".into(),
            d_max: "2500".into(),
            epoch: "1".into(),
            loss_ssl: "1".into(),
            loss_reg: "0".into(),
            loss_total: "1".into(),
            knn_acc_macro: knn.into(),
            linear_acc_macro: String::new(),
            spearman_geo: String::new(),
            wallclock_s: "1".into(),
        }
    }

    #[test]
    fn aggregates_seeds_per_point_in_order() {
        let rows = vec![
            row("cardinality", "0.5", "0", "0.4"),
            row("cardinality", "1", "0", "0.6"),
            row("cardinality", "0.5", "1", "0.6"),
            row("cardinality", "0.5", "summary", "0.5±0.14"),
            row("cardinality", "1", "1", "0.8"),
            row("cardinality", "1", "2", ""),
        ];
        let s = aggregate(&rows).unwrap();
        assert_eq!(s.len(), 1);
        let labels: Vec<&str> = s[0].points.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["0.5", "1"]);
        let p = s[0].points[0].knn;
        assert_eq!(p.n, 2);
        assert!((p.mean - 0.5).abs() < 1e-12);
        assert!((p.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(s[0].points[0].linear.is_none());
    }

    #[test]
    fn no_metrics_is_an_error() {
        assert!(aggregate(&[row("a", "p", "0", "")]).is_err());
    }

    #[test]
    fn bad_metric_cell_names_the_run() {
        let err = aggregate(&[row("a", "p", "0", "high")])
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("a-p-0") && err.contains("knn_acc_macro"),
            "{err}"
        );
    }

    #[test]
    fn chart_has_one_marker_and_bar_per_point() {
        let rows: Vec<CsvRow> = ["a", "b", "c"]
            .iter()
            .flat_map(|p| {
                ["0", "1"].map(|sd| row("temporal", p, sd, if sd == "0" { "0.3" } else { "0.5" }))
            })
            .collect();
        let svg = svg_chart(&aggregate(&rows).unwrap()[0]);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn labels_are_escaped() {
        let svg = svg_chart(&aggregate(&[row("x<y", "a&b", "0", "0.5")]).unwrap()[0]);
        assert!(svg.contains("x&lt;y") && svg.contains("a&amp;b"));
    }
}
