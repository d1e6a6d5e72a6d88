//! Minimal SVG charts for the CSVs written by `eval` and `diagnose`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Parsed CSV with a header row. Empty and `nan` cells read as `None`.
pub struct Table {
    columns: HashMap<String, usize>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse {
            path: origin.to_path_buf(),
            detail: "missing header row".into(),
        })?;
        let columns = header.split(',').enumerate().map(|(i, c)| (c.trim().to_string(), i)).collect();
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
            .collect();
        Ok(Self { columns, rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn text(&self, row: usize, column: &str) -> Option<&str> {
        let i = *self.columns.get(column)?;
        self.rows[row].get(i).map(String::as_str)
    }

    pub fn number(&self, row: usize, column: &str) -> Option<f64> {
        self.text(row, column)?.parse::<f64>().ok().filter(|v| !v.is_nan())
    }
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(svg: &mut String, title: &str, xlabel: &str, ylabel: &str, f: &Frame) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(svg, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(xv), y1 + 16.0, tick(xv));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, f.py(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(xlabel));
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn legend(svg: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(svg, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (xl, xh, yl, yh) = pts.fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    let frame = Frame {
        x: nice_range(xl, xh),
        y: nice_range(yl, yh),
    };
    let mut svg = String::new();
    open(&mut svg, title, xlabel, ylabel, &frame);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for p in &path {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(svg, r#"<circle cx="{x}" cy="{y}" r="2" fill="{color}"/>"#);
        }
    }
    legend(&mut svg, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Bars as `(lo, hi, count)`.
pub type Bars = Vec<(f64, f64, f64)>;

/// Overlaid per-class histograms.
pub fn histogram_chart(title: &str, xlabel: &str, classes: &[(String, Bars)]) -> String {
    let bars = classes.iter().flat_map(|(_, b)| b.iter());
    let (xl, xh, yh) = bars.fold((f64::INFINITY, f64::NEG_INFINITY, 0.0f64), |(a, b, c), &(lo, hi, n)| {
        (a.min(lo), b.max(hi), c.max(n))
    });
    let frame = Frame {
        x: nice_range(xl, xh),
        y: (0.0, if yh > 0.0 { yh * 1.05 } else { 1.0 }),
    };
    let mut svg = String::new();
    open(&mut svg, title, xlabel, "count", &frame);
    for (i, (_, bars)) in classes.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for &(lo, hi, n) in bars {
            if n <= 0.0 {
                continue;
            }
            let (x, w) = (frame.px(lo), frame.px(hi) - frame.px(lo));
            let (y, h) = (frame.py(n), frame.py(0.0) - frame.py(n));
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                w.max(0.5)
            );
        }
    }
    legend(&mut svg, &classes.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

fn roc_svg(t: &Table) -> String {
    let points = (0..t.rows())
        .filter_map(|r| Some((t.number(r, "far")?, t.number(r, "gar")?)))
        .collect();
    line_chart(
        "ROC",
        "false accept rate",
        "genuine accept rate",
        &[Series { name: "ROC".into(), points }],
    )
}

fn histogram_svg(t: &Table, title: &str) -> String {
    let mut classes: Vec<(String, Bars)> = Vec::new();
    for r in 0..t.rows() {
        let (Some(class), Some(lo), Some(hi), Some(n)) =
            (t.text(r, "class"), t.number(r, "bin_lo"), t.number(r, "bin_hi"), t.number(r, "count"))
        else {
            continue;
        };
        match classes.iter_mut().find(|(c, _)| c == class) {
            Some((_, bars)) => bars.push((lo, hi, n)),
            None => classes.push((class.to_string(), vec![(lo, hi, n)])),
        }
    }
    histogram_chart(title, "decision statistic", &classes)
}

fn sweep_series(t: &Table, columns: &[(&str, &str)]) -> Vec<Series> {
    columns
        .iter()
        .map(|(col, name)| Series {
            name: name.to_string(),
            points: (0..t.rows())
                .filter_map(|r| Some((t.number(r, "w")?, t.number(r, col)?)))
                .collect(),
        })
        .collect()
}

/// Renders every known CSV found in `dir` and returns the SVG paths written.
pub fn render_report(dir: &Path) -> Result<Vec<PathBuf>> {
    type Render = fn(&Table) -> String;
    let jobs: [(&str, &str, Render); 5] = [
        ("roc", "roc.svg", roc_svg),
        ("histogram_z", "histogram_z.svg", |t| histogram_svg(t, "single-orientation latent")),
        ("histogram_zbar", "histogram_zbar.svg", |t| histogram_svg(t, "flip-aggregated latent")),
        ("sweep", "sweep_accuracy.svg", |t| {
            line_chart("accuracy vs non-matching mean", "w", "accuracy", &sweep_series(t, &[("accuracy", "accuracy")]))
        }),
        ("sweep", "sweep_moments.svg", |t| {
            let cols = [
                ("skew_m", "skewness (matching)"),
                ("kurt_m", "kurtosis (matching)"),
                ("skew_n", "skewness (non-matching)"),
                ("kurt_n", "kurtosis (non-matching)"),
            ];
            line_chart("moments vs non-matching mean", "w", "value", &sweep_series(t, &cols))
        }),
    ];
    let mut written = Vec::new();
    for (stem, name, render) in jobs {
        let csv = dir.join(format!("{stem}.csv"));
        if !csv.exists() {
            continue;
        }
        let table = Table::read(&csv)?;
        let out = dir.join(name);
        fs::write(&out, render(&table)).map_err(|e| Error::io(&out, e))?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(Error::Input(format!(
            "{} holds none of roc.csv, histogram_z.csv, histogram_zbar.csv, sweep.csv",
            dir.display()
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_reads_numbers_and_blanks() {
        let t = Table::parse("a,b\n1,nan\n2,\n", Path::new("t.csv")).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.number(1, "a"), Some(2.0));
        assert_eq!(t.number(0, "b"), None);
        assert_eq!(t.number(1, "b"), None);
        assert_eq!(t.number(0, "missing"), None);
    }

    #[test]
    fn charts_are_well_formed() {
        let s = line_chart("t", "x", "y", &[Series { name: "a<b".into(), points: vec![(0.0, 1.0), (1.0, 1.0)] }]);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<circle").count(), 2);
        let h = histogram_chart("h", "x", &[("m".into(), vec![(0.0, 1.0, 3.0), (1.0, 2.0, 0.0)])]);
        assert_eq!(h.matches("fill-opacity").count(), 1);
    }

    #[test]
    fn render_needs_known_csvs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(render_report(dir.path()), Err(Error::Input(_))));
        fs::write(dir.path().join("roc.csv"), "threshold,far,gar\ninf,0,0\n-inf,1,1\n").unwrap();
        fs::write(dir.path().join("sweep.csv"), "w,accuracy,skew_m,kurt_m,skew_n,kurt_n\n5,0.9,0,3,0.1,2.9\n40,0.95,,,,\n").unwrap();
        let out = render_report(dir.path()).unwrap();
        let names: Vec<_> = out.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["roc.svg", "sweep_accuracy.svg", "sweep_moments.svg"]);
    }
}
