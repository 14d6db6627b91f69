//! Labeled saliency grids with CSV and standalone SVG output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A row-major grid of values with axis labels and free-form metadata
/// (variant, mode, target city, horizon, sample count, …).
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub title: String,
    pub row_axis: String,
    pub col_axis: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<f64>,
    /// Samples averaged into the grid (0 when not applicable).
    pub samples: usize,
    pub meta: Vec<(String, String)>,
}

impl SaliencyMap {
    pub fn new(
        title: impl Into<String>,
        (row_axis, row_labels): (&str, Vec<String>),
        (col_axis, col_labels): (&str, Vec<String>),
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != row_labels.len() * col_labels.len() || values.is_empty() {
            return Err(Error::dim(format!(
                "{} values for a {}×{} grid",
                values.len(),
                row_labels.len(),
                col_labels.len()
            )));
        }
        Ok(SaliencyMap {
            title: title.into(),
            row_axis: row_axis.into(),
            col_axis: col_axis.into(),
            row_labels,
            col_labels,
            values,
            samples: 0,
            meta: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    /// Stacks single-row maps with equal columns into one map, one row per
    /// input (labelled by its first row label).
    pub fn stack_rows(title: impl Into<String>, row_axis: &str, maps: &[SaliencyMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::contract("no maps to stack"))?;
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for m in maps {
            if m.col_labels != first.col_labels {
                return Err(Error::dim("stacked maps must share column labels"));
            }
            for r in 0..m.rows() {
                labels.push(m.row_labels[r].clone());
                values.extend_from_slice(&m.values[r * m.cols()..(r + 1) * m.cols()]);
            }
        }
        let mut out = Self::new(title, (row_axis, labels), (&first.col_axis, first.col_labels.clone()), values)?;
        out.samples = first.samples;
        out.meta = first.meta.clone();
        Ok(out)
    }

    /// Column counterpart of [`SaliencyMap::stack_rows`].
    pub fn stack_cols(title: impl Into<String>, col_axis: &str, maps: &[SaliencyMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::contract("no maps to stack"))?;
        if maps.iter().any(|m| m.row_labels != first.row_labels) {
            return Err(Error::dim("stacked maps must share row labels"));
        }
        let labels: Vec<String> = maps.iter().flat_map(|m| m.col_labels.iter().cloned()).collect();
        let mut values = Vec::with_capacity(first.rows() * labels.len());
        for r in 0..first.rows() {
            for m in maps {
                values.extend_from_slice(&m.values[r * m.cols()..(r + 1) * m.cols()]);
            }
        }
        let mut out = Self::new(title, (&first.row_axis, first.row_labels.clone()), (col_axis, labels), values)?;
        out.samples = first.samples;
        out.meta = first.meta.clone();
        Ok(out)
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        SaliencyMap {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Header `row_axis\col_axis,<col labels>`, then one line per row.
    /// `#`-prefixed lines carry the title and metadata.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.title);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}: {v}");
        }
        let _ = write!(s, "{}\\{}", csv_field(&self.row_axis), csv_field(&self.col_axis));
        for c in &self.col_labels {
            let _ = write!(s, ",{}", csv_field(c));
        }
        s.push('\n');
        for (r, label) in self.row_labels.iter().enumerate() {
            s.push_str(&csv_field(label));
            for c in 0..self.cols() {
                let _ = write!(s, ",{}", self.get(r, c));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self) -> String {
        render_svg(self)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_csv())?)
    }

    pub fn save_svg(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_svg())?)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Perceptually ordered dark-to-bright ramp (viridis control points).
const RAMP: [(u8, u8, u8); 9] = [
    (68, 1, 84),
    (71, 44, 122),
    (59, 81, 139),
    (44, 113, 142),
    (33, 144, 141),
    (39, 173, 129),
    (92, 200, 99),
    (170, 220, 50),
    (253, 231, 37),
];

/// Color for `t` in [0, 1]; larger is brighter.
pub fn ramp_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let lerp = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{v:.2}")
    } else {
        format!("{v:.2e}")
    }
}

fn render_svg(m: &SaliencyMap) -> String {
    const CELL: f64 = 28.0;
    const CHAR: f64 = 7.0;
    let finite: Vec<f64> = m.values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if finite.is_empty() { (0.0, 0.0) } else { (lo, hi) };
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };

    let row_w = m.row_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64 * CHAR + 12.0;
    let col_h = m.col_labels.iter().map(|l| l.chars().count()).max().unwrap_or(0) as f64 * CHAR * 0.75 + 16.0;
    let subtitle: String = m
        .meta
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join(" · ");
    let top = 52.0;
    let (gw, gh) = (CELL * m.cols() as f64, CELL * m.rows() as f64);
    let left = row_w.max(20.0);
    let bar_x = left + gw + 24.0;
    let width = (bar_x + 90.0).max(subtitle.chars().count() as f64 * 6.0 + 20.0);
    let height = top + gh + col_h + 10.0;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="15" font-weight="bold">{}</text>"#, xml_escape(&m.title));
    let _ = writeln!(s, r##"<text x="10" y="38" font-size="11" fill="#444">{}</text>"##, xml_escape(&subtitle));
    for r in 0..m.rows() {
        let y = top + r as f64 * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            left - 6.0,
            y + CELL / 2.0,
            xml_escape(&m.row_labels[r])
        );
        for c in 0..m.cols() {
            let v = m.get(r, c);
            let fill = if v.is_finite() { ramp_color(norm(v)) } else { "#cccccc".to_string() };
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{CELL}" height="{CELL}" fill="{fill}"><title>{} / {}: {v}</title></rect>"#,
                left + c as f64 * CELL,
                xml_escape(&m.row_labels[r]),
                xml_escape(&m.col_labels[c])
            );
        }
    }
    for (c, label) in m.col_labels.iter().enumerate() {
        let x = left + c as f64 * CELL + CELL / 2.0;
        let y = top + gh + 8.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="11" text-anchor="end" transform="rotate(-45 {x:.1} {y:.1})">{}</text>"#,
            xml_escape(label)
        );
    }
    // Color bar, bright (max) at the top.
    let steps = 32;
    let bar_h = gh.max(80.0);
    for i in 0..steps {
        let t = 1.0 - i as f64 / (steps - 1) as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{bar_x:.1}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            top + bar_h * i as f64 / steps as f64,
            bar_h / steps as f64 + 0.5,
            ramp_color(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" dominant-baseline="hanging">{}</text>"#,
        bar_x + 18.0,
        top,
        fmt_tick(hi)
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
        bar_x + 18.0,
        top + bar_h,
        fmt_tick(lo)
    );
    s.push_str("</svg>\n");
    s
}
