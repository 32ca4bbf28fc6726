//! Result persistence: CSV tables, self-contained SVG plots, and the run
//! manifest.

use std::io::Write;
use std::path::Path;

/// A named column with its unit, e.g. `time[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            values,
        }
    }
}

/// Column-oriented result table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<Column>,
}

impl Table {
    pub fn new() -> Self {
        Table::default()
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>) -> &mut Self {
        self.columns.push(Column::new(name, values));
        self
    }

    pub fn rows(&self) -> usize {
        self.columns.iter().map(|c| c.values.len()).max().unwrap_or(0)
    }

    /// UTF-8 CSV with a `name[unit]` header row and floats printed with 17
    /// significant digits so a read-back is bit-exact.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        let rows = self.rows();
        for r in 0..rows {
            let mut first = true;
            for c in &self.columns {
                if !first {
                    out.push(',');
                }
                first = false;
                if let Some(v) = c.values.get(r) {
                    out.push_str(&format_float(*v));
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parse a CSV produced by [`Table::to_csv`].
    pub fn from_csv(text: &str) -> Result<Table, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty csv")?;
        let mut columns: Vec<Column> = header
            .split(',')
            .map(|n| Column::new(n.to_string(), Vec::new()))
            .collect();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            for (c, tok) in line.split(',').enumerate() {
                if c >= columns.len() {
                    return Err(format!("row {} has too many fields", i + 2));
                }
                if tok.is_empty() {
                    continue;
                }
                let v: f64 = tok
                    .parse()
                    .map_err(|_| format!("row {}: bad float `{tok}`", i + 2))?;
                columns[c].values.push(v);
            }
        }
        Ok(Table { columns })
    }
}

/// 17 significant digits: enough for an exact f64 round trip.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(path: &Path, table: &Table) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(table.to_csv().as_bytes())
}

/// Key-value run manifest, written before any result file and refreshed at
/// the end of the run with the wall-clock and convergence flags.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        if let Some(slot) = self.entries.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
        } else {
            self.entries.push((key.to_string(), value.to_string()));
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("manifest.txt"), self.to_text())
    }
}

/// One plotted series.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    } * mag;
    let start = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut v = start;
    while v <= hi + 1e-9 * span {
        ticks.push(v);
        v += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

/// Self-contained SVG line plot; no external assets.
pub fn svg_line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[PlotSeries],
) -> String {
    let (w, h) = (820.0, 500.0);
    let (ml, mr, mt, mb) = (90.0, 20.0, 40.0, 60.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if ymin == ymax {
        ymin -= 0.5;
        ymax += 0.5;
    }
    let ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;
    let sx = move |x: f64| ml + (x - xmin) / (xmax - xmin).max(1e-300) * pw;
    let sy = move |y: f64| mt + ph - (y - ymin) / (ymax - ymin).max(1e-300) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        w / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#333\"/>\n"
    ));
    for t in nice_ticks(xmin, xmax, 7) {
        let x = sx(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{0:.1}\" x2=\"{x:.1}\" y2=\"{1:.1}\" stroke=\"#ccc\"/>\n\
             <text x=\"{x:.1}\" y=\"{2:.1}\" text-anchor=\"middle\">{3}</text>\n",
            mt,
            mt + ph,
            mt + ph + 18.0,
            fmt_tick(t)
        ));
    }
    for t in nice_ticks(ymin, ymax, 6) {
        let y = sy(t);
        svg.push_str(&format!(
            "<line x1=\"{0:.1}\" y1=\"{y:.1}\" x2=\"{1:.1}\" y2=\"{y:.1}\" stroke=\"#ccc\"/>\n\
             <text x=\"{2:.1}\" y=\"{3:.1}\" text-anchor=\"end\">{4}</text>\n",
            ml,
            ml + pw,
            ml - 6.0,
            y + 4.0,
            fmt_tick(t)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        ml + pw / 2.0,
        h - 14.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        y_label
    ));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
            pts.join(" ")
        ));
        let ly = mt + 16.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n\
             <text x=\"{2}\" y=\"{3}\">{4}</text>\n",
            ml + pw - 150.0,
            ml + pw - 120.0,
            ml + pw - 112.0,
            ly + 4.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Occupation-probability heatmap over the (n1, n2) lattice.
pub fn svg_heatmap(
    title: &str,
    origin: [i64; 2],
    size: usize,
    probs: &[f64],
) -> String {
    let cell = 420.0 / size as f64;
    let (ml, mt) = (80.0, 50.0);
    let w = ml + size as f64 * cell + 30.0;
    let h = mt + size as f64 * cell + 60.0;
    let pmax = probs.iter().fold(0.0f64, |a, &b| a.max(b)).max(1e-300);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w:.0} {h:.0}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>\n\
         <text x=\"{:.0}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        title
    ));
    for i in 0..size {
        for j in 0..size {
            let p = probs[i * size + j];
            let u = (p / pmax).powf(0.4); // gamma stretch for visibility
            let r = (255.0 * u) as u8;
            let g = (90.0 * u) as u8;
            let b = (255.0 * (1.0 - u) * 0.5 + 60.0) as u8;
            // n1 on the vertical axis, increasing upward
            let x = ml + j as f64 * cell;
            let y = mt + (size - 1 - i) as f64 * cell;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.2}\" height=\"{cell:.2}\" \
                 fill=\"rgb({r},{g},{b})\"/>\n"
            ));
        }
    }
    // axis labels at every few cells
    let step = (size / 6).max(1);
    for k in (0..size).step_by(step) {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            ml + (k as f64 + 0.5) * cell,
            mt + size as f64 * cell + 16.0,
            origin[1] + k as i64
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ml - 6.0,
            mt + (size - 1 - k) as f64 * cell + 0.6 * cell,
            origin[0] + k as i64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\">n2</text>\n",
        ml + size as f64 * cell / 2.0,
        h - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{:.0}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.0})\">n1</text>\n",
        mt + size as f64 * cell / 2.0,
        mt + size as f64 * cell / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut t = Table::new();
        t.push(
            "time[s]",
            vec![0.0, 1.2345678901234567e-9, -3.14159e8, f64::MIN_POSITIVE],
        );
        t.push("current[A]", vec![1.0 / 3.0, 2.0f64.sqrt(), -1e-300, 7.0]);
        let text = t.to_csv();
        let back = Table::from_csv(&text).unwrap();
        assert_eq!(t, back);
        for (a, b) in t.columns.iter().zip(&back.columns) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        let mut t = Table::new();
        t.push("a[1]", vec![]);
        t.push("b[V]", vec![]);
        assert_eq!(t.to_csv(), "a[1],b[V]\n");
    }

    #[test]
    fn svg_is_self_contained() {
        let svg = svg_line_plot(
            "test",
            "t[s]",
            "I[A]",
            &[PlotSeries {
                label: "I".into(),
                points: (0..50)
                    .map(|k| (k as f64, (k as f64 * 0.3).sin()))
                    .collect(),
            }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert!(!svg.contains("http://") || svg.contains("xmlns"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn manifest_updates_in_place() {
        let mut m = RunManifest::default();
        m.set("seed", 42);
        m.set("converged", "pending");
        m.set("converged", true);
        let text = m.to_text();
        assert_eq!(text.matches("converged").count(), 1);
        assert!(text.contains("converged = true"));
    }
}
